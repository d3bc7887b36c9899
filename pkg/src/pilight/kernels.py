"""Kernel backend selection.

The compiled extension is used when it was built; ``PILIGHT_PURE_PYTHON=1``
forces the numpy fallback.  Both backends take float64 arrays.
"""

import os

import numpy as np

from . import _kernels_py

_pure = os.environ.get("PILIGHT_PURE_PYTHON", "") not in ("", "0")

try:
    if _pure:
        raise ImportError("pure python requested")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _kernels_py
    BACKEND = "python"


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def bilinear_wrap(src, x, y):
    return _impl.bilinear_wrap(_f64(src), _f64(x), _f64(y))


def diffuse_integrate(normals, dirs, weights, radiance):
    return _impl.diffuse_integrate(_f64(normals), _f64(dirs), _f64(weights), _f64(radiance))


def diffuse_integrate_shadowed(points, normals, owner, spheres, dirs, weights, radiance):
    return _impl.diffuse_integrate_shadowed(
        _f64(points), _f64(normals), np.ascontiguousarray(owner, dtype=np.int64),
        _f64(np.reshape(spheres, (-1, 4))), _f64(dirs), _f64(weights), _f64(radiance))


def specular_integrate(normals, view, alpha, dirs, weights, radiance):
    return _impl.specular_integrate(
        _f64(normals), _f64(view), _f64(alpha), _f64(dirs), _f64(weights), _f64(radiance))
