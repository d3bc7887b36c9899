"""Pure numpy implementations of the hot rendering kernels.

Contracts mirror ``_ckernels.pyx`` exactly; both are float64 in and out.
"""

import numpy as np

_CHUNK = 512


def bilinear_wrap(src, x, y):
    """Sample ``src`` (C, H, W) at pixel coords (x, y): x wraps, y clamps."""
    _, h, w = src.shape
    y = np.clip(y, 0.0, h - 1.0)
    x0f = np.floor(x)
    fx = x - x0f
    x0 = x0f.astype(np.int64) % w
    x1 = (x0 + 1) % w
    y0 = np.floor(y).astype(np.int64)
    fy = y - y0
    y1 = np.minimum(y0 + 1, h - 1)
    top = src[:, y0, x0] * (1.0 - fx) + src[:, y0, x1] * fx
    bot = src[:, y1, x0] * (1.0 - fx) + src[:, y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def diffuse_integrate(normals, dirs, weights, radiance):
    """sum_t L_t * max(0, n . d_t) * w_t  ->  (P, C)."""
    cos = np.maximum(normals @ dirs.T, 0.0)
    return cos @ (radiance * weights[:, None])


def _sphere_hits(points, dirs, center, radius):
    # ray p + s d, s > 0, against one sphere; returns (P, T) bool
    oc = points - center
    b = dirs @ oc.T  # (T, P)
    c = np.sum(oc * oc, axis=1) - radius * radius  # (P,)
    disc = b * b - c[None, :]
    hit = disc > 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    far = -b + sq
    near = -b - sq
    # start outside with the sphere ahead, or start inside
    return (hit & (far > 1e-6) & ((near > 1e-6) | (c[None, :] < 0.0))).T


def diffuse_integrate_shadowed(points, normals, owner, spheres, dirs, weights, radiance):
    """Diffuse integral with binary visibility against analytic spheres.

    ``owner[p]`` is the index of the sphere that pixel p lies on (-1 for
    other surfaces); a sphere never occludes its own surface points.
    """
    p_count = points.shape[0]
    out = np.empty((p_count, radiance.shape[1]), dtype=np.float64)
    lw = radiance * weights[:, None]
    for s in range(0, p_count, _CHUNK):
        e = min(s + _CHUNK, p_count)
        cos = np.maximum(normals[s:e] @ dirs.T, 0.0)
        vis = np.ones_like(cos, dtype=bool)
        for k in range(spheres.shape[0]):
            blocked = _sphere_hits(points[s:e], dirs, spheres[k, :3], spheres[k, 3])
            blocked &= (owner[s:e] != k)[:, None]
            vis &= ~blocked
        out[s:e] = (cos * vis) @ lw
    return out


def specular_integrate(normals, view, alpha, dirs, weights, radiance):
    """Split-Fresnel GGX integral.

    Returns ``(base, edge)`` of shape (P, C) with
    ``S = F0 * base + edge`` for Schlick ``F = F0 + (1 - F0)(1 - v.h)^5``.
    Pixels with n.v <= 0 are zero.
    """
    p_count = normals.shape[0]
    c = radiance.shape[1]
    base = np.zeros((p_count, c), dtype=np.float64)
    edge = np.zeros((p_count, c), dtype=np.float64)
    for s in range(0, p_count, _CHUNK):
        e = min(s + _CHUNK, p_count)
        n = normals[s:e]
        a2 = (alpha[s:e] ** 2)[:, None]
        nv = (n @ view)[:, None]
        nl = n @ dirs.T
        h = dirs + view[None, :]
        h /= np.linalg.norm(h, axis=1, keepdims=True) + 1e-300
        nh = n @ h.T
        vh = h @ view  # (T,)
        valid = (nl > 0.0) & (nv > 0.0)
        nl_c = np.where(valid, nl, 1.0)
        nv_c = np.where(nv > 0.0, nv, 1.0)
        t = nh * nh * (a2 - 1.0) + 1.0
        d = a2 / (np.pi * t * t)
        g1v = 2.0 * nv_c / (nv_c + np.sqrt(a2 + (1.0 - a2) * nv_c * nv_c))
        g1l = 2.0 * nl_c / (nl_c + np.sqrt(a2 + (1.0 - a2) * nl_c * nl_c))
        # D G / (4 nv nl) * nl * w
        k = np.where(valid, d * g1v * g1l / (4.0 * nv_c), 0.0) * weights[None, :]
        sch = np.clip(1.0 - vh, 0.0, 1.0) ** 5
        base[s:e] = (k * (1.0 - sch)[None, :]) @ radiance
        edge[s:e] = (k * sch[None, :]) @ radiance
    return base, edge
