import numpy as np
import pytest
from hypothesis import given, strategies as st

from pilight.lighting import ball_geometry, render_gray_ball
from pilight.losses import (
    EdgeStructureExtractor, LossWeights, diffuse_shading_loss, diffuse_target, feature_similarity,
    latent_mask, masked_vpred_loss, physical_shading_loss, reconstruction_loss, stage2_total)

from conftest import central_fd, rel_err, smooth_env

TRIALS = 20


def check_gradient(f, x, grad, rng, h, tol, n_idx=8):
    worst = 0.0
    scale = np.abs(grad).max()
    for _ in range(n_idx):
        idx = tuple(rng.integers(0, s) for s in x.shape)
        fd = central_fd(f, x, idx, h)
        worst = max(worst, rel_err(grad[idx], fd, floor=1e-6 * max(scale, 1e-12)))
    assert worst < tol, worst


def half_mask(h=64, w=64):
    m = np.zeros((1, h, w))
    m[..., : w // 2] = 1.0
    return m


def test_latent_mask_binarises():
    m = np.zeros((1, 16, 16))
    m[:, :8, :] = 1.0
    m[:, 8:12, :8] = 1.0
    z = latent_mask(m)
    np.testing.assert_array_equal(z, [[[1, 1], [1, 0]]])


def test_vpred_zero_cases(rng):
    v = rng.normal(size=(4, 8, 8))
    loss, g = masked_vpred_loss(v, v, half_mask())
    assert loss == 0 and np.all(g == 0)
    loss, g = masked_vpred_loss(v, v + 1, np.zeros((1, 64, 64)))
    assert loss == 0 and np.all(g == 0)
    with pytest.raises(ValueError):
        masked_vpred_loss(v, v[:2], half_mask())
    with pytest.raises(ValueError):
        masked_vpred_loss(v, v, half_mask(32, 32))


def test_vpred_gradient_fd(rng):
    m = half_mask()
    for _ in range(TRIALS):
        v, t = rng.normal(size=(2, 4, 8, 8))
        _, g = masked_vpred_loss(v, t, m)
        check_gradient(lambda x: masked_vpred_loss(x, t, m)[0], v, g, rng, 1e-3, 1e-4)


def test_ds_uniform_ball_flat_normals():
    c = 0.6
    _, mask = ball_geometry(32)
    ball = np.where(mask, c, 0.0)[None].repeat(3, 0)
    normals = np.zeros((3, 8, 8))
    normals[2] = 1.0
    loss, _ = diffuse_shading_loss(np.zeros((3, 8, 8)), normals, ball)
    assert loss == pytest.approx(c * c, rel=1e-6)
    d_calc = diffuse_target(normals, ball)
    assert diffuse_shading_loss(d_calc, normals, ball)[0] == 0.0


def test_ds_gradient_fd(rng):
    ball = render_gray_ball(smooth_env(1, 32, 16), 0.5, 32)
    for _ in range(TRIALS):
        n = rng.normal(size=(3, 8, 8))
        n /= np.linalg.norm(n, axis=0)
        d = rng.uniform(0, 2, size=(3, 8, 8))
        mask = (rng.random((1, 8, 8)) > 0.3).astype(float)
        for m in (None, mask):
            _, g = diffuse_shading_loss(d, n, ball, mask=m)
            check_gradient(lambda x: diffuse_shading_loss(x, n, ball, mask=m)[0], d, g, rng, 1e-3, 1e-4)


def test_ps_zero_cases(rng):
    a, d, s = rng.uniform(size=(3, 3, 8, 8))
    assert physical_shading_loss(a * d + s, a, d, s)[0] == pytest.approx(0.0, abs=1e-30)
    assert physical_shading_loss(s, np.zeros_like(a), d, s)[0] == 0.0
    with pytest.raises(ValueError):
        physical_shading_loss(a, a, d, s[:, :4])


def test_ps_gradients_fd(rng):
    names = ("i_relit", "albedo", "d_pred", "s_pred")
    for _ in range(TRIALS):
        args = list(rng.uniform(0, 1.5, size=(4, 3, 8, 8)))
        _, grads = physical_shading_loss(*args)
        np.testing.assert_allclose(grads["i_relit"] + grads["s_pred"], 0.0, atol=1e-15)
        for k, name in enumerate(names):
            def f(x, k=k):
                a = list(args)
                a[k] = x
                return physical_shading_loss(*a)[0]
            check_gradient(f, args[k], grads[name], rng, 1e-3, 1e-4)


def test_rec_identity_and_fd(rng):
    ext = EdgeStructureExtractor()
    img = rng.uniform(0.05, 1, size=(3, 16, 16))
    loss, g = reconstruction_loss(img, img, ext)
    assert loss == 0.0 and np.all(g == 0)
    for _ in range(TRIALS):
        a = rng.uniform(0.05, 1, size=(3, 16, 16))
        b = rng.uniform(0.05, 1, size=(3, 16, 16))
        _, g = reconstruction_loss(a, b, ext)
        check_gradient(lambda x: reconstruction_loss(x, b, ext)[0], a, g, rng, 1e-6, 1e-3)


def test_rec_extractor_failure_is_wrapped():
    class Broken:
        def features(self, image):
            raise ValueError("boom")

        def vjp(self, image, g):
            return g

    with pytest.raises(RuntimeError, match="boom"):
        reconstruction_loss(np.ones((3, 8, 8)), np.ones((3, 8, 8)), Broken())


def test_extractor_light_invariance_on_corpus():
    from pilight.imagecore import Rng
    from pilight.scenegen import generate_record, generate_scene
    sims = []
    for seed in range(6):
        rng = Rng(seed)
        recs = generate_record(generate_scene(rng, 3), 1, 2, rng, resolution=64)
        sims.append(feature_similarity(recs[0].input_image, recs[1].input_image))
    assert min(sims) > 0.9


def test_stage2_total_formula():
    w = LossWeights(1.0, 1.0, 1.0)
    ds = np.array([[0.1, 0.2], [0.3, 0.4]])
    ps = np.array([[0.5, 0.0], [0.25, 1.0]])
    l_ds, l_ps, l_rec, l_v = float(np.mean(ds ** 2)), float(np.mean(ps ** 2)), 0.07, 0.2
    rep = stage2_total(l_v, l_ds, l_ps, l_rec, w, 1)
    assert rep.total == pytest.approx(0.2 + 0.075 + 0.328125 + 0.07, abs=1e-7)
    assert stage2_total(l_v, 0, 0, 0, LossWeights(), 7).total == l_v
    a = stage2_total(l_v, l_ds, l_ps, l_rec, LossWeights(), 10)
    b = stage2_total(l_v, l_ds, l_ps, l_rec, LossWeights(), 20)
    assert (b.total - l_v) == pytest.approx((a.total - l_v) / 2, rel=1e-12)
    with pytest.raises(ValueError):
        stage2_total(l_v, l_ds, l_ps, l_rec, w, 0)
    with pytest.raises(KeyError):
        stage2_total(l_v, l_ds, l_ps, l_rec, w, 1, {"bogus": ds})
    assert set(rep.to_log(3)) == {"step", "t", "l_vpred", "l_ds", "l_ps", "l_rec", "total"}


def test_stage2_gradient_scaling(rng):
    g = rng.normal(size=(3, 4, 4))
    rep = stage2_total(0.0, 1.0, 1.0, 1.0, LossWeights(2.0, 3.0, 0.5), 4,
                       {"ds:d": g, "ps:i": g, "rec:i": g, "vpred:v": g})
    np.testing.assert_allclose(rep.gradients["ds:d"], g * 0.5)
    np.testing.assert_allclose(rep.gradients["ps:i"], g * 0.75)
    np.testing.assert_allclose(rep.gradients["rec:i"], g * 0.125)
    np.testing.assert_array_equal(rep.gradients["vpred:v"], g)


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(-1.0)
    with pytest.raises(ValueError):
        LossWeights(1.0, float("nan"))


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 5), st.integers(1, 1000))
def test_stage2_total_monotone(l_ds, l_ps, l_rec, bump, t):
    w = LossWeights()
    base = stage2_total(0.1, l_ds, l_ps, l_rec, w, t).total
    assert stage2_total(0.1, l_ds + bump, l_ps, l_rec, w, t).total >= base
    assert stage2_total(0.1, l_ds, l_ps + bump, l_rec, w, t).total >= base
    assert stage2_total(0.1, l_ds, l_ps, l_rec + bump, w, t).total >= base
    assert stage2_total(0.1 + bump, l_ds, l_ps, l_rec, w, t).total >= base


@given(st.integers(0, 10_000))
def test_losses_non_negative(seed):
    rng = np.random.default_rng(seed)
    a, b, c, d = rng.uniform(0, 1, size=(4, 3, 8, 8))
    assert physical_shading_loss(a, b, c, d)[0] >= 0
    assert masked_vpred_loss(a[:, :1, :1], b[:, :1, :1], np.ones((1, 8, 8)))[0] >= 0
    assert reconstruction_loss(a + 0.01, b + 0.01)[0] >= 0
