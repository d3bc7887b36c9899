import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from pilight.difftoy.autoencoder import (AutoencoderConfig, ToyAutoencoder, from_model,
                                         pretrain_autoencoder, to_model)
from pilight.difftoy.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from pilight.difftoy.data import (STAGE2_CONDITIONS, build_bank, record_images, relight_pairs,
                                  stack_conditions)
from pilight.difftoy.denoiser import (CrossBatchDenoiser, DenoiserConfig, cross_batch_attention,
                                      one_hot_labels, self_first_order)
from pilight.difftoy.diagnostics import decoder_receptive_radius, latent_mask_diagnostic
from pilight.difftoy.relight import (condition_images, input_mask, record_input, relight,
                                     slots_to_intrinsics)
from pilight.difftoy.sampling import ddim_sample, ddim_timesteps, denoise_step
from pilight.difftoy.schedule import NoiseSchedule, add_noise, predict_eps, predict_z0, v_target
from pilight.difftoy.train import (TrainConfig, load_autoencoder, load_denoiser, pair_latents,
                                   save_autoencoder, stage2_backward, stage2_cond, stage2_targets,
                                   train_stage1, train_stage2)
from pilight.losses import EdgeStructureExtractor, LossWeights, masked_vpred_loss
from pilight.scenegen import DatasetConfig, generate_dataset

from conftest import central_fd, rel_err

MICRO = TrainConfig(steps=2, batch=2, dim=16, blocks=1, heads=2, mlp_ratio=2)


@pytest.fixture(scope="module")
def records():
    cfg = DatasetConfig(n_scenes=3, n_views=1, n_lights=3, resolution=16, object_test=0, scene_test=1)
    return generate_dataset(cfg)


@pytest.fixture(scope="module")
def train_records(records):
    return [r for r in records if r.split == "train"]


@pytest.fixture(scope="module")
def ae(train_records):
    imgs = np.stack([record_images(r)["input"] for r in train_records])
    return pretrain_autoencoder(imgs, AutoencoderConfig(width=8, steps=20, batch=4))


@pytest.fixture(scope="module")
def bank(train_records, ae):
    return build_bank(train_records, ae)


# ---------------------------------------------------------------------------
# schedule

def test_schedule_z0_recovery_1000_triples():
    sch = NoiseSchedule()
    g = np.random.default_rng(0)
    t = g.integers(1, 1001, size=1000)
    z0 = g.normal(size=(1000, 4, 2, 2))
    eps = g.normal(size=(1000, 4, 2, 2))
    z_t = add_noise(z0, eps, t, sch)
    v = v_target(z0, eps, t, sch)
    assert np.abs(predict_z0(z_t, v, t, sch) - z0).max() < 1e-6
    assert np.abs(predict_eps(z_t, v, t, sch) - eps).max() < 1e-6


def test_schedule_bounds_and_torch():
    sch = NoiseSchedule()
    assert sch.alpha_bar[0] == pytest.approx(1 - 1e-4)
    assert np.all(np.diff(sch.alpha_bar) < 0)
    with pytest.raises(ValueError):
        sch.coefficients(0, np.zeros(1))
    with pytest.raises(ValueError):
        sch.coefficients(1001, np.zeros(1))
    z0, eps = torch.randn(3, 2, 2, 2, dtype=torch.float64), torch.randn(3, 2, 2, 2, dtype=torch.float64)
    t = torch.tensor([1, 500, 1000])
    z_t = add_noise(z0, eps, t, sch)
    torch.testing.assert_close(predict_z0(z_t, v_target(z0, eps, t, sch), t, sch), z0)


# ---------------------------------------------------------------------------
# attention and denoiser

def test_attention_hand_case():
    a, b = 0.7, -1.3
    x = torch.tensor([[[[a]], [[b]]]], dtype=torch.float64)  # (B=1, S=2, N=1, d=1)
    one = torch.ones(1, 1, dtype=torch.float64)
    out = cross_batch_attention(x, one, one, one)
    exp0 = (a * math.exp(a * a) + b * math.exp(a * b)) / (math.exp(a * a) + math.exp(a * b))
    exp1 = (b * math.exp(b * b) + a * math.exp(a * b)) / (math.exp(b * b) + math.exp(a * b))
    assert out[0, 0, 0, 0].item() == pytest.approx(exp0, abs=1e-12)
    assert out[0, 1, 0, 0].item() == pytest.approx(exp1, abs=1e-12)


def test_attention_errors():
    w = torch.eye(4)
    with pytest.raises(ValueError):
        cross_batch_attention([torch.randn(1, 3, 4), torch.randn(1, 5, 4)], w, w, w)
    with pytest.raises(ValueError):
        cross_batch_attention(torch.randn(1, 2, 3, 4), w, w, w, heads=3)
    assert self_first_order(3) == [[0, 1, 2], [1, 0, 2], [2, 0, 1]]


@given(st.integers(0, 10_000))
def test_attention_permutation_properties(seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 4, 5, 8, generator=g, dtype=torch.float64)
    wq, wk, wv = (torch.randn(8, 8, generator=g, dtype=torch.float64) for _ in range(3))
    base = cross_batch_attention(x, wq, wk, wv, heads=2)
    # slot 0 does not care how the other slots are ordered in its key sequence
    order = [[0, 3, 1, 2]] + self_first_order(4)[1:]
    other = cross_batch_attention(x, wq, wk, wv, heads=2, key_order=order)
    torch.testing.assert_close(other[:, 0], base[:, 0])
    perm = torch.randperm(4, generator=g)
    torch.testing.assert_close(cross_batch_attention(x[:, perm], wq, wk, wv, heads=2), base[:, perm])
    # the list form matches the stacked form
    torch.testing.assert_close(cross_batch_attention(list(x.unbind(1)), wq, wk, wv, heads=2), base)


def micro_model(seed=0, slots=3, cond=2):
    torch.manual_seed(seed)
    cfg = DenoiserConfig(n_slots=slots, n_labels=slots, latent_channels=2, cond_channels=cond,
                         n_tokens=8, dim=8, blocks=2, heads=2, mlp_ratio=2)
    return CrossBatchDenoiser(cfg).double()


def test_denoiser_equivariant_with_conditions_and_labels():
    m = micro_model()
    g = torch.Generator().manual_seed(3)
    z = torch.randn(2, 3, 2, 2, 4, generator=g, dtype=torch.float64)
    c = torch.randn(2, 3, 2, 2, 4, generator=g, dtype=torch.float64)
    t = torch.tensor([5, 900])
    labels = one_hot_labels(3).double()
    perm = torch.tensor([2, 0, 1])
    out = m(z, c, t, labels)
    torch.testing.assert_close(m(z[:, perm], c[:, perm], t, labels[perm]), out[:, perm])
    with pytest.raises(ValueError):
        m(z[:, :2], c[:, :2], t, labels[:2])


def test_denoiser_parameter_gradients_fd():
    m = micro_model(1)
    g = torch.Generator().manual_seed(4)
    z = torch.randn(2, 3, 2, 2, 4, generator=g, dtype=torch.float64)
    c = torch.randn(2, 3, 2, 2, 4, generator=g, dtype=torch.float64)
    target = np.random.default_rng(5).normal(size=(2, 3, 2, 2, 4))
    t = torch.tensor([10, 400])
    labels = one_hot_labels(3).double()
    mask = np.ones((2, 3, 1, 16, 32))

    def loss_of_model():
        return masked_vpred_loss(m(z, c, t, labels).detach().numpy(), target, mask)

    m.zero_grad()
    v = m(z, c, t, labels)
    _, grad = masked_vpred_loss(v.detach().numpy(), target, mask)
    v.backward(torch.from_numpy(grad))
    params = list(m.parameters())
    rng = np.random.default_rng(6)
    for _ in range(50):
        p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        fd = central_fd(lambda _a: loss_of_model()[0], p.data.numpy(), idx, 1e-6)
        assert rel_err(p.grad[idx].item(), fd, floor=1e-7) < 1e-3


# ---------------------------------------------------------------------------
# guidance and sampling

class CountingModel(torch.nn.Module):
    def __init__(self, inner):
        super().__init__()
        self.inner = inner
        self.cfg = inner.cfg
        self.calls = 0

    def forward(self, *args):
        self.calls += 1
        return self.inner(*args)


def test_cfg_one_is_single_conditional_pass():
    m = CountingModel(micro_model())
    z = torch.randn(1, 3, 2, 2, 4, dtype=torch.float64)
    c = torch.randn(1, 3, 2, 2, 4, dtype=torch.float64)
    t = torch.tensor([50])
    labels = one_hot_labels(3).double()
    with torch.no_grad():
        ref = m.inner(z, c, t, labels)
        out = denoise_step(m, z, c, t, labels, 1.0)
        assert m.calls == 1 and torch.equal(out, ref)
        guided = denoise_step(m, z, c, t, labels, 2.0)
        assert m.calls == 3
        unc = m.inner(z, torch.zeros_like(c), t, labels)
        torch.testing.assert_close(guided, unc + 2.0 * (ref - unc))
    with pytest.raises(ValueError):
        denoise_step(m, z, c, t, labels, 0.5)


def test_ddim_timesteps_and_determinism():
    ts = ddim_timesteps(20, 1000)
    assert ts[0] == 1000 and ts[-1] == 1 and len(ts) == 20 and all(a > b for a, b in zip(ts, ts[1:]))
    assert ddim_timesteps(1, 1000) == [1]
    with pytest.raises(ValueError):
        ddim_timesteps(0, 1000)
    m = micro_model().float()
    c = torch.randn(2, 3, 2, 2, 4)
    labels = one_hot_labels(3)
    a = ddim_sample(m, c, labels, NoiseSchedule(), steps=5, cfg_scale=1.5, seed=42)
    b = ddim_sample(m, c, labels, NoiseSchedule(), steps=5, cfg_scale=1.5, seed=42)
    assert torch.equal(a, b) and a.shape == (2, 3, 2, 2, 4)
    assert not torch.equal(a, ddim_sample(m, c, labels, NoiseSchedule(), steps=5, seed=7))
    assert torch.isfinite(ddim_sample(m, c, labels, NoiseSchedule(), steps=1)).all()


# ---------------------------------------------------------------------------
# autoencoder, data and checkpoints

def test_autoencoder_shapes_and_domain(ae):
    x = to_model(np.full((1, 3, 16, 24), 2.0))
    assert x.max().item() == 1.0
    z = ae.encode(x)
    assert z.shape == (1, 4, 2, 3)
    assert ae.decode(z).shape == (1, 3, 16, 24)
    torch.testing.assert_close(from_model(to_model(np.full((1, 3, 8, 8), 0.25))), torch.full((1, 3, 8, 8), 0.25))
    with pytest.raises(ValueError):
        ae.encode(torch.zeros(1, 3, 12, 16))
    with pytest.raises(ValueError):
        pretrain_autoencoder(np.zeros((0, 3, 8, 8)))


def test_condition_layout(bank):
    src, tgt = bank[0], bank[1]
    lat = pair_latents(src, tgt)
    assert torch.equal(lat["ball"], tgt.latents["ball"])
    cond = stage2_cond(lat)
    c = src.latents["input"].shape[0]
    assert cond.shape[:2] == (3, 5 * c)
    # the relit slot carries input then albedo, then zero padding
    assert torch.equal(cond[0, :c], src.latents["input"])
    assert torch.equal(cond[0, c:2 * c], src.latents["albedo"])
    assert torch.all(cond[0, 2 * c:] == 0)
    assert len(STAGE2_CONDITIONS["specular"]) == 5
    assert stage2_cond(lat, decomposed=False).shape[:2] == (1, 7 * c)
    assert stage2_targets(tgt.latents, decomposed=False).shape[0] == 1
    padded = stack_conditions([src.latents["input"]], 3)
    assert padded.shape[0] == 3 * c and torch.all(padded[c:] == 0)


def test_relight_pairs_share_scene_and_view(train_records):
    pairs = relight_pairs(train_records)
    assert pairs and all(a != b for a, b in pairs)
    for a, b in pairs:
        ra, rb = train_records[a], train_records[b]
        assert (ra.scene_id, ra.view) == (rb.scene_id, rb.view) and ra.light != rb.light


def test_checkpoint_round_trip(tmp_path):
    state = {"b": torch.arange(6.0).reshape(2, 3), "a": torch.tensor(1.5)}
    save_checkpoint(tmp_path / "x.ckpt", "demo", {"k": 1}, state)
    kind, cfg, back = load_checkpoint(tmp_path / "x.ckpt")
    assert kind == "demo" and cfg == {"k": 1}
    assert all(torch.equal(state[k], back[k]) for k in state)
    save_checkpoint(tmp_path / "y.ckpt", "demo", {"k": 1}, state)
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_autoencoder_checkpoint(tmp_path, ae):
    save_autoencoder(tmp_path / "ae.ckpt", ae)
    back = load_autoencoder(tmp_path / "ae.ckpt")
    x = to_model(np.random.default_rng(0).random((1, 3, 16, 16)))
    with torch.no_grad():
        torch.testing.assert_close(back(x), ae(x))
    with pytest.raises(ValueError):
        load_denoiser(tmp_path / "ae.ckpt")


# ---------------------------------------------------------------------------
# training

def test_stage1_determinism(tmp_path, train_records, ae, bank):
    a = train_stage1(train_records, ae, MICRO, bank=bank, log_path=tmp_path / "a.jsonl")
    b = train_stage1(train_records, ae, MICRO, bank=bank, log_path=tmp_path / "b.jsonl")
    assert a.log == b.log
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    a.save(tmp_path / "a.ckpt")
    b.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    back = load_denoiser(tmp_path / "a.ckpt")
    assert back.kind == "stage1" and back.model.cfg == a.model.cfg
    with pytest.raises(ValueError):
        train_stage1([], ae, MICRO)


def test_stage2_zero_weights_degenerate_bitwise(train_records, ae, bank):
    zero = LossWeights(0.0, 0.0, 0.0)
    plain = train_stage2(train_records, ae, zero, MICRO, bank=bank, physics=False)
    routed = train_stage2(train_records, ae, zero, MICRO, bank=bank, physics=True)
    assert [e["l_vpred"] for e in plain.log] == [e["l_vpred"] for e in routed.log]
    assert [e["total"] for e in plain.log] == [e["total"] for e in routed.log]
    sa, sb = plain.model.state_dict(), routed.model.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    full = train_stage2(train_records, ae, LossWeights(), MICRO, bank=bank)
    assert full.config["physics"] and full.log[0]["l_ps"] > 0
    with pytest.raises(ValueError):
        train_stage2(train_records, ae, LossWeights(), MICRO, bank=bank, decomposed=False, physics=True)
    base = train_stage2(train_records, ae, zero, MICRO, bank=bank, decomposed=False)
    assert base.model.cfg.n_slots == 1


def test_stage2_gradients_through_decoder_fd(ae, bank):
    """Parameter gradients of the full stage-2 objective (V-pred plus decoded physics terms)."""
    torch.manual_seed(2)
    model = CrossBatchDenoiser(DenoiserConfig(n_slots=3, n_labels=3, latent_channels=4, cond_channels=20,
                                              n_tokens=4, dim=8, blocks=2, heads=2)).double()
    dae = ToyAutoencoder(ae.width, ae.latent_channels)
    dae.load_state_dict(ae.state_dict())
    dae = dae.double()
    for p in dae.parameters():
        p.requires_grad_(False)
    chosen = [(bank[0], bank[1]), (bank[2], bank[0])]
    z0 = torch.stack([stage2_targets(tgt.latents) for _, tgt in chosen]).double()
    cond = torch.stack([stage2_cond(pair_latents(s, t)) for s, t in chosen]).double()
    g = torch.Generator().manual_seed(0)
    eps = torch.randn(z0.shape, generator=g, dtype=torch.float64)
    t = torch.tensor([2, 5])
    sch = NoiseSchedule()
    z_t, vt = add_noise(z0, eps, t, sch), v_target(z0, eps, t, sch)
    labels = one_hot_labels(3).double()
    weights, ext = LossWeights(), EdgeStructureExtractor()

    def objective():
        model.zero_grad()
        parts, totals = stage2_backward(model, dae, z_t, cond, t, labels, vt, chosen, weights, sch, ext, True)
        return float(np.mean(totals)), parts

    _, parts = objective()
    assert parts[1] > 0 and parts[2] > 0 and parts[3] > 0
    grads = {id(p): p.grad.clone() for p in model.parameters()}
    params = list(model.parameters())
    rng = np.random.default_rng(9)
    for _ in range(50):
        p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        fd = central_fd(lambda _a: objective()[0], p.data.numpy(), idx, 1e-6)
        assert rel_err(grads[id(p)][idx].item(), fd, floor=1e-7) < 1e-3


# ---------------------------------------------------------------------------
# inference plumbing

def test_relight_plumbing(records, ae, bank, train_records):
    res = train_stage2(train_records, ae, LossWeights(), MICRO, bank=bank)
    rec = records[-1]
    ball = records[-2].light_condition
    out = relight(res.model, ae, record_input(rec), rec.intrinsics, ball, steps=1)
    assert out.composed.shape == (3, 16, 16)
    assert all(np.isfinite(x).all() for x in (out.diffuse, out.specular, out.composed))
    again = relight(res.model, ae, record_input(rec), rec.intrinsics, ball, steps=1)
    assert np.array_equal(out.composed, again.composed)
    with pytest.raises(ValueError):
        relight(None, ae, record_input(rec), rec.intrinsics, ball)
    imgs = condition_images(record_input(rec), rec.intrinsics, ball)
    assert set(imgs) == {"input", "albedo", "normal", "roughness", "metallic", "mask", "ball"}


def test_slots_to_intrinsics_uses_input_mask(records):
    rec = records[0]
    img = record_input(rec)
    m = input_mask(img)
    pix = np.random.default_rng(0).random((4, 3, 16, 16))
    intr = slots_to_intrinsics(pix, m)
    assert np.all(intr.albedo[:, m[0] == 0] == 0) and np.all(intr.normals[:, m[0] == 0] == 0)
    assert intr.roughness.shape == (1, 16, 16)


# ---------------------------------------------------------------------------
# latent masking diagnostic

def test_diagnostic_trivial_masks(ae, records):
    img = record_input(records[0])
    ones = latent_mask_diagnostic(ae, img, np.ones((1, 16, 16)))
    with torch.no_grad():
        plain = from_model(ae(to_model(img[None])))[0].clamp(0, 1).numpy()
    assert not ones.degenerate and ones.kept_pixels == 256
    assert ones.kept_error == pytest.approx(float(np.abs(plain - img).mean()), rel=1e-6)
    assert ones.boundary_error == 0.0
    zeros = latent_mask_diagnostic(ae, img, np.zeros((1, 16, 16)))
    assert zeros.degenerate and zeros.kept_pixels == 0 and not zeros.misaligned
    assert decoder_receptive_radius(ae) >= 1
    assert set(ones.to_dict()) >= {"interior_error", "boundary_error", "misaligned"}
