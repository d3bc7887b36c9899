"""Stage-1 (intrinsics) and stage-2 (relighting) training loops.

Loss values and gradients with respect to predictions come from
:mod:`pilight.losses`; they are injected into the torch graph with
``backward(grad)``, so the analytic gradients are exactly what trains the
network.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from ..lighting import GRAY_ALBEDO
from ..losses import (LossWeights, diffuse_shading_loss, masked_vpred_loss, physical_shading_loss,
                      reconstruction_loss, stage2_total, EdgeStructureExtractor)
from ..scenegen import DatasetRecord
from .autoencoder import ToyAutoencoder, autoencoder_config_dict, build_autoencoder, from_model
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (DIFFUSE_RANGE, NO_DECOMP_CONDITIONS, STAGE1_SLOTS, STAGE2_CONDITIONS,
                   STAGE2_SLOTS, RecordTensors, build_bank, relight_pairs, stack_conditions)
from .denoiser import CrossBatchDenoiser, DenoiserConfig, one_hot_labels
from .schedule import NoiseSchedule, add_noise, predict_z0, v_target

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 4
    lr: float = 3e-4
    lr_final: float = 3e-5
    seed: int = 42
    cond_dropout: float = 0.1
    dim: int = 128
    blocks: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    T: int = 1000

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class TrainResult:
    model: CrossBatchDenoiser
    kind: str
    config: dict
    log: List[dict] = field(default_factory=list, repr=False)

    def save(self, path):
        save_checkpoint(path, self.kind, self.config, self.model.state_dict())


# ---------------------------------------------------------------------------
# slot layouts

def stage1_slots(lat: Dict[str, torch.Tensor]):
    """Targets ``(4, C, h, w)`` and conditions ``(4, C, h, w)`` (the encoded input per slot)."""
    z0 = torch.stack([lat[n] for n in STAGE1_SLOTS]) if all(n in lat for n in STAGE1_SLOTS) else None
    cond = lat["input"][None].expand(len(STAGE1_SLOTS), -1, -1, -1)
    return z0, cond


def stage2_cond(lat: Dict[str, torch.Tensor], decomposed: bool = True) -> torch.Tensor:
    """Per-slot conditions; ``lat["ball"]`` is the *target* lighting."""
    if not decomposed:
        return stack_conditions([lat[n] for n in NO_DECOMP_CONDITIONS], len(NO_DECOMP_CONDITIONS))[None]
    n_max = max(len(v) for v in STAGE2_CONDITIONS.values())
    return torch.stack([stack_conditions([lat[n] for n in STAGE2_CONDITIONS[s]], n_max)
                        for s in STAGE2_SLOTS])


def stage2_targets(tgt: Dict[str, torch.Tensor], decomposed: bool = True) -> torch.Tensor:
    z = [tgt["input"], tgt["diffuse"], tgt["specular"]]
    return torch.stack(z if decomposed else z[:1])


def pair_latents(src: RecordTensors, tgt: RecordTensors) -> Dict[str, torch.Tensor]:
    lat = dict(src.latents)
    lat["ball"] = tgt.latents["ball"]
    return lat


def stage1_denoiser_config(cfg: TrainConfig, latent_channels: int, n_tokens: int = 64) -> DenoiserConfig:
    return DenoiserConfig(n_slots=4, n_labels=4, latent_channels=latent_channels,
                          cond_channels=latent_channels, n_tokens=n_tokens, dim=cfg.dim, blocks=cfg.blocks,
                          heads=cfg.heads, mlp_ratio=cfg.mlp_ratio)


def stage2_denoiser_config(cfg: TrainConfig, latent_channels: int, decomposed: bool,
                           n_tokens: int = 64) -> DenoiserConfig:
    n_cond = max(len(v) for v in STAGE2_CONDITIONS.values()) if decomposed else len(NO_DECOMP_CONDITIONS)
    slots = len(STAGE2_SLOTS) if decomposed else 1
    return DenoiserConfig(n_slots=slots, n_labels=slots, latent_channels=latent_channels,
                          cond_channels=n_cond * latent_channels, n_tokens=n_tokens,
                          dim=cfg.dim, blocks=cfg.blocks,
                          heads=cfg.heads, mlp_ratio=cfg.mlp_ratio)


# ---------------------------------------------------------------------------
# loops

class _Logger:
    def __init__(self, path):
        self.entries: List[dict] = []
        self.f = open(path, "w") if path else None

    def __call__(self, entry: dict):
        self.entries.append(entry)
        if self.f:
            self.f.write(json.dumps(entry, sort_keys=True) + "\n")

    def close(self):
        if self.f:
            self.f.close()


def _optimizer(model, cfg: TrainConfig):
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(cfg.steps, 1), eta_min=cfg.lr_final)
    return opt, sched


def _draw(gen, n_items: int, shape, cfg: TrainConfig):
    b = cfg.batch
    idx = torch.randint(0, n_items, (b,), generator=gen)
    t = torch.randint(1, cfg.T + 1, (b,), generator=gen)
    eps = torch.randn(shape, generator=gen)
    keep = (torch.rand(b, generator=gen) >= cfg.cond_dropout).float()
    return idx, t, eps, keep


def _bank(records, ae, bank):
    if bank is None:
        if not records:
            raise ValueError("empty dataset")
        bank = build_bank(records, ae)
    if not bank:
        raise ValueError("empty dataset")
    return bank


def _n_tokens(bank) -> int:
    h, w = bank[0].latents["input"].shape[-2:]
    return int(h * w)


def train_stage1(records: Sequence[DatasetRecord], ae: ToyAutoencoder,
                 cfg: TrainConfig = TrainConfig(), bank: Optional[List[RecordTensors]] = None,
                 log_path=None) -> TrainResult:
    """Jointly denoise albedo, normal, roughness and metallic latents of each record."""
    bank = _bank(records, ae, bank)
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    schedule = NoiseSchedule(cfg.T)
    dcfg = stage1_denoiser_config(cfg, ae.latent_channels, _n_tokens(bank))
    model = CrossBatchDenoiser(dcfg)
    labels = one_hot_labels(4)
    opt, sched = _optimizer(model, cfg)
    logger = _Logger(log_path)
    z_shape = (cfg.batch, 4) + tuple(bank[0].latents["albedo"].shape)
    for step in range(cfg.steps):
        idx, t, eps, keep = _draw(gen, len(bank), z_shape, cfg)
        pairs = [stage1_slots(bank[i].latents) for i in idx.tolist()]
        z0 = torch.stack([p[0] for p in pairs])
        cond = torch.stack([p[1] for p in pairs]) * keep[:, None, None, None, None]
        mask = np.stack([bank[i].mask for i in idx.tolist()])[:, None]
        z_t = add_noise(z0, eps, t, schedule)
        vt = v_target(z0, eps, t, schedule)
        v_hat = model(z_t, cond, t, labels)
        loss, grad = masked_vpred_loss(v_hat.detach().double().numpy(), vt.double().numpy(), mask)
        opt.zero_grad()
        v_hat.backward(torch.from_numpy(grad).to(v_hat.dtype))
        opt.step()
        sched.step()
        logger({"step": step, "t": t.tolist(), "l_vpred": loss, "l_ds": 0.0, "l_ps": 0.0,
                "l_rec": 0.0, "total": loss})
        if step % 250 == 0:
            log.info("stage1 step %d loss %.4f", step, loss)
    logger.close()
    config = {"train": asdict(cfg), "denoiser": dcfg.to_dict(), "stage": 1}
    return TrainResult(model.eval(), "stage1", config, logger.entries)


def stage2_backward(model, ae, z_t, cond, t, labels, vt, chosen, weights: LossWeights,
                    schedule: NoiseSchedule, extractor, physics: bool):
    """Forward one stage-2 batch and accumulate parameter gradients of the mean total.

    ``chosen`` holds ``(source, target)`` :class:`RecordTensors` per sample.
    Returns the batch-mean ``(l_vpred, l_ds, l_ps, l_rec)`` and per-sample totals.
    """
    b = z_t.shape[0]
    v_hat = model(z_t, cond, t, labels)
    v_np, vt_np = v_hat.detach().double().numpy(), vt.double().numpy()
    ones = np.ones((1,) + chosen[0][1].mask.shape[1:])
    g_v = np.zeros_like(v_np)
    if physics:
        z0_hat = predict_z0(z_t, v_hat, t, schedule)
        y = ae.decode(z0_hat.reshape((-1,) + z0_hat.shape[2:]))
        pix = from_model(y).detach().double().numpy().reshape((b, 3) + y.shape[1:])
        g_pix = np.zeros_like(pix)
    totals, parts = [], np.zeros(4)
    for k, (src, tgt) in enumerate(chosen):
        l_v, g = masked_vpred_loss(v_np[k], vt_np[k], ones)
        g_v[k] = g / b
        l_ds = l_ps = l_rec = 0.0
        if physics:
            i_hat, d_hat, s_hat = pix[k, 0], DIFFUSE_RANGE * pix[k, 1], pix[k, 2]
            l_ds, g_ds = diffuse_shading_loss(d_hat, tgt.normals, None, mask=tgt.mask,
                                              d_calc=tgt.d_calc)
            l_ps, g_ps = physical_shading_loss(i_hat, tgt.images["albedo"], d_hat, s_hat)
            l_rec, g_rec = reconstruction_loss(i_hat, src.images["input"], extractor)
            rep = stage2_total(l_v, l_ds, l_ps, l_rec, weights, int(t[k]), {
                "ds:d": g_ds, "ps:i": g_ps["i_relit"], "ps:d": g_ps["d_pred"],
                "ps:s": g_ps["s_pred"], "rec:i": g_rec})
            gr = rep.gradients
            g_pix[k, 0] = gr["ps:i"] + gr["rec:i"]
            g_pix[k, 1] = DIFFUSE_RANGE * (gr["ds:d"] + gr["ps:d"])
            g_pix[k, 2] = gr["ps:s"]
        else:
            rep = stage2_total(l_v, 0.0, 0.0, 0.0, weights, int(t[k]))
        totals.append(rep.total)
        parts += (l_v, l_ds, l_ps, l_rec)
    roots, grads = [v_hat], [torch.from_numpy(g_v).to(v_hat.dtype)]
    if physics:
        roots.append(y)
        # d pixel / d y = 1/2, and the batch mean contributes 1/b
        grads.append(torch.from_numpy(0.5 * g_pix.reshape((-1,) + y.shape[1:]) / b).to(y.dtype))
    torch.autograd.backward(roots, grads)
    return parts / b, totals


def train_stage2(records: Sequence[DatasetRecord], ae: ToyAutoencoder,
                 weights: LossWeights = LossWeights(), cfg: TrainConfig = TrainConfig(),
                 decomposed: bool = True, physics: Optional[bool] = None,
                 bank: Optional[List[RecordTensors]] = None, log_path=None,
                 extractor=None) -> TrainResult:
    """Relighting with relit/diffuse/specular slots and the 1/t-weighted physics losses.

    Trains on ground-truth intrinsics.  ``physics`` defaults to "any weight is
    positive"; with ``physics=True`` and zero weights the decode path runs but
    contributes exactly zero gradient.  ``decomposed=False`` is the single-slot
    baseline conditioned on all inputs at once (V-prediction only).
    """
    bank = _bank(records, ae, bank)
    pairs = relight_pairs(records)
    if not pairs:
        raise ValueError("dataset has no relighting pairs")
    if physics is None:
        physics = decomposed and (weights.lambda1 > 0 or weights.lambda2 > 0 or weights.lambda3 > 0)
    if physics and not decomposed:
        raise ValueError("physics losses need the decomposed (3-slot) model")
    extractor = extractor or EdgeStructureExtractor()
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    schedule = NoiseSchedule(cfg.T)
    dcfg = stage2_denoiser_config(cfg, ae.latent_channels, decomposed, _n_tokens(bank))
    model = CrossBatchDenoiser(dcfg)
    labels = one_hot_labels(dcfg.n_slots)
    opt, sched = _optimizer(model, cfg)
    logger = _Logger(log_path)
    z_shape = (cfg.batch, dcfg.n_slots) + tuple(bank[0].latents["input"].shape)
    for step in range(cfg.steps):
        idx, t, eps, keep = _draw(gen, len(pairs), z_shape, cfg)
        chosen = [(bank[p], bank[q]) for p, q in (pairs[i] for i in idx.tolist())]
        z0 = torch.stack([stage2_targets(tgt.latents, decomposed) for _, tgt in chosen])
        cond = torch.stack([stage2_cond(pair_latents(src, tgt), decomposed) for src, tgt in chosen])
        cond = cond * keep[:, None, None, None, None]
        z_t = add_noise(z0, eps, t, schedule)
        vt = v_target(z0, eps, t, schedule)
        opt.zero_grad()
        parts, totals = stage2_backward(model, ae, z_t, cond, t, labels, vt, chosen, weights,
                                        schedule, extractor, physics)
        opt.step()
        sched.step()
        logger({"step": step, "t": t.tolist(), "l_vpred": parts[0], "l_ds": parts[1],
                "l_ps": parts[2], "l_rec": parts[3], "total": float(np.mean(totals))})
        if step % 250 == 0:
            log.info("stage2 step %d total %.4f", step, float(np.mean(totals)))
    logger.close()
    config = {"train": asdict(cfg), "denoiser": dcfg.to_dict(), "stage": 2,
              "decomposed": decomposed, "weights": asdict(weights), "physics": bool(physics),
              "albedo_scale": GRAY_ALBEDO}
    return TrainResult(model.eval(), "stage2", config, logger.entries)


def load_denoiser(path) -> TrainResult:
    kind, config, state = load_checkpoint(path)
    if kind not in ("stage1", "stage2"):
        raise ValueError(f"{path}: expected a denoiser checkpoint, got {kind!r}")
    model = CrossBatchDenoiser(DenoiserConfig(**config["denoiser"]))
    model.load_state_dict(state)
    return TrainResult(model.eval(), kind, config)


def save_autoencoder(path, ae: ToyAutoencoder, config: Optional[dict] = None):
    save_checkpoint(path, "autoencoder", {**(config or {}), **autoencoder_config_dict(ae)},
                    ae.state_dict())


def load_autoencoder(path) -> ToyAutoencoder:
    kind, config, state = load_checkpoint(path)
    if kind != "autoencoder":
        raise ValueError(f"{path}: expected an autoencoder checkpoint, got {kind!r}")
    ae = build_autoencoder(config)
    ae.load_state_dict(state)
    return ae


def write_log(entries: Sequence[dict], path):
    Path(path).write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in entries))
