"""``pilight gen|train|relight|eval|ablate --config FILE [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 trend-assertion failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .difftoy.checkpoint import CheckpointError
from .imagecore import decode_normals, read_pfm, read_png, write_pfm, write_png
from .losses import LossWeights
from .scenegen import DatasetConfig, DatasetError
from .shading import IntrinsicSet

log = logging.getLogger("pilight")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TREND = 0, 1, 2, 3
COMMANDS = ("gen", "train", "relight", "eval", "ablate")
VARIANTS = ("none", "decomposition", "ds", "full")


class UsageError(Exception):
    pass


class TrendFailure(Exception):
    def __init__(self, message: str, report: dict):
        super().__init__(message)
        self.report = report


# ---------------------------------------------------------------------------
# config

@dataclass
class AutoencoderSection:
    width: int = 32
    steps: int = 1500
    batch: int = 16
    lr: float = 1e-3


@dataclass
class TrainSection:
    steps: int = 2000
    batch: int = 4
    lr: float = 3e-4
    lr_final: float = 3e-5
    cond_dropout: float = 0.1
    dim: int = 128
    blocks: int = 4
    heads: int = 4
    mlp_ratio: int = 2


@dataclass
class EvalSection:
    split: str = "scene_test"
    cfg_stage1: float = 1.0
    cfg_stage2: float = 1.5
    sample_steps: int = 20
    limit: int = 48
    cfg_sweep: List[float] = field(default_factory=lambda: [1.0, 1.5, 2.0, 2.5])


@dataclass
class RunConfig:
    seed: int = 42
    out: str = "pilight_run"
    threads: int = 1
    dataset_dir: str = ""
    stage: int = 1
    variant: str = "full"
    autoencoder_ckpt: str = ""
    stage1_ckpt: str = ""
    stage2_ckpt: str = ""
    input: str = ""
    ball: str = ""
    intrinsics: str = ""
    data: DatasetConfig = field(default_factory=DatasetConfig)
    autoencoder: AutoencoderSection = field(default_factory=AutoencoderSection)
    stage1: TrainSection = field(default_factory=TrainSection)
    stage2: TrainSection = field(default_factory=TrainSection)
    weights: LossWeights = field(default_factory=LossWeights)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d)

    def path(self, name: str) -> Path:
        return Path(self.out) / name

    @property
    def dataset_path(self) -> Path:
        return Path(self.dataset_dir) if self.dataset_dir else self.path("dataset")

    def ckpt(self, which: str) -> Path:
        explicit = getattr(self, f"{which}_ckpt")
        return Path(explicit) if explicit else self.path(f"{which}.ckpt")


def _build(cls, d: dict):
    if not isinstance(d, dict):
        raise UsageError(f"config section for {cls.__name__} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise UsageError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if default is not None and is_dataclass(default):
            value = _build(type(default), value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from exc


def load_config(path: Optional[str]) -> RunConfig:
    if not path:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(data)


def resolve(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    for name in ("stage", "variant", "input", "ball", "intrinsics", "dataset_dir",
                 "autoencoder_ckpt", "stage1_ckpt", "stage2_ckpt"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if getattr(args, "split", None):
        cfg.eval.split = args.split
    if getattr(args, "steps", None) is not None:
        cfg.stage1.steps = cfg.stage2.steps = args.steps
    env = os.environ.get("PILIGHT_THREADS")
    if env:
        try:
            cfg.threads = max(1, min(cfg.threads, int(env)))
        except ValueError as exc:
            raise UsageError(f"PILIGHT_THREADS must be an integer, got {env!r}") from exc
    if cfg.variant not in VARIANTS:
        raise UsageError(f"variant must be one of {VARIANTS}, got {cfg.variant!r}")
    if cfg.stage not in (0, 1, 2):
        raise UsageError(f"stage must be 0 (autoencoder), 1 or 2, got {cfg.stage}")
    return cfg


def write_resolved(cfg: RunConfig, command: str, argv: Sequence[str]):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "argv": list(argv), "config": cfg.to_dict()}
    (out / f"{command}_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _set_threads(n: int):
    import torch
    torch.set_num_threads(n)


# ---------------------------------------------------------------------------
# shared helpers

def _seeded_data(cfg: RunConfig) -> DatasetConfig:
    d = asdict(cfg.data)
    d["seed"] = cfg.seed
    return DatasetConfig(**d)


def _train_config(cfg: RunConfig, section: TrainSection):
    from .difftoy.train import TrainConfig
    return TrainConfig(seed=cfg.seed, **asdict(section))


def _load_records(cfg: RunConfig, splits=None):
    from .scenegen import read_dataset
    return read_dataset(cfg.dataset_path, splits)


def _autoencoder(cfg: RunConfig, train_records=None):
    """Load the autoencoder checkpoint, training and saving it first if absent."""
    from .difftoy.autoencoder import AutoencoderConfig, pretrain_autoencoder
    from .difftoy.data import autoencoder_corpus
    from .difftoy.train import load_autoencoder, save_autoencoder
    path = cfg.ckpt("autoencoder")
    if path.exists():
        return load_autoencoder(path)
    if cfg.autoencoder_ckpt:
        raise FileNotFoundError(f"autoencoder checkpoint not found: {path}")
    records = train_records if train_records is not None else _load_records(cfg, ["train"])
    ae_cfg = AutoencoderConfig(seed=cfg.seed, **asdict(cfg.autoencoder))
    ae = pretrain_autoencoder(autoencoder_corpus(records), ae_cfg)
    save_autoencoder(path, ae, asdict(ae_cfg))
    log.info("autoencoder saved to %s", path)
    return ae


def _variant_args(variant: str, weights: LossWeights):
    if variant == "none":
        return {"decomposed": False, "weights": LossWeights(0.0, 0.0, 0.0)}
    if variant == "decomposition":
        return {"decomposed": True, "weights": LossWeights(0.0, 0.0, 0.0)}
    if variant == "ds":
        return {"decomposed": True, "weights": LossWeights(weights.lambda1, 0.0, 0.0)}
    return {"decomposed": True, "weights": weights}


def _eval_pairs(records, limit: int):
    from .difftoy.data import relight_pairs
    pairs = relight_pairs(records)
    if not pairs:
        return []
    stride = max(1, len(pairs) // max(limit, 1))
    return pairs[::stride][:limit]


def _eval_records(records, limit: int):
    stride = max(1, len(records) // max(limit, 1))
    return list(records)[::stride][:limit]


def relight_scores(model, ae, records, cfg: RunConfig, intrinsics=None):
    """Per-pair relight PSNR and SSIM on held-out pairs (ground-truth intrinsics by default)."""
    from .difftoy.relight import condition_images, sample_stage2, record_input
    from .imagecore import psnr, ssim
    pairs = _eval_pairs(records, cfg.eval.limit)
    conds = []
    for a, b in pairs:
        intr = intrinsics[a] if intrinsics is not None else records[a].intrinsics
        conds.append(condition_images(record_input(records[a]), intr, records[b].light_condition))
    pix = sample_stage2(model, ae, conds, cfg.eval.cfg_stage2, cfg.eval.sample_steps, cfg.seed)
    gts = [record_input(records[b]) for _, b in pairs]
    return ([psnr(pix[i, 0], g) for i, g in enumerate(gts)],
            [ssim(pix[i, 0], g) for i, g in enumerate(gts)])


def stage1_predictions(model, ae, records, cfg: RunConfig, cfg_scale: float):
    from .difftoy.relight import input_mask, record_input, sample_stage1, slots_to_intrinsics
    images = np.stack([record_input(r) for r in records])
    pix = sample_stage1(model, ae, images, cfg_scale, cfg.eval.sample_steps, cfg.seed)
    return [slots_to_intrinsics(p, input_mask(img)) for p, img in zip(pix, images)]


# ---------------------------------------------------------------------------
# commands

def cmd_gen(cfg: RunConfig) -> dict:
    from .scenegen import generate_dataset, write_dataset
    records = generate_dataset(_seeded_data(cfg), workers=cfg.threads)
    manifest = write_dataset(records, cfg.dataset_path)
    log.info("wrote %d records to %s", len(records), cfg.dataset_path)
    return {"records": len(records), "dataset": str(cfg.dataset_path), "count": manifest["count"]}


def cmd_train(cfg: RunConfig, stage: int) -> dict:
    from .difftoy.data import build_bank
    from .difftoy.train import train_stage1, train_stage2
    train = _load_records(cfg, ["train"])
    if not train:
        raise DatasetError("training split is empty")
    ae = _autoencoder(cfg, train)
    if stage == 0:
        return {"checkpoint": str(cfg.ckpt("autoencoder"))}
    bank = build_bank(train, ae)
    if stage == 1:
        res = train_stage1(train, ae, _train_config(cfg, cfg.stage1), bank=bank,
                           log_path=cfg.path("stage1_log.jsonl"))
        path = cfg.ckpt("stage1")
    else:
        res = train_stage2(train, ae, cfg=_train_config(cfg, cfg.stage2), bank=bank,
                           log_path=cfg.path("stage2_log.jsonl"), **_variant_args(cfg.variant, cfg.weights))
        res.config["variant"] = cfg.variant
        path = cfg.ckpt("stage2")
    res.save(path)
    return {"checkpoint": str(path), "final_loss": res.log[-1].get("total", res.log[-1]["l_vpred"])
            if res.log else None}


def _read_image(path: str) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"image not found: {p}")
    img = read_pfm(p) if p.suffix.lower() == ".pfm" else read_png(p)
    return img if img.shape[0] == 3 else np.repeat(img[:1], 3, axis=0)


def _read_intrinsics(root: str) -> IntrinsicSet:
    d = Path(root)
    one = lambda name: read_png(d / name)[:1]  # noqa: E731
    mask = one("mask.png")
    return IntrinsicSet(albedo=read_png(d / "albedo.png")[:3],
                        normals=decode_normals(read_pfm(d / "normal.pfm")) * mask,
                        roughness=one("roughness.png"), metallic=one("metallic.png"), mask=mask)


def cmd_relight(cfg: RunConfig) -> dict:
    from .difftoy.relight import predict_intrinsics, relight
    from .difftoy.train import load_autoencoder, load_denoiser
    if not cfg.input or not cfg.ball:
        raise UsageError("relight needs --input and --ball")
    ae = load_autoencoder(cfg.ckpt("autoencoder"))
    image = np.clip(_read_image(cfg.input), 0.0, 1.0)
    ball = _read_image(cfg.ball)
    if cfg.intrinsics:
        intr = _read_intrinsics(cfg.intrinsics)
    else:
        s1 = load_denoiser(cfg.ckpt("stage1")).model
        intr = predict_intrinsics(s1, ae, image, cfg.eval.cfg_stage1, cfg.eval.sample_steps, cfg.seed)
    s2 = load_denoiser(cfg.ckpt("stage2")).model
    res = relight(s2, ae, image, intr, ball, cfg.eval.cfg_stage2, cfg.eval.sample_steps, cfg.seed)
    out = Path(cfg.out)
    write_png(out / "relit.png", np.clip(res.composed, 0, 1))
    write_pfm(out / "relit.pfm", res.composed)
    write_pfm(out / "diffuse.pfm", res.diffuse)
    write_pfm(out / "specular.pfm", res.specular)
    return {"outputs": ["relit.png", "relit.pfm", "diffuse.pfm", "specular.pfm"],
            "intrinsics": "given" if cfg.intrinsics else "stage1"}


def cmd_eval(cfg: RunConfig) -> dict:
    from .difftoy.train import load_autoencoder, load_denoiser
    from .evaluate import MetricTable, constant_albedo_baseline, random_normal_baseline, score_intrinsics
    split = cfg.eval.split
    records = _load_records(cfg, [split])
    if not records:
        raise DatasetError(f"split {split!r} has no records")
    train = _load_records(cfg, ["train"])
    ae = load_autoencoder(cfg.ckpt("autoencoder"))
    table = MetricTable()
    subset = _eval_records(records, cfg.eval.limit)
    table.add("constant_albedo", split, **constant_albedo_baseline(train, subset))
    table.add("random_normals", split, **random_normal_baseline(subset, cfg.seed))
    preds = None
    if cfg.ckpt("stage1").exists():
        s1 = load_denoiser(cfg.ckpt("stage1")).model
        preds = stage1_predictions(s1, ae, subset, cfg, cfg.eval.cfg_stage1)
        table.add("stage1", split, **score_intrinsics(preds, subset))
    if cfg.ckpt("stage2").exists():
        s2 = load_denoiser(cfg.ckpt("stage2")).model
        ps, ss = relight_scores(s2, ae, records, cfg)
        table.add("relight_gt_intrinsics", split, psnr=float(np.mean(ps)), ssim=float(np.mean(ss)))
        if cfg.ckpt("stage1").exists():
            pred_all = {i: p for i, p in zip(_subset_index(records, subset), preds)}
            needed = sorted({a for a, _ in _eval_pairs(records, cfg.eval.limit)})
            missing = [i for i in needed if i not in pred_all]
            if missing:
                extra = stage1_predictions(s1, ae, [records[i] for i in missing], cfg, cfg.eval.cfg_stage1)
                pred_all.update(zip(missing, extra))
            ps2, ss2 = relight_scores(s2, ae, records, cfg, intrinsics=pred_all)
            table.add("relight_stage1_intrinsics", split, psnr=float(np.mean(ps2)), ssim=float(np.mean(ss2)))
    if not table.check_monotone():
        raise TrendFailure("percent-within thresholds are not monotone", {"rows": table.rows})
    out = Path(cfg.out)
    (out / "metrics.json").write_text(table.to_json())
    (out / "metrics.txt").write_text(table.to_text())
    print(table.to_text(), end="")
    return {"rows": len(table.rows)}


def _subset_index(records, subset):
    ids = {id(r): i for i, r in enumerate(records)}
    return [ids[id(r)] for r in subset]


def cmd_ablate(cfg: RunConfig) -> dict:
    from .difftoy.data import build_bank
    from .difftoy.train import load_denoiser, train_stage1, train_stage2
    from .evaluate import albedo_psnr, paired_summary
    train = _load_records(cfg, ["train"])
    split = cfg.eval.split
    test = _load_records(cfg, [split])
    if not train or not test:
        raise DatasetError("ablation needs non-empty train and evaluation splits")
    ae = _autoencoder(cfg, train)
    bank = build_bank(train, ae)
    out = Path(cfg.out)
    report = {"split": split, "variants": {}, "cfg_sweep": {}, "warnings": []}
    scores = {}
    for variant in VARIANTS:
        res = train_stage2(train, ae, cfg=_train_config(cfg, cfg.stage2), bank=bank,
                           log_path=out / f"ablate_{variant}_log.jsonl", **_variant_args(variant, cfg.weights))
        res.config["variant"] = variant
        res.save(out / f"ablate_{variant}.ckpt")
        ps, ss = relight_scores(res.model, ae, test, cfg)
        scores[variant] = ps
        report["variants"][variant] = {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss))}
        log.info("ablation %s: psnr %.3f", variant, np.mean(ps))

    s1_path = cfg.ckpt("stage1")
    if s1_path.exists():
        s1 = load_denoiser(s1_path).model
    else:
        s1 = train_stage1(train, ae, _train_config(cfg, cfg.stage1), bank=bank,
                          log_path=out / "stage1_log.jsonl")
        s1.save(s1_path)
        s1 = s1.model
    subset = _eval_records(test, cfg.eval.limit)
    for s in cfg.eval.cfg_sweep:
        preds = stage1_predictions(s1, ae, subset, cfg, s)
        report["cfg_sweep"][f"{s:g}"] = float(np.mean(albedo_psnr(preds, subset)))

    checks = {}
    order = [("full", "decomposition"), ("decomposition", "none"), ("full", "none")]
    for hi, lo in order:
        summ = paired_summary(scores[hi], scores[lo])
        ok = summ["mean_diff"] >= 0.0
        checks[f"{hi}>={lo}"] = {"holds": ok, **summ}
        if not ok and abs(summ["mean_diff"]) < 2.0 * summ["stderr"]:
            report["warnings"].append(f"{hi} vs {lo}: difference {summ['mean_diff']:.3f} dB is within "
                                      f"2 standard errors ({summ['stderr']:.3f}); budget too small to separate")
        elif not ok:
            checks[f"{hi}>={lo}"]["significant"] = True
    sweep = [report["cfg_sweep"][f"{s:g}"] for s in cfg.eval.cfg_sweep]
    mono = all(a >= b for a, b in zip(sweep, sweep[1:]))
    checks["cfg_non_increasing"] = {"holds": mono}
    if cfg.eval.cfg_sweep and not mono:
        report["warnings"].append("albedo PSNR is not non-increasing across the CFG sweep")
    report["checks"] = checks
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    (out / "ablation.json").write_text(text)
    failed = [k for k, v in checks.items() if not v["holds"]
              and (v.get("significant") or k == "cfg_non_increasing")]
    if failed:
        raise TrendFailure(f"trend checks failed: {failed}", report)
    return {"report": str(out / "ablation.json"), "warnings": report["warnings"]}


# ---------------------------------------------------------------------------
# entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pilight", description="Toy two-stage intrinsic relighting pipeline.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run config; missing keys take defaults")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--stage", type=int, help="train: 0 autoencoder only, 1 intrinsics, 2 relighting")
    p.add_argument("--variant", help=f"stage-2 variant, one of {VARIANTS}")
    p.add_argument("--steps", type=int, help="override training steps for both stages")
    p.add_argument("--split")
    p.add_argument("--dataset-dir", dest="dataset_dir")
    p.add_argument("--autoencoder-ckpt", dest="autoencoder_ckpt")
    p.add_argument("--stage1-ckpt", dest="stage1_ckpt")
    p.add_argument("--stage2-ckpt", dest="stage2_ckpt")
    p.add_argument("--input", help="relight: input image (PNG or PFM)")
    p.add_argument("--ball", help="relight: gray-ball lighting image (PNG or PFM)")
    p.add_argument("--intrinsics", help="relight: directory with albedo/normal/roughness/metallic/mask")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve(load_config(args.config), args)
        _set_threads(cfg.threads)
        write_resolved(cfg, args.command, argv)
        if args.command == "gen":
            result = cmd_gen(cfg)
        elif args.command == "train":
            result = cmd_train(cfg, cfg.stage)
        elif args.command == "relight":
            result = cmd_relight(cfg)
        elif args.command == "eval":
            result = cmd_eval(cfg)
        else:
            result = cmd_ablate(cfg)
    except UsageError as exc:
        print(f"pilight: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrendFailure as exc:
        print(f"pilight: {exc}", file=sys.stderr)
        return EXIT_TREND
    except (DatasetError, CheckpointError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"pilight: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if args.verbose:
        print(json.dumps(result, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
