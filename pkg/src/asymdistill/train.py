"""Self-supervised pretraining, linear probing and supervised baselines."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import confusion_matrix

from .checkpoint import load_checkpoint, save_checkpoint
from .data import DEGRADATIONS, AugmentationPolicy, BatchSampler, TileDataset, augment, make_pair
from .exceptions import ConfigurationError, NonFiniteLossError, ValidationError
from .losses import LossBreakdown, SimclrParams, VicregParams, nt_xent, vicreg_loss
from .model import (
    EncoderSpec,
    ExpanderSpec,
    JointModel,
    ProbeHead,
    SupervisedModel,
    build_joint,
    param_checksum,
    to_tensor,
)

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
# CPU-sized protocol lr; the full-scale 1e-4 barely moves a 10-epoch desk run.
DESK_LR = 1e-3
DESK_PROTOCOL = {"epochs": 10, "batch_size": 64, "lr_max": DESK_LR}
VICREG_COMPONENTS = ("invariance", "variance_a", "variance_b", "covariance_a", "covariance_b")


def lr_schedule(step: int, total_steps: int, warmup_steps: int, lr_max: float) -> float:
    """Linear warm-up from 0 to ``lr_max`` then cosine decay towards 0 at ``total_steps``."""
    if not 0 < warmup_steps < total_steps:
        raise ValueError(f"need 0 < warmup_steps < total_steps, got {warmup_steps} and {total_steps}")
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if step < warmup_steps:
        return lr_max * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


def seed_streams(seed: int) -> dict[str, np.random.SeedSequence]:
    """Split one user seed into independent data, model and training streams."""
    data, model, train = np.random.SeedSequence(seed).spawn(3)
    return {"data": data, "model": model, "train": train}


def _child_int(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint64)[0]) & 0x7FFF_FFFF_FFFF_FFFF


# -------------------------------------------------------------------- configs


@dataclass
class ExperimentConfig:
    loss: str = "vicreg"
    asymmetric: bool = True
    shared_weights: bool = False
    degradation: str = "downsample"
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    expander: ExpanderSpec = field(default_factory=ExpanderSpec)
    epochs: int = 100
    batch_size: int = 128
    lr_max: float = 1e-4
    warmup_fraction: float = 0.1
    fraction: float = 1.0
    seed: int = 0
    symmetric_source: str = "sparse"
    augment: bool = True
    vicreg: VicregParams = field(default_factory=lambda: VicregParams(invariance_reduction="mean"))
    simclr: SimclrParams = field(default_factory=SimclrParams)

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderSpec(**{**self.encoder, "taps": tuple(self.encoder["taps"]) if self.encoder.get("taps") else None})
        if isinstance(self.expander, dict):
            self.expander = ExpanderSpec(**self.expander)
        if isinstance(self.vicreg, dict):
            self.vicreg = VicregParams(**self.vicreg)
        if isinstance(self.simclr, dict):
            self.simclr = SimclrParams(**self.simclr)
        self.validate()

    def validate(self) -> None:
        if self.loss not in ("vicreg", "simclr"):
            raise ConfigurationError(f"loss must be 'vicreg' or 'simclr', got {self.loss!r}")
        if self.degradation not in DEGRADATIONS:
            raise ConfigurationError(f"degradation must be one of {DEGRADATIONS}, got {self.degradation!r}")
        if self.symmetric_source not in ("sparse", "dense"):
            raise ConfigurationError(f"symmetric_source must be 'sparse' or 'dense', got {self.symmetric_source!r}")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigurationError(f"fraction must lie in (0, 1], got {self.fraction}")
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigurationError("epochs must be >= 1 and batch_size >= 2")
        if not 0.0 < self.warmup_fraction:
            raise ConfigurationError("warmup_fraction must be positive")
        self.encoder.resolved()

    @classmethod
    def desk(cls, **overrides) -> "ExperimentConfig":
        """CPU-sized protocol: 10 epochs at batch 64 and ``DESK_LR``."""
        return cls(**{**DESK_PROTOCOL, **overrides})

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["encoder"] = self.encoder.to_dict()
        d["expander"] = self.expander.to_dict()
        d["vicreg"] = asdict(self.vicreg)
        d["simclr"] = asdict(self.simclr)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    @property
    def mode(self) -> str:
        return "asymmetric" if self.asymmetric else "symmetric"


@dataclass
class ProbeConfig:
    task: str = "tissue"
    branch: str = "sparse"
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("tissue", "cell"):
            raise ConfigurationError(f"task must be 'tissue' or 'cell', got {self.task!r}")
        if self.branch not in ("sparse", "dense"):
            raise ConfigurationError(f"branch must be 'sparse' or 'dense', got {self.branch!r}")

    @classmethod
    def desk(cls, **overrides) -> "ProbeConfig":
        return cls(**{"epochs": 20, "batch_size": 64, **overrides})


@dataclass
class MetricsRecord:
    """Append-only training log."""

    columns: tuple[str, ...]
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0

    def log_step(self, row: dict) -> None:
        if self.steps and row["step"] <= self.steps[-1]["step"]:
            raise ValueError("step index must increase")
        self.steps.append(row)

    def log_epoch(self, row: dict) -> None:
        self.epochs.append(row)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.steps:
            writer.writerow([_fmt(row[c]) for c in self.columns])
        return buf.getvalue()

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        _atomic_text(out / "metrics.csv", self.to_csv())
        _atomic_text(out / "epochs.json", json.dumps(self.epochs, indent=2, sort_keys=True) + "\n")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _atomic_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# ------------------------------------------------------------------- helpers


def _input_px(data: TileDataset) -> int:
    return int(data.dense.shape[1])


def _resolve_encoder(spec: EncoderSpec, data: TileDataset) -> EncoderSpec:
    return replace(spec, input_px=_input_px(data)).resolved()


def _make_optimizer(params, lr: float = 0.0) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def _set_lr(opt, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def warmup_steps_for(steps_per_epoch: int, warmup_fraction: float) -> int:
    return max(1, int(round(warmup_fraction * steps_per_epoch)))


def _loss_fn(cfg: ExperimentConfig) -> Callable[[torch.Tensor, torch.Tensor], LossBreakdown]:
    if cfg.loss == "vicreg":
        return lambda a, b: vicreg_loss(a, b, cfg.vicreg)
    return lambda a, b: nt_xent(a, b, cfg.simclr)


def branch_for_view(model: JointModel, view: str) -> str:
    """Branch that consumed ``view`` during training."""
    if model.asymmetric:
        return "a" if view == "sparse" else "b"
    return "a"


# ------------------------------------------------------------------------ SSL


def fit_joint(cfg: ExperimentConfig, data: TileDataset, on_epoch: Optional[Callable] = None) -> tuple[JointModel, MetricsRecord]:
    """Train a joint-embedding model in memory and return it with its log."""
    streams = seed_streams(cfg.seed)
    enc = _resolve_encoder(cfg.encoder, data)
    model = build_joint(enc, cfg.expander, cfg.asymmetric, cfg.shared_weights, seed=_child_int(streams["model"]))
    torch.manual_seed(_child_int(streams["train"]))
    sampler = BatchSampler(len(data), cfg.batch_size, np.random.default_rng(streams["data"]), cfg.fraction)
    aug_rng = np.random.default_rng(streams["train"])
    policy = AugmentationPolicy() if cfg.augment else AugmentationPolicy.disabled()
    loss_fn = _loss_fn(cfg)

    spe = len(sampler)
    total = cfg.epochs * spe
    warmup = warmup_steps_for(spe, cfg.warmup_fraction)
    if warmup >= total:
        raise ConfigurationError(f"warm-up of {warmup} steps does not fit in {total} total steps")
    comps = VICREG_COMPONENTS if cfg.loss == "vicreg" else ("contrastive",)
    record = MetricsRecord(columns=("step", "epoch", "lr", "total", *[f"comp_{c}" for c in comps]))
    opt = _make_optimizer(model.parameters())
    t0 = time.perf_counter()
    model.train()
    step = 0
    for epoch in range(cfg.epochs):
        for batch_id, idx in enumerate(sampler):
            pairs = [make_pair(data[i], cfg.mode, cfg.degradation, policy, aug_rng, cfg.symmetric_source) for i in idx]
            xa = to_tensor(np.stack([p[0] for p in pairs]))
            xb = to_tensor(np.stack([p[1] for p in pairs]))
            lr = lr_schedule(step, total, warmup, cfg.lr_max)
            _set_lr(opt, lr)
            za, zb = model(xa, xb)
            br = loss_fn(za, zb)
            if not torch.isfinite(br.total):
                snapshot = {"step": step, "epoch": epoch, "batch": batch_id, "lr": lr, "components": br.components}
                raise NonFiniteLossError(f"non-finite loss at step {step} (epoch {epoch}, batch {batch_id})", snapshot)
            opt.zero_grad(set_to_none=True)
            br.total.backward()
            opt.step()
            record.log_step({"step": step, "epoch": epoch, "lr": lr, **br.as_row()})
            step += 1
        row = {"epoch": epoch, "checksum_a": param_checksum(model.branch_a), "checksum_b": param_checksum(model.branch_b)}
        if cfg.shared_weights and row["checksum_a"] != row["checksum_b"]:
            raise AssertionError(f"shared branches diverged at epoch {epoch}")
        record.log_epoch(row)
        if on_epoch is not None:
            on_epoch(model, row)
        logger.info("epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, record.steps[-1]["total"])
    record.wall_clock = time.perf_counter() - t0
    model.eval()
    return model, record


def train_ssl(cfg: ExperimentConfig, data: TileDataset, out_dir) -> tuple[Path, MetricsRecord]:
    """Train, then write ``checkpoint.ckpt``, ``metrics.csv``, ``epochs.json`` and ``config.json``."""
    out = Path(out_dir)
    try:
        model, record = fit_joint(cfg, data)
    except NonFiniteLossError as err:
        _atomic_text(out / "diagnostic.json", json.dumps(err.snapshot, indent=2, sort_keys=True) + "\n")
        raise
    meta = {"config_hash": cfg.config_hash(), "seed": cfg.seed, "epoch": cfg.epochs, "config": cfg.to_dict()}
    ckpt = save_checkpoint(model, out / "checkpoint.ckpt", meta)
    record.write(out)
    _atomic_text(out / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    _atomic_text(out / "timing.json", json.dumps({"wall_clock_s": record.wall_clock}) + "\n")
    return ckpt, record


# --------------------------------------------------------------------- probes


def embed(encoder: torch.nn.Module, images, batch_size: int = 256) -> torch.Tensor:
    """Frozen-encoder embeddings in inference mode."""
    encoder.eval()
    out = []
    with torch.no_grad():
        for s in range(0, len(images), batch_size):
            out.append(encoder(to_tensor(images[s : s + batch_size])))
    return torch.cat(out) if out else torch.empty(0)


def fit_head(
    emb: torch.Tensor, y, n_classes: int, epochs: int = 100, lr: float = 1e-3, batch_size: int = 128, seed: int = 0
) -> ProbeHead:
    """Fit a dense softmax layer on fixed embeddings with Adam.

    Optimisation runs on per-feature standardised embeddings; the scaling is
    folded back into the returned weights, so the head applies to raw embeddings.
    """
    y = torch.as_tensor(np.asarray(y), dtype=torch.long)
    if len(y) != len(emb):
        raise ValidationError(f"{len(emb)} embeddings but {len(y)} labels")
    if len(y) == 0:
        raise ValidationError("no training samples")
    if int(y.max()) >= n_classes or int(y.min()) < 0:
        raise ValidationError(f"labels must lie in [0, {n_classes - 1}]")
    raw = emb.detach().to(torch.float64)
    mu = raw.mean(dim=0)
    sd = raw.std(dim=0) if len(raw) > 1 else torch.ones_like(mu)
    sd = torch.where(sd > 1e-8, sd, torch.ones_like(sd))
    emb = ((raw - mu) / sd).to(torch.float32)
    g = torch.Generator().manual_seed(_child_int(np.random.SeedSequence(seed)))
    lin = torch.nn.Linear(emb.shape[1], n_classes)
    with torch.no_grad():
        lin.weight.zero_()
        lin.bias.zero_()
    opt = _make_optimizer(lin.parameters(), lr)
    bs = min(batch_size, len(y))
    for _ in range(epochs):
        order = torch.randperm(len(y), generator=g)
        for s in range(0, len(y), bs):
            idx = order[s : s + bs]
            loss = F.cross_entropy(lin(emb[idx]), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    w = lin.weight.detach().to(torch.float64).T / sd[:, None]
    b = lin.bias.detach().to(torch.float64) - mu @ w
    return ProbeHead(w.to(torch.float32), b.to(torch.float32), list(range(n_classes)))


def predict(encoder: torch.nn.Module, head: ProbeHead, images) -> np.ndarray:
    return head.logits(embed(encoder, images)).argmax(dim=1).numpy()


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "confusion": self.confusion.tolist()}


def score_predictions(y_true, y_pred, n_classes: int) -> EvalResult:
    y_true = np.asarray(y_true)
    if len(y_true) == 0:
        raise ValidationError("cannot evaluate an empty split")
    cm = confusion_matrix(y_true, y_pred, labels=list(range(n_classes)))
    return EvalResult(float(np.trace(cm) / cm.sum()), cm)


def evaluate(encoder: torch.nn.Module, head: ProbeHead, data: TileDataset, view: str, task: str) -> EvalResult:
    """Top-1 accuracy and confusion matrix of ``head`` on one view of ``data``."""
    if len(data) == 0:
        raise ValidationError("cannot evaluate an empty split")
    y = data.labels(task)
    return score_predictions(y, predict(encoder, head, data.view(view)), head.n_classes)


def _load_encoder(ckpt, view: str) -> torch.nn.Module:
    if isinstance(ckpt, (str, Path)):
        ckpt, _ = load_checkpoint(ckpt)
    if isinstance(ckpt, JointModel):
        return ckpt.branch(branch_for_view(ckpt, view)).encoder
    if isinstance(ckpt, SupervisedModel):
        return ckpt.encoder
    if isinstance(ckpt, torch.nn.Module):
        return ckpt
    raise TypeError(f"cannot take an encoder from {type(ckpt).__name__}")


def train_probe(ckpt, pcfg: ProbeConfig, train: TileDataset, test: TileDataset) -> tuple[ProbeHead, EvalResult]:
    """Linear probe on a frozen encoder; returns the head and held-out accuracy."""
    encoder = _load_encoder(ckpt, pcfg.branch)
    before = param_checksum(encoder)
    y = train.labels(pcfg.task)
    head = fit_head(embed(encoder, train.view(pcfg.branch)), y, train.n_classes(pcfg.task), pcfg.epochs, pcfg.lr, pcfg.batch_size, pcfg.seed)
    if param_checksum(encoder) != before:
        raise AssertionError("encoder parameters changed during probe training")
    return head, evaluate(encoder, head, test, pcfg.branch, pcfg.task)


# ----------------------------------------------------------------- supervised


def fit_supervised(
    task: str,
    encoder: EncoderSpec,
    data: TileDataset,
    view: str = "dense",
    epochs: int = 10,
    batch_size: int = 64,
    lr_max: float = 1e-4,
    warmup_fraction: float = 0.1,
    seed: int = 0,
    use_augment: bool = True,
) -> tuple[SupervisedModel, MetricsRecord]:
    streams = seed_streams(seed)
    y_all = torch.as_tensor(data.labels(task), dtype=torch.long)
    images = data.view(view)
    model = SupervisedModel(_resolve_encoder(encoder, data), data.n_classes(task), seed=_child_int(streams["model"]))
    torch.manual_seed(_child_int(streams["train"]))
    sampler = BatchSampler(len(data), batch_size, np.random.default_rng(streams["data"]))
    aug_rng = np.random.default_rng(streams["train"])
    policy = AugmentationPolicy() if use_augment else AugmentationPolicy.disabled()
    spe = len(sampler)
    total, warmup = epochs * spe, warmup_steps_for(spe, warmup_fraction)
    record = MetricsRecord(columns=("step", "epoch", "lr", "total", "comp_cross_entropy"))
    opt = _make_optimizer(model.parameters())
    t0 = time.perf_counter()
    model.train()
    step = 0
    for epoch in range(epochs):
        for idx in sampler:
            x = to_tensor(np.stack([augment(images[i], policy, aug_rng) for i in idx]))
            lr = lr_schedule(step, total, warmup, lr_max)
            _set_lr(opt, lr)
            loss = F.cross_entropy(model(x), y_all[idx])
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"non-finite loss at step {step}", {"step": step, "epoch": epoch})
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            v = float(loss.detach())
            record.log_step({"step": step, "epoch": epoch, "lr": lr, "total": v, "comp_cross_entropy": v})
            step += 1
        record.log_epoch({"epoch": epoch, "checksum": param_checksum(model)})
    record.wall_clock = time.perf_counter() - t0
    model.eval()
    return model, record


def train_supervised(task: str, encoder: EncoderSpec, train: TileDataset, test: TileDataset, out_dir=None, view: str = "dense", **kw):
    """End-to-end baseline; returns ``(model, EvalResult, MetricsRecord)`` and optionally writes artifacts."""
    model, record = fit_supervised(task, encoder, train, view=view, **kw)
    result = evaluate(model.encoder, model.probe_head(), test, view, task)
    if out_dir is not None:
        out = Path(out_dir)
        meta = {"task": task, "view": view, "seed": kw.get("seed", 0), "epoch": kw.get("epochs", 10), "accuracy": result.accuracy}
        save_checkpoint(model, out / "checkpoint.ckpt", meta)
        record.write(out)
    return model, result, record


def transfer_eval(ckpt, task_b: str, train: TileDataset, test: TileDataset, view: str = "dense", pcfg: Optional[ProbeConfig] = None) -> EvalResult:
    """Freeze an encoder trained on one task and probe it on ``task_b``."""
    pcfg = replace(pcfg or ProbeConfig.desk(), task=task_b, branch=view)
    _, result = train_probe(ckpt, pcfg, train, test)
    return result
