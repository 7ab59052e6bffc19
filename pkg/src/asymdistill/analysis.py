"""Representation analysis: layer-wise linear CKA, GradCAM and report rendering."""

from __future__ import annotations

import csv
import io
import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .exceptions import DegenerateInputError, ValidationError
from .model import JointModel, ProbeHead, SupervisedModel, to_tensor

# ------------------------------------------------------------------ activations


@dataclass
class ActivationSet:
    """Globally average-pooled activations, one ``N x C_l`` matrix per layer."""

    layers: dict[str, np.ndarray]
    model_id: str = ""
    probe_id: str = ""

    @property
    def names(self) -> list[str]:
        return list(self.layers)


def _encoder_of(model, view: str = "sparse") -> torch.nn.Module:
    if isinstance(model, JointModel):
        branch = "a" if (view == "sparse" or not model.asymmetric) else "b"
        return model.branch(branch).encoder
    if isinstance(model, SupervisedModel):
        return model.encoder
    return model


def extract_activations(model, layers: Optional[Sequence[str]], images, view: str = "sparse", batch_size: int = 256, model_id: str = "", probe_id: str = "") -> ActivationSet:
    encoder = _encoder_of(model, view)
    available = list(getattr(encoder, "layer_names", []))
    layers = list(layers) if layers else available
    unknown = [l for l in layers if l not in available]
    if unknown:
        raise ValidationError(f"unknown layers {unknown}; encoder exposes {available}")
    encoder.eval()
    chunks: dict[str, list[np.ndarray]] = {l: [] for l in layers}
    with torch.no_grad():
        for s in range(0, len(images), batch_size):
            _, feats = encoder(to_tensor(images[s : s + batch_size]), taps=layers)
            for l in layers:
                chunks[l].append(feats[l].mean(dim=(2, 3)).double().numpy())
    return ActivationSet({l: np.concatenate(chunks[l]) for l in layers}, model_id, probe_id)


# ------------------------------------------------------------------------- CKA


def linear_cka(X, Y) -> float:
    """Linear CKA between two representations of the same ``N`` inputs."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ValidationError(f"need N x D1 and N x D2 matrices, got {X.shape} and {Y.shape}")
    if X.shape[0] < 3:
        raise ValidationError("CKA needs at least 3 samples")
    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    xx = np.linalg.norm(X.T @ X)
    yy = np.linalg.norm(Y.T @ Y)
    if xx == 0.0 or yy == 0.0:
        raise DegenerateInputError("CKA is undefined when all rows of an input are identical")
    # Averaging both products makes the result exactly symmetric under float rounding.
    num = 0.5 * (np.linalg.norm(Y.T @ X) ** 2 + np.linalg.norm(X.T @ Y) ** 2)
    return float(num / (xx * yy))


@dataclass
class CkaMatrix:
    values: np.ndarray
    rows: list[str]
    cols: list[str]
    meta: dict = field(default_factory=dict)

    def diagonal_mean(self) -> float:
        k = min(len(self.rows), len(self.cols))
        return float(np.mean([self.values[i, i] for i in range(k)]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", *self.cols])
        for name, row in zip(self.rows, self.values):
            w.writerow([name, *[f"{v:.8f}" for v in row]])
        return buf.getvalue()

    def save(self, out_dir, stem: str = "cka") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"{stem}.csv"
        _atomic_bytes(csv_path, self.to_csv().encode())
        png_path = out / f"{stem}.png"
        _atomic_bytes(png_path, _png_bytes(_colorize(self.values, vmin=0.0, vmax=1.0, cell=32)))
        return csv_path, png_path


ActivationSource = Union[ActivationSet, torch.nn.Module]


def cka_layer_matrix(model_a: ActivationSource, model_b: ActivationSource, images=None, layers=None, view_a: str = "sparse", view_b: Optional[str] = None) -> CkaMatrix:
    """Entry ``(i, j)`` is the CKA between layer ``i`` of model a and layer ``j`` of model b."""
    acts_a = model_a if isinstance(model_a, ActivationSet) else extract_activations(model_a, layers, images, view_a)
    acts_b = model_b if isinstance(model_b, ActivationSet) else extract_activations(model_b, layers, images, view_b or view_a)
    vals = np.array([[linear_cka(acts_a.layers[i], acts_b.layers[j]) for j in acts_b.names] for i in acts_a.names])
    return CkaMatrix(vals, acts_a.names, acts_b.names, {"model_a": acts_a.model_id, "model_b": acts_b.model_id})


def mean_cka(matrices: Iterable[CkaMatrix]) -> CkaMatrix:
    mats = list(matrices)
    if not mats:
        raise ValidationError("no CKA matrices to average")
    return CkaMatrix(np.mean([m.values for m in mats], axis=0), mats[0].rows, mats[0].cols, {"n_pairs": len(mats)})


def regime_similarity(groups: dict[str, Sequence[ActivationSet]]) -> dict[str, float]:
    """Mean layer-diagonal CKA within each regime and across regimes.

    Within-regime pairs are the distinct unordered pairs of one group; across
    pairs take one model from each of two groups.
    """
    out: dict[str, float] = {}
    names = list(groups)
    within, across = [], []
    for g in names:
        ms = groups[g]
        vals = [cka_layer_matrix(ms[i], ms[j]).diagonal_mean() for i in range(len(ms)) for j in range(i + 1, len(ms))]
        out[f"within:{g}"] = float(np.mean(vals)) if vals else float("nan")
        within += vals
    for i, g in enumerate(names):
        for h in names[i + 1 :]:
            vals = [cka_layer_matrix(a, b).diagonal_mean() for a in groups[g] for b in groups[h]]
            out[f"across:{g}/{h}"] = float(np.mean(vals))
            across += vals
    out["within"] = float(np.mean(within))
    out["across"] = float(np.mean(across))
    return out


# ---------------------------------------------------------------------- GradCAM


@dataclass
class Heatmap:
    values: np.ndarray  # H x W in [0, 1]
    layer: str
    target: Union[int, str]
    zero_gradient: bool = False

    def overlay(self, image: np.ndarray, alpha: float = 0.5) -> np.ndarray:
        heat = _colorize(self.values, 0.0, 1.0, cell=1, cmap="jet")[..., :3].astype(np.float32) / 255.0
        return np.clip((1 - alpha) * np.asarray(image, dtype=np.float32) + alpha * heat, 0.0, 1.0)

    def save(self, path, image: Optional[np.ndarray] = None) -> Path:
        arr = self.overlay(image) if image is not None else self.values[..., None].repeat(3, axis=2)
        _atomic_bytes(Path(path), _png_bytes((arr * 255).round().astype(np.uint8)))
        return Path(path)


def gradcam(model, head: Optional[ProbeHead], image, layer: str, target: Union[str, int] = "predicted_class", view: str = "dense") -> Heatmap:
    """Gradient-weighted class activation map of one conv tap for one image.

    ``target`` is ``"predicted_class"``, an integer class id (both use the
    pre-softmax logit of ``head``) or ``"embedding_norm"``.
    """
    encoder = _encoder_of(model, view)
    if layer not in getattr(encoder, "layer_names", []):
        raise ValidationError(f"{layer!r} is not a conv tap of this encoder")
    if target != "embedding_norm" and head is None:
        raise ValidationError("class targets need a probe head")
    x = to_tensor(image)
    if x.shape[0] != 1:
        raise ValidationError("gradcam takes a single image")
    encoder.eval()
    with torch.enable_grad():
        emb, feats = encoder(x, taps=[layer])
        act = feats[layer]
        act.retain_grad()
        if target == "embedding_norm":
            score = emb.norm()
        else:
            logits = head.logits(emb)
            cls = int(logits.argmax(dim=1)) if target == "predicted_class" else int(target)
            score = logits[0, cls]
        encoder.zero_grad(set_to_none=True)
        score.backward()
    grad = act.grad.detach()
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * act.detach()).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=tuple(x.shape[2:]), mode="bilinear", align_corners=False)[0, 0].double().numpy()
    peak = cam.max()
    if not np.any(grad.numpy()) or peak <= 0.0:
        warnings.warn(f"GradCAM for layer {layer!r} has no positive evidence; returning a zero heatmap", RuntimeWarning)
        return Heatmap(np.zeros_like(cam), layer, target, zero_gradient=True)
    return Heatmap(cam / peak, layer, target)


def heatmap_mass(heatmap: Heatmap, region) -> float:
    """Share of total heatmap mass that falls inside a boolean region."""
    region = np.asarray(region, dtype=bool)
    total = heatmap.values.sum()
    return float(heatmap.values[region].sum() / total) if total > 0 else 0.0


# ------------------------------------------------------------------------ report

MODEL_ORDER = {"vicreg": 0, "simclr": 1, "supervised": 2, "supervised_transfer": 3}
MODEL_LABELS = {"vicreg": "VICReg", "simclr": "SimCLR", "supervised": "Supervised", "supervised_transfer": "Supervised (Transfer)"}


def _row_key(s: dict):
    # Asymmetric rows first, unshared before shared within each.
    return (MODEL_ORDER.get(s.get("model"), 9), not s.get("asymmetric", False), bool(s.get("shared_weights", False)), s.get("name", ""))


def _mark(flag) -> str:
    return "-" if flag is None else ("yes" if flag else "")


def accuracy_table(summaries: Sequence[dict]) -> tuple[list[str], list[list[str]]]:
    metrics = sorted({k for s in summaries for k in s.get("accuracy", {})})
    header = ["Model", "Asymmetric", "Shared Weights", *metrics]
    rows = []
    for s in sorted(summaries, key=_row_key):
        sup = s.get("model", "").startswith("supervised")
        acc = s.get("accuracy", {})
        rows.append(
            [
                MODEL_LABELS.get(s.get("model"), s.get("model", "?")),
                _mark(None if sup else s.get("asymmetric")),
                _mark(None if sup else s.get("shared_weights")),
                *[f"{acc[m]:.4f}" if m in acc else "-" for m in metrics],
            ]
        )
    return header, rows


def _load_run(run) -> Optional[dict]:
    if isinstance(run, dict):
        return run
    p = Path(run)
    f = p / "summary.json" if p.is_dir() else p
    if not f.is_file():
        return None
    return json.loads(f.read_text())


def render_report(runs: Sequence, out_dir) -> Path:
    """Write accuracy tables, confusion matrices and any CKA/GradCAM artefacts to ``out_dir``.

    ``runs`` holds run directories, ``summary.json`` paths or summary dicts.
    Runs that cannot be found are listed under ``absent`` in ``index.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summaries, absent = [], []
    for r in runs:
        s = _load_run(r)
        if s is None:
            absent.append(str(r))
        elif s.get("status", "ok") != "ok":
            absent.append(s.get("name", str(r)))
        else:
            summaries.append(s)

    header, rows = accuracy_table(summaries)
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows([header, *rows])
    _atomic_bytes(out / "accuracy_table.csv", buf.getvalue().encode())
    md = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)] + ["| " + " | ".join(r) + " |" for r in rows]
    _atomic_bytes(out / "accuracy_table.md", ("\n".join(md) + "\n").encode())

    files = ["accuracy_table.csv", "accuracy_table.md"]
    names = [s.get("name", "") for s in summaries]
    for s in sorted(summaries, key=lambda s: (s.get("name", ""), s.get("config_hash", ""))):
        label = s.get("name", "") if names.count(s.get("name", "")) == 1 else f"{s.get('name', '')}-{s.get('config_hash', '')}"
        for key, cm in sorted(s.get("confusion", {}).items()):
            stem = f"confusion_{label}_{key.replace('/', '_')}"
            cm = np.asarray(cm, dtype=float)
            norm = cm / np.maximum(cm.sum(axis=1, keepdims=True), 1)
            _atomic_bytes(out / f"{stem}.png", _png_bytes(_colorize(norm, 0.0, 1.0, cell=24)))
            files.append(f"{stem}.png")
        src = s.get("run_dir")
        if src:
            for extra in sorted(Path(src).glob("analysis/*.png")) + sorted(Path(src).glob("analysis/*.csv")):
                dst = f"{label}_{extra.name}"
                _atomic_bytes(out / dst, extra.read_bytes())
                files.append(dst)
    index = {"runs": sorted(s.get("name", "") for s in summaries), "absent": sorted(absent), "files": files, "n_rows": len(rows)}
    _atomic_bytes(out / "index.json", (json.dumps(index, indent=2, sort_keys=True) + "\n").encode())
    return out


# ----------------------------------------------------------------------- helpers


def _colorize(values: np.ndarray, vmin: float, vmax: float, cell: int = 1, cmap: str = "viridis") -> np.ndarray:
    from matplotlib import colormaps

    v = np.clip((np.asarray(values, dtype=np.float64) - vmin) / max(vmax - vmin, 1e-12), 0.0, 1.0)
    rgb = (colormaps[cmap](v)[..., :3] * 255).round().astype(np.uint8)
    if cell > 1:
        rgb = rgb.repeat(cell, axis=0).repeat(cell, axis=1)
    return rgb


def _png_bytes(rgb: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def _atomic_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
