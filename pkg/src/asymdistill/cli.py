"""Command-line front end: ``asymdistill <subcommand> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
``ASYMDISTILL_OUT`` overrides the default output root and ``ASYMDISTILL_JOBS``
the sweep worker count.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analysis
from .checkpoint import load_checkpoint, save_checkpoint
from .config import DataSpec, RunSpec, load_data, load_run, load_sweep, run_from_dict
from .data import DEGRADATIONS, N_TISSUE_CLASSES, TileDataset, load_manifest, load_tiles, synth_dataset, write_dataset
from .exceptions import ConfigurationError, ManifestError, ValidationError
from .model import ENCODER_REGISTRY, ProbeHead, SupervisedModel
from .train import (
    ExperimentConfig,
    ProbeConfig,
    _atomic_text,
    _load_encoder,
    evaluate,
    train_probe,
    train_ssl,
    train_supervised,
    transfer_eval,
)

logger = logging.getLogger("asymdistill")

USAGE_ERRORS = (ConfigurationError, ManifestError, ValidationError)


def _out_root(arg: Optional[str]) -> Path:
    return Path(arg or os.environ.get("ASYMDISTILL_OUT", "runs"))


def _write_json(path: Path, obj) -> None:
    _atomic_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------- run logic


def run_dir_for(spec: RunSpec, root: Path) -> Path:
    return root / spec.run_hash()


def _summary_base(spec: RunSpec, run_dir: Path) -> dict:
    e = spec.experiment
    sup = spec.kind == "supervised"
    return {
        "name": spec.name,
        "config_hash": spec.run_hash(),
        "kind": spec.kind,
        "model": ("supervised_transfer" if spec.transfer_to else "supervised") if sup else e.loss,
        "asymmetric": None if sup else e.asymmetric,
        "shared_weights": None if sup else e.shared_weights,
        "seed": e.seed,
        "run_dir": str(run_dir),
    }


def execute_run(spec: RunSpec, root: Path) -> dict:
    """Train one grid point into ``root/<hash>`` and write its ``summary.json``.

    A directory whose summary already reports success is skipped.
    """
    run_dir = run_dir_for(spec, root)
    summary_path = run_dir / "summary.json"
    if summary_path.is_file():
        prev = json.loads(summary_path.read_text())
        if prev.get("status") == "ok" and prev.get("config_hash") == spec.run_hash():
            prev["skipped"] = True
            return prev
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_json(run_dir / "run.json", spec.to_dict())
    summary = _summary_base(spec, run_dir)
    try:
        train, test = load_data(spec.data, spec.experiment.degradation)
        acc, conf = {}, {}
        if spec.kind == "ssl":
            ckpt, _ = train_ssl(spec.experiment, train, run_dir)
            model, _ = load_checkpoint(ckpt)
            for p in spec.probes:
                head, res = train_probe(model, p, train, test)
                key = f"{p.task}/{p.branch}"
                save_checkpoint(head, run_dir / f"probe_{p.task}_{p.branch}.ckpt", {"task": p.task, "view": p.branch, "seed": p.seed})
                acc[key], conf[key] = res.accuracy, res.confusion.tolist()
        else:
            e = spec.experiment
            model, res, _ = train_supervised(
                spec.task,
                e.encoder,
                train,
                test,
                run_dir,
                view=spec.view,
                epochs=e.epochs,
                batch_size=e.batch_size,
                lr_max=e.lr_max,
                warmup_fraction=e.warmup_fraction,
                seed=e.seed,
                use_augment=e.augment,
            )
            key = f"{spec.task}/{spec.view}"
            acc[key], conf[key] = res.accuracy, res.confusion.tolist()
            if spec.transfer_to:
                pcfg = spec.probes[0] if spec.probes else ProbeConfig.desk()
                res = transfer_eval(model, spec.transfer_to, train, test, spec.view, pcfg)
                key = f"{spec.transfer_to}/{spec.view}"
                acc[key], conf[key] = res.accuracy, res.confusion.tolist()
        summary.update(status="ok", accuracy=acc, confusion=conf)
    except Exception as err:  # recorded, the sweep carries on
        summary.update(status="failed", error=f"{type(err).__name__}: {err}", traceback=traceback.format_exc())
        logger.error("run %s failed: %s", spec.name, err)
    _write_json(summary_path, summary)
    return summary


def _execute_task(args) -> dict:
    spec, root = args
    return execute_run(spec, Path(root))


def run_sweep(runs: Sequence[RunSpec], root: Path, jobs: int = 1) -> list[dict]:
    """Execute every run (in ``jobs`` worker processes) and write the comparison report."""
    root.mkdir(parents=True, exist_ok=True)
    tasks = [(r, str(root)) for r in runs]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_execute_task, tasks))
    else:
        results = [_execute_task(t) for t in tasks]
    index = [{"name": s["name"], "config_hash": s["config_hash"], "status": s["status"], "skipped": bool(s.get("skipped"))} for s in results]
    _write_json(root / "sweep_summary.json", {"runs": index, "n_failed": sum(s["status"] != "ok" for s in results)})
    analysis.render_report([run_dir_for(r, root) for r in runs], root / "report")
    return results


# ---------------------------------------------------------------------- flags


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    """One flag per scalar ExperimentConfig field (unset flags leave the config value)."""
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name in ("encoder", "expander", "vicreg", "simclr"):
            continue
        if f.type in ("bool", bool):
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif f.type in ("int", int):
            p.add_argument(flag, dest=f.name, type=int, default=None)
        elif f.type in ("float", float):
            p.add_argument(flag, dest=f.name, type=float, default=None)
        else:
            p.add_argument(flag, dest=f.name, default=None)
    p.add_argument("--encoder", dest="encoder_name", choices=sorted(ENCODER_REGISTRY), default=None)
    p.add_argument("--expander-width", type=int, default=None)
    p.add_argument("--expander-depth", type=int, default=None)


def _experiment_overrides(a) -> dict:
    ov = {f.name: getattr(a, f.name) for f in fields(ExperimentConfig) if getattr(a, f.name, None) is not None}
    if a.encoder_name:
        ov["encoder"] = {"name": a.encoder_name}
    exp = {k: v for k, v in (("width", a.expander_width), ("depth", a.expander_depth)) if v is not None}
    if exp:
        ov["expander"] = exp
    return ov


def _add_data_flags(p: argparse.ArgumentParser, split: bool = False) -> None:
    p.add_argument("--data", help="manifest CSV, or a directory holding manifest.csv")
    p.add_argument("--degradation", dest="data_degradation", choices=DEGRADATIONS, default=None, help="pairing used when loading tiles (default: the checkpoint's)")
    if split:
        p.add_argument("--split", default="test")


def _manifest_path(data: str) -> Path:
    p = Path(data)
    return p / "manifest.csv" if p.is_dir() else p


def _spec_data(a, fallback_run_dir: Optional[Path]) -> tuple[DataSpec, Optional[str]]:
    """Data spec from ``--data`` or from the run that produced the checkpoint."""
    if a.data:
        return DataSpec(manifest=str(_manifest_path(a.data).resolve())), None
    if fallback_run_dir is not None and (fallback_run_dir / "run.json").is_file():
        run = json.loads((fallback_run_dir / "run.json").read_text())
        deg = (run.get("experiment") or run.get("supervised") or {}).get("degradation")
        return DataSpec(**run["data"]), deg
    raise ConfigurationError("no data source: pass --data (the checkpoint has no run.json alongside)")


def _checkpoint_degradation(meta: dict) -> Optional[str]:
    return (meta.get("config") or {}).get("degradation")


def _load_split(a, ckpt_path: Path, meta: dict, split: str) -> TileDataset:
    spec, run_deg = _spec_data(a, ckpt_path.parent)
    deg = a.data_degradation or _checkpoint_degradation(meta) or run_deg or "downsample"
    if spec.manifest:
        return load_tiles(load_manifest(spec.manifest), split, deg)
    train, test = load_data(spec, deg)
    if split not in ("train", "test"):
        raise ConfigurationError(f"synthetic data has splits 'train' and 'test', not {split!r}")
    return train if split == "train" else test


def _load_ckpt(path: str):
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"checkpoint not found: {p}")
    obj, meta = load_checkpoint(p)
    return p, obj, meta


def _load_head(path: Optional[str], obj) -> Optional[ProbeHead]:
    if path:
        head, _ = load_checkpoint(_load_ckpt(path)[0])
        if not isinstance(head, ProbeHead):
            raise ConfigurationError(f"{path} is not a probe head checkpoint")
        return head
    if isinstance(obj, SupervisedModel):
        return obj.probe_head()
    return None


# ------------------------------------------------------------------- commands


def cmd_synth_data(a) -> int:
    if a.classes != N_TISSUE_CLASSES:
        raise ConfigurationError(f"the synthetic generator produces {N_TISSUE_CLASSES} tissue classes, got --classes {a.classes}")
    out = Path(a.out)
    train = synth_dataset(a.n, seed=a.seed, degradation=a.degradation, img_px=a.img_px, prefix="train")
    manifest = write_dataset(train, out, "train")
    if a.n_test:
        test = synth_dataset(a.n_test, seed=a.seed + 1_000_003, degradation=a.degradation, img_px=a.img_px, prefix="test")
        manifest = write_dataset(test, out, "test", append=True)
    load_manifest(manifest)
    counts = np.bincount(train.tissue, minlength=N_TISSUE_CLASSES).tolist()
    print(json.dumps({"manifest": str(manifest), "n_train": a.n, "n_test": a.n_test, "per_class": counts}))
    return 0


def _ssl_spec(a) -> RunSpec:
    ov = _experiment_overrides(a)
    spec = load_run(a.config, ov) if a.config else run_from_dict({"experiment": ov})
    if a.data:
        spec = replace(spec, data=DataSpec(manifest=str(_manifest_path(a.data).resolve())))
    return spec


def _finish(summary: dict) -> int:
    print(json.dumps({k: summary.get(k) for k in ("name", "config_hash", "status", "accuracy", "run_dir", "error") if k in summary}, sort_keys=True))
    return 0 if summary["status"] == "ok" else 1


def cmd_train_ssl(a) -> int:
    return _finish(execute_run(_ssl_spec(a), _out_root(a.out)))


def cmd_train_supervised(a) -> int:
    base = _ssl_spec(a)
    name = f"supervised_{a.task}_{a.view}" + (f"_to_{a.transfer_to}" if a.transfer_to else "")
    spec = RunSpec(name, "supervised", base.experiment, base.data, base.probes, task=a.task, view=a.view, transfer_to=a.transfer_to)
    return _finish(execute_run(spec, _out_root(a.out)))


def cmd_train_probe(a) -> int:
    path, obj, meta = _load_ckpt(a.checkpoint)
    pcfg = ProbeConfig(task=a.task, branch=a.view, epochs=a.epochs, lr=a.lr, batch_size=a.batch_size, seed=a.seed)
    train = _load_split(a, path, meta, a.train_split)
    test = _load_split(a, path, meta, a.test_split)
    head, res = train_probe(obj, pcfg, train, test)
    out = Path(a.out) if a.out else path.parent / f"probe_{a.task}_{a.view}"
    save_checkpoint(head, out / "probe.ckpt", {**asdict(pcfg), "checkpoint": str(path)})
    _write_json(out / "eval.json", {"task": a.task, "view": a.view, **res.to_dict()})
    print(json.dumps({"accuracy": res.accuracy, "head": str(out / "probe.ckpt")}))
    return 0


def cmd_eval(a) -> int:
    path, obj, meta = _load_ckpt(a.checkpoint)
    head = _load_head(a.head, obj)
    if head is None:
        raise ConfigurationError("SSL checkpoints need --head (a probe checkpoint)")
    data = _load_split(a, path, meta, a.split)
    res = evaluate(_load_encoder(obj, a.view), head, data, a.view, a.task)
    payload = {"task": a.task, "view": a.view, "split": a.split, **res.to_dict()}
    if a.out:
        _write_json(Path(a.out), payload)
    print(json.dumps(payload))
    return 0


def cmd_cka(a) -> int:
    pa, ma, meta = _load_ckpt(a.checkpoint_a)
    _, mb, _ = _load_ckpt(a.checkpoint_b)
    data = _load_split(a, pa, meta, a.split)
    images = data.view(a.view_a)[: a.n_images]
    images_b = data.view(a.view_b or a.view_a)[: a.n_images]
    layers = a.layers.split(",") if a.layers else None
    xa = analysis.extract_activations(ma, layers, images, a.view_a, model_id=str(pa))
    xb = analysis.extract_activations(mb, layers, images_b, a.view_b or a.view_a, model_id=a.checkpoint_b)
    mat = analysis.cka_layer_matrix(xa, xb)
    out = Path(a.out) if a.out else pa.parent / "analysis"
    csv_path, png_path = mat.save(out, a.stem)
    print(json.dumps({"csv": str(csv_path), "png": str(png_path), "diagonal_mean": mat.diagonal_mean()}))
    return 0


def cmd_gradcam(a) -> int:
    path, obj, meta = _load_ckpt(a.checkpoint)
    head = _load_head(a.head, obj)
    data = _load_split(a, path, meta, a.split)
    if not 0 <= a.index < len(data):
        raise ConfigurationError(f"--index {a.index} outside split of {len(data)} tiles")
    target = int(a.target) if a.target.lstrip("-").isdigit() else a.target
    image = data.view(a.view)[a.index]
    hm = analysis.gradcam(obj, head, image, a.layer, target=target, view=a.view)
    out = Path(a.out) if a.out else path.parent / "analysis" / f"gradcam_{a.layer}_{a.index}.png"
    hm.save(out, image)
    print(json.dumps({"png": str(out), "zero_gradient": hm.zero_gradient, "target": hm.target}))
    return 0


def _expand_runs(paths: Sequence[str]) -> list[Path]:
    runs = []
    for p in map(Path, paths):
        if p.is_dir() and not (p / "summary.json").is_file():
            runs.extend(sorted(d for d in p.iterdir() if (d / "summary.json").is_file()))
        else:
            runs.append(p)
    return runs


def cmd_report(a) -> int:
    out = analysis.render_report(_expand_runs(a.runs), a.out)
    print(json.dumps({"report": str(out)}))
    return 0


def cmd_sweep(a) -> int:
    runs = load_sweep(a.grid)
    jobs = a.jobs if a.jobs is not None else int(os.environ.get("ASYMDISTILL_JOBS", "1"))
    if jobs < 1:
        raise ConfigurationError("--jobs must be >= 1")
    root = _out_root(a.out)
    results = run_sweep(runs, root, jobs)
    failed = [s["name"] for s in results if s["status"] != "ok"]
    print(json.dumps({"runs": len(results), "skipped": sum(bool(s.get("skipped")) for s in results), "failed": failed, "report": str(root / "report")}))
    return 1 if failed else 0


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asymdistill", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic tile dataset and manifest")
    p.add_argument("--n", type=int, required=True, help="training tiles (class balanced)")
    p.add_argument("--n-test", type=int, default=0, help="held-out tiles written as split 'test'")
    p.add_argument("--classes", type=int, default=N_TISSUE_CLASSES)
    p.add_argument("--degradation", choices=("crop_pad", "downsample", "mask"), default="downsample")
    p.add_argument("--img-px", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    for name, func, help_ in (
        ("train-ssl", cmd_train_ssl, "self-supervised pretraining plus configured probes"),
        ("train-supervised", cmd_train_supervised, "end-to-end supervised baseline"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML run file")
        p.add_argument("--data", help="manifest CSV or directory (overrides the config's data section)")
        p.add_argument("--out", help="output root (default $ASYMDISTILL_OUT or ./runs)")
        _add_experiment_flags(p)
        if name == "train-supervised":
            p.add_argument("--task", choices=("tissue", "cell"), default="tissue")
            p.add_argument("--view", choices=("sparse", "dense"), default="dense")
            p.add_argument("--transfer-to", choices=("tissue", "cell"), default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("train-probe", help="linear probe on a frozen encoder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=("tissue", "cell"), default="tissue")
    p.add_argument("--view", choices=("sparse", "dense"), default="sparse")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-split", default="train")
    p.add_argument("--test-split", default="test")
    p.add_argument("--out")
    _add_data_flags(p)
    p.set_defaults(func=cmd_train_probe)

    p = sub.add_parser("eval", help="accuracy and confusion matrix of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--head", help="probe checkpoint (required for SSL checkpoints)")
    p.add_argument("--task", choices=("tissue", "cell"), default="tissue")
    p.add_argument("--view", choices=("sparse", "dense"), default="sparse")
    p.add_argument("--out", help="write the result JSON here")
    _add_data_flags(p, split=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cka", help="layer-wise linear CKA between two checkpoints")
    p.add_argument("--checkpoint-a", required=True)
    p.add_argument("--checkpoint-b", required=True)
    p.add_argument("--view-a", choices=("sparse", "dense"), default="sparse")
    p.add_argument("--view-b", choices=("sparse", "dense"), default=None)
    p.add_argument("--layers", help="comma-separated taps (default: all)")
    p.add_argument("--n-images", type=int, default=512)
    p.add_argument("--stem", default="cka")
    p.add_argument("--out", help="directory for the CSV and PNG")
    _add_data_flags(p, split=True)
    p.set_defaults(func=cmd_cka)

    p = sub.add_parser("gradcam", help="GradCAM heatmap for one tile")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--head", help="probe checkpoint (needed for class targets on SSL models)")
    p.add_argument("--layer", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--target", default="predicted_class", help="predicted_class, embedding_norm or a class id")
    p.add_argument("--view", choices=("sparse", "dense"), default="dense")
    p.add_argument("--out", help="PNG path")
    _add_data_flags(p, split=True)
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("report", help="accuracy tables and figures over run directories")
    p.add_argument("--runs", nargs="+", required=True, help="run directories or a sweep root")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="run every grid point of a sweep file")
    p.add_argument("--grid", required=True, help="YAML sweep file")
    p.add_argument("--out", help="output root (default $ASYMDISTILL_OUT or ./runs)")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default $ASYMDISTILL_JOBS or 1)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors exit 2, --help exits 0
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return a.func(a)
    except USAGE_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        logger.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
