"""Run specifications: YAML config files, data sources and sweep grids.

A run file looks like::

    experiment:            # any ExperimentConfig field
      loss: vicreg
      asymmetric: true
      degradation: downsample
      encoder: {name: desk_cnn_small}
    data:                  # either a manifest ...
      manifest: data/manifest.csv
    #   ... or an in-memory synthetic dataset
    #   synthetic: {n_train: 4096, n_test: 1024, img_px: 64, seed: 0}
    probes:
      - {task: tissue, view: sparse, epochs: 20}

A sweep file adds ``grid`` (lists of values for experiment fields, expanded as
a Cartesian product) and ``supervised`` (baseline runs) around a ``base`` run.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Optional

import yaml

from .data import SynthParams, TileDataset, load_manifest, load_tiles, synth_dataset
from .exceptions import ConfigurationError
from .train import DESK_PROTOCOL, ExperimentConfig, ProbeConfig


@dataclass(frozen=True)
class DataSpec:
    manifest: Optional[str] = None
    n_train: int = 4096
    n_test: int = 1024
    img_px: int = 64
    seed: int = 0
    train_split: str = "train"
    test_split: str = "test"

    @classmethod
    def from_dict(cls, d: dict | None, base_dir: Path = Path(".")) -> "DataSpec":
        d = dict(d or {})
        if "manifest" in d and "synthetic" in d:
            raise ConfigurationError("data: give either 'manifest' or 'synthetic', not both")
        syn = d.pop("synthetic", None) or {}
        manifest = d.pop("manifest", None)
        if manifest is not None:
            p = Path(manifest)
            manifest = str(p if p.is_absolute() else (base_dir / p).resolve())
        try:
            return cls(manifest=manifest, **syn, **d)
        except TypeError as err:
            raise ConfigurationError(f"data: {err}") from None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunSpec:
    name: str
    kind: str  # "ssl" or "supervised"
    experiment: ExperimentConfig
    data: DataSpec
    probes: list[ProbeConfig] = field(default_factory=list)
    task: str = "tissue"  # supervised runs only
    view: str = "sparse"  # supervised runs only
    transfer_to: Optional[str] = None

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "data": self.data.to_dict(), "probes": [asdict(p) for p in self.probes]}
        if self.kind == "ssl":
            d["experiment"] = self.experiment.to_dict()
        else:
            e = self.experiment
            d["supervised"] = {
                "task": self.task,
                "view": self.view,
                "transfer_to": self.transfer_to,
                "encoder": e.encoder.to_dict(),
                "epochs": e.epochs,
                "batch_size": e.batch_size,
                "lr_max": e.lr_max,
                "warmup_fraction": e.warmup_fraction,
                "degradation": e.degradation,
                "augment": e.augment,
                "seed": e.seed,
            }
        return d

    def run_hash(self) -> str:
        d = self.to_dict()
        d.pop("name")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _experiment(d: dict | None) -> ExperimentConfig:
    return ExperimentConfig.from_dict({**DESK_PROTOCOL, **(d or {})})


def _probes(items) -> list[ProbeConfig]:
    out = []
    for p in items or [{"task": "tissue", "view": "sparse"}]:
        p = dict(p)
        if "view" in p:
            p["branch"] = p.pop("view")
        out.append(ProbeConfig(**{"epochs": 20, "batch_size": 64, **p}))
    return out


def read_yaml(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        d = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as err:
        raise ConfigurationError(f"{path}: {err}") from None
    if not isinstance(d, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return d


def run_from_dict(d: dict, base_dir: Path = Path("."), name: str = "run") -> RunSpec:
    unknown = sorted(set(d) - {"experiment", "data", "probes", "name"})
    if unknown:
        raise ConfigurationError(f"unknown run keys: {unknown}")
    return RunSpec(
        name=d.get("name", name),
        kind="ssl",
        experiment=_experiment(d.get("experiment")),
        data=DataSpec.from_dict(d.get("data"), base_dir),
        probes=_probes(d.get("probes")),
    )


def load_run(path, overrides: dict | None = None) -> RunSpec:
    path = Path(path)
    d = read_yaml(path)
    if overrides:
        d = {**d, "experiment": {**(d.get("experiment") or {}), **overrides}}
    return run_from_dict(d, path.parent, name=path.stem)


def _label(exp: ExperimentConfig) -> str:
    return f"{exp.loss}_{'asym' if exp.asymmetric else 'sym'}_{'shared' if exp.shared_weights else 'unshared'}_s{exp.seed}"


def expand_sweep(d: dict, base_dir: Path = Path(".")) -> list[RunSpec]:
    """Expand a sweep mapping into concrete runs (grid product, then supervised baselines)."""
    unknown = sorted(set(d) - {"base", "grid", "supervised"})
    if unknown:
        raise ConfigurationError(f"unknown sweep keys: {unknown}")
    base = d.get("base") or {}
    base_run = run_from_dict(base, base_dir)
    grid = d.get("grid") or {}
    keys = sorted(grid)
    for k in keys:
        if not isinstance(grid[k], list) or not grid[k]:
            raise ConfigurationError(f"grid.{k} must be a non-empty list")
    runs = []
    for values in itertools.product(*(grid[k] for k in keys)):
        exp = ExperimentConfig.from_dict({**base_run.experiment.to_dict(), **dict(zip(keys, values))})
        runs.append(replace(base_run, name=_label(exp), experiment=exp))
    for sup in d.get("supervised") or []:
        sup = dict(sup)
        task = sup.pop("task", "tissue")
        view = sup.pop("view", "sparse")
        transfer_to = sup.pop("transfer_to", None)
        exp = ExperimentConfig.from_dict({**base_run.experiment.to_dict(), **sup})
        name = f"supervised_{task}_{view}" + (f"_to_{transfer_to}" if transfer_to else "") + f"_s{exp.seed}"
        runs.append(RunSpec(name, "supervised", exp, base_run.data, base_run.probes, task=task, view=view, transfer_to=transfer_to))
    return runs


def load_sweep(path) -> list[RunSpec]:
    path = Path(path)
    return expand_sweep(read_yaml(path), path.parent)


@lru_cache(maxsize=4)
def _cached_data(spec: DataSpec, degradation: str) -> tuple[TileDataset, TileDataset]:
    if spec.manifest:
        manifest = load_manifest(spec.manifest)
        return load_tiles(manifest, spec.train_split, degradation), load_tiles(manifest, spec.test_split, degradation)
    deg = degradation if degradation != "external_pair" else "downsample"
    train = synth_dataset(spec.n_train, seed=spec.seed, degradation=deg, img_px=spec.img_px, prefix="train")
    test = synth_dataset(spec.n_test, seed=spec.seed + 1_000_003, degradation=deg, img_px=spec.img_px, prefix="test")
    return train, test


def load_data(spec: DataSpec, degradation: str) -> tuple[TileDataset, TileDataset]:
    """Train and test splits for ``spec`` (cached per process)."""
    if degradation == "external_pair" and not spec.manifest:
        raise ConfigurationError("external_pair pairing needs a manifest with pair_path entries")
    return _cached_data(spec, degradation)


