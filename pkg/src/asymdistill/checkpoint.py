"""Single-file checkpoint container.

Layout (all integers little-endian)::

    b"ASDCKPT1"                      8-byte magic
    uint64 header_len
    header_len bytes                 UTF-8 JSON: {"metadata": {...}, "tensors": [...]}
    tensor payload                   raw little-endian array bytes, in table order
    32 bytes                         SHA-256 of everything above

Each tensor table entry holds ``name``, ``dtype`` (numpy dtype string such as
``"<f4"``), ``shape``, ``offset`` (relative to payload start) and ``nbytes``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .exceptions import ChecksumError, ShapeMismatchError

MAGIC = b"ASDCKPT1"


def _le(arr: np.ndarray) -> np.ndarray:
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def write_checkpoint(path, tensors: Mapping[str, torch.Tensor], metadata: dict) -> Path:
    """Write tensors and JSON metadata atomically (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = _le(np.array(tensors[name].detach().cpu().numpy(), order="C"))
        raw = arr.tobytes()
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"metadata": metadata, "tensors": table}, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    """Return ``(tensors, metadata)``; raises :class:`ChecksumError` on corruption."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 + 32 or not data.startswith(MAGIC):
        raise ChecksumError(f"{path}: not a checkpoint or truncated")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch")
    (hlen,) = struct.unpack("<Q", body[8:16])
    header = json.loads(body[16 : 16 + hlen])
    payload = memoryview(body)[16 + hlen :]
    tensors = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return tensors, header["metadata"]


def load_into(module: torch.nn.Module, tensors: Mapping[str, torch.Tensor]) -> None:
    """Copy stored tensors into ``module``, naming the first layer that does not fit."""
    own = module.state_dict()
    missing = sorted(set(own) - set(tensors))
    extra = sorted(set(tensors) - set(own))
    if missing or extra:
        raise ShapeMismatchError(f"parameter names differ: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, target in own.items():
        if tuple(tensors[name].shape) != tuple(target.shape):
            raise ShapeMismatchError(
                f"layer {name!r}: stored shape {tuple(tensors[name].shape)} does not match model shape {tuple(target.shape)}"
            )
    module.load_state_dict({k: tensors[k].to(own[k].dtype) for k in own})


def save_checkpoint(obj, path, metadata: dict | None = None) -> Path:
    """Persist a :class:`JointModel`, :class:`SupervisedModel` or :class:`ProbeHead`."""
    from .model import JointModel, ProbeHead, SupervisedModel

    meta = dict(metadata or {})
    if isinstance(obj, JointModel):
        meta.update(kind="joint", spec=obj.spec_dict())
        tensors = obj.state_dict()
        if obj.shared_weights:
            tensors = {k: v for k, v in tensors.items() if not k.startswith("branch_b.")}
    elif isinstance(obj, SupervisedModel):
        meta.update(kind="supervised", spec=obj.spec_dict())
        tensors = obj.state_dict()
    elif isinstance(obj, ProbeHead):
        meta.update(kind="probe", classes=list(obj.classes))
        tensors = obj.state_dict()
    else:
        raise TypeError(f"cannot checkpoint {type(obj).__name__}")
    return write_checkpoint(path, tensors, meta)


def load_checkpoint(path, into=None):
    """Rebuild the stored object (or fill ``into``) and return ``(obj, metadata)``."""
    from .model import EncoderSpec, ExpanderSpec, JointModel, ProbeHead, SupervisedModel, build_joint

    tensors, meta = read_checkpoint(path)
    kind = meta.get("kind")
    if kind == "probe":
        if into is not None and tuple(into.weight.shape) != tuple(tensors["weight"].shape):
            raise ShapeMismatchError(
                f"layer 'weight': stored shape {tuple(tensors['weight'].shape)} does not match model shape {tuple(into.weight.shape)}"
            )
        return ProbeHead(tensors["weight"], tensors["bias"], meta.get("classes", [])), meta
    spec = meta["spec"]
    enc = EncoderSpec(**{**spec["encoder"], "taps": tuple(spec["encoder"]["taps"])})
    if kind == "joint":
        model = into if into is not None else build_joint(enc, ExpanderSpec(**spec["expander"]), spec["asymmetric"], spec["shared_weights"])
        if isinstance(model, JointModel) and model.shared_weights:
            tensors = {**tensors, **{"branch_b." + k[len("branch_a."):]: v for k, v in tensors.items() if k.startswith("branch_a.")}}
    elif kind == "supervised":
        model = into if into is not None else SupervisedModel(enc, spec["n_classes"])
    else:
        raise ChecksumError(f"{path}: unknown checkpoint kind {kind!r}")
    load_into(model, tensors)
    return model, meta
