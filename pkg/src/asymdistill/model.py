"""Encoders, expanders, two-branch joint models and linear probe heads."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .exceptions import ConfigurationError, ValidationError


@dataclass(frozen=True)
class EncoderSpec:
    """Encoder architecture from the registry plus its analysis taps."""

    name: str = "desk_cnn_small"
    input_px: int = 64
    embedding_dim: Optional[int] = None
    taps: Optional[tuple[str, ...]] = None

    def resolved(self) -> "EncoderSpec":
        entry = ENCODER_REGISTRY.get(self.name)
        if entry is None:
            raise ConfigurationError(f"unknown encoder {self.name!r}; choose from {sorted(ENCODER_REGISTRY)}")
        dim = self.embedding_dim or entry["embedding_dim"]
        taps = tuple(self.taps) if self.taps else tuple(entry["taps"])
        if dim <= 0:
            raise ConfigurationError("embedding_dim must be positive")
        unknown = [t for t in taps if t not in entry["taps"]]
        if unknown:
            raise ConfigurationError(f"{self.name} has no layers {unknown}; taps are {entry['taps']}")
        return EncoderSpec(self.name, self.input_px, dim, taps)

    def to_dict(self) -> dict:
        d = asdict(self.resolved())
        d["taps"] = list(d["taps"])
        return d


@dataclass(frozen=True)
class ExpanderSpec:
    """Dense projection stack; hidden layers are Linear -> [BatchNorm] -> ReLU."""

    depth: int = 3
    width: int = 512
    batch_norm: bool = True

    def __post_init__(self):
        if self.depth < 1 or self.width <= 0:
            raise ConfigurationError(f"invalid expander depth={self.depth} width={self.width}")

    def to_dict(self) -> dict:
        return asdict(self)


def _init_params(module: nn.Module, generator: torch.Generator) -> None:
    # He-uniform weights, fan-in uniform biases.
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = np.sqrt(6.0 / fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    b = 1.0 / np.sqrt(fan_in)
                    m.bias.uniform_(-b, b, generator=generator)


class DeskCNN(nn.Module):
    """Stack of stride-2 3x3 conv + ReLU blocks followed by global average pooling.

    No normalisation layers, so every sample's output depends on that sample alone.
    """

    def __init__(self, channels: Sequence[int], embedding_dim: int):
        super().__init__()
        self.layer_names = [f"conv{i + 1}" for i in range(len(channels))]
        c_in = 3
        for name, c_out in zip(self.layer_names, channels):
            self.add_module(name, nn.Sequential(nn.Conv2d(c_in, c_out, 3, stride=2, padding=1), nn.ReLU()))
            c_in = c_out
        self.proj = nn.Identity() if c_in == embedding_dim else nn.Linear(c_in, embedding_dim)
        self.embedding_dim = embedding_dim

    def forward(self, x, taps: Sequence[str] = ()):
        feats = {}
        for name in self.layer_names:
            x = getattr(self, name)(x)
            if name in taps:
                feats[name] = x
        out = self.proj(x.mean(dim=(2, 3)))
        return (out, feats) if taps else out


class ResNet50Encoder(nn.Module):
    """Torchvision ResNet-50 trunk without the classifier; BatchNorm couples samples."""

    layer_names = ["layer1", "layer2", "layer3", "layer4"]

    def __init__(self, embedding_dim: int = 2048):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        for name in self.layer_names:
            self.add_module(name, getattr(net, name))
        self.proj = nn.Identity() if embedding_dim == 2048 else nn.Linear(2048, embedding_dim)
        self.embedding_dim = embedding_dim

    def forward(self, x, taps: Sequence[str] = ()):
        feats = {}
        x = self.stem(x)
        for name in self.layer_names:
            x = getattr(self, name)(x)
            if name in taps:
                feats[name] = x
        out = self.proj(x.mean(dim=(2, 3)))
        return (out, feats) if taps else out


ENCODER_REGISTRY: dict[str, dict] = {
    "desk_cnn_small": {
        "build": lambda dim: DeskCNN((16, 32, 64, 128), dim),
        "embedding_dim": 128,
        "taps": ["conv1", "conv2", "conv3", "conv4"],
        "channels": {"conv1": 16, "conv2": 32, "conv3": 64, "conv4": 128},
    },
    "desk_cnn_tiny": {
        "build": lambda dim: DeskCNN((8, 16, 32, 64), dim),
        "embedding_dim": 64,
        "taps": ["conv1", "conv2", "conv3", "conv4"],
        "channels": {"conv1": 8, "conv2": 16, "conv3": 32, "conv4": 64},
    },
    "resnet50-shape": {
        "build": lambda dim: ResNet50Encoder(dim),
        "embedding_dim": 2048,
        "taps": ["layer1", "layer2", "layer3", "layer4"],
        "channels": {"layer1": 256, "layer2": 512, "layer3": 1024, "layer4": 2048},
    },
}


def build_encoder(spec: EncoderSpec, generator: Optional[torch.Generator] = None) -> nn.Module:
    spec = spec.resolved()
    enc = ENCODER_REGISTRY[spec.name]["build"](spec.embedding_dim)
    enc.input_px = spec.input_px
    if generator is not None:
        _init_params(enc, generator)
    return enc


def build_expander(in_dim: int, spec: ExpanderSpec, generator: Optional[torch.Generator] = None) -> nn.Sequential:
    layers: list[nn.Module] = []
    d = in_dim
    for i in range(spec.depth):
        layers.append(nn.Linear(d, spec.width))
        if i < spec.depth - 1:
            if spec.batch_norm:
                layers.append(nn.BatchNorm1d(spec.width))
            layers.append(nn.ReLU())
        d = spec.width
    exp = nn.Sequential(*layers)
    if generator is not None:
        _init_params(exp, generator)
    return exp


def to_tensor(batch, dtype=torch.float32) -> torch.Tensor:
    """``N x H x W x 3`` array to an ``N x 3 x H x W`` tensor."""
    if isinstance(batch, torch.Tensor):
        t = batch
        if t.dim() == 4 and t.shape[-1] == 3:
            t = t.permute(0, 3, 1, 2)
        return t.to(dtype)
    arr = np.asarray(batch)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValidationError(f"expected N x H x W x 3 images, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).to(dtype)


class Branch(nn.Module):
    def __init__(self, encoder: nn.Module, expander: nn.Module):
        super().__init__()
        self.encoder = encoder
        self.expander = expander

    def forward(self, x):
        return self.expander(self.encoder(x))


class JointModel(nn.Module):
    """Two encoder+expander branches. With ``shared_weights`` both names alias one module."""

    def __init__(self, enc: EncoderSpec, exp: ExpanderSpec, asymmetric: bool, shared_weights: bool, branch_a: Branch, branch_b: Branch):
        super().__init__()
        self.encoder_spec = enc.resolved()
        self.expander_spec = exp
        self.asymmetric = asymmetric
        self.shared_weights = shared_weights
        self.branch_a = branch_a
        self.branch_b = branch_a if shared_weights else branch_b

    def forward(self, xa, xb):
        return self.branch_a(xa), self.branch_b(xb)

    def branch(self, name: str) -> Branch:
        if name not in ("a", "b"):
            raise ValueError(f"branch must be 'a' or 'b', got {name!r}")
        return self.branch_a if name == "a" else self.branch_b

    def spec_dict(self) -> dict:
        return {
            "encoder": self.encoder_spec.to_dict(),
            "expander": self.expander_spec.to_dict(),
            "asymmetric": self.asymmetric,
            "shared_weights": self.shared_weights,
        }


def build_joint(enc: EncoderSpec, exp: ExpanderSpec, asymmetric: bool, shared: bool, seed: int = 0) -> JointModel:
    """Initialise a joint model; unshared branches draw from independent child seeds."""
    enc = enc.resolved()
    seeds = np.random.SeedSequence(seed).generate_state(2, dtype=np.uint64)
    branches = []
    for s in seeds[: 1 if shared else 2]:
        g = torch.Generator().manual_seed(int(s) & 0x7FFF_FFFF_FFFF_FFFF)
        e = build_encoder(enc, g)
        branches.append(Branch(e, build_expander(enc.embedding_dim, exp, g)))
    return JointModel(enc, exp, asymmetric, shared, branches[0], branches[-1])


def encoder_forward(encoder: nn.Module, batch) -> torch.Tensor:
    """Embeddings for an image batch in inference mode."""
    x = to_tensor(batch, next(encoder.parameters()).dtype)
    expected = getattr(encoder, "input_px", None)
    if x.shape[1] != 3:
        raise ValidationError(f"expected 3 channels, got {x.shape[1]}")
    if expected is not None and tuple(x.shape[2:]) != (expected, expected):
        raise ValidationError(f"expected {expected}x{expected} inputs, got {tuple(x.shape[2:])}")
    was_training = encoder.training
    encoder.eval()
    with torch.no_grad():
        out = encoder(x)
    encoder.train(was_training)
    return out


def expander_forward(expander: nn.Sequential, emb) -> torch.Tensor:
    emb = torch.as_tensor(emb)
    first = expander[0]
    if emb.dim() != 2 or emb.shape[1] != first.in_features:
        raise ValidationError(f"expander expects N x {first.in_features}, got {tuple(emb.shape)}")
    was_training = expander.training
    expander.eval()
    with torch.no_grad():
        out = expander(emb.to(first.weight.dtype))
    expander.train(was_training)
    return out


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def param_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter's bytes in registration order."""
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class ProbeHead:
    """Dense softmax classifier over frozen encoder embeddings."""

    weight: torch.Tensor  # D_enc x C
    bias: torch.Tensor  # C
    classes: list = field(default_factory=list)

    @classmethod
    def zeros(cls, in_dim: int, n_classes: int, dtype=torch.float32) -> "ProbeHead":
        return cls(torch.zeros(in_dim, n_classes, dtype=dtype), torch.zeros(n_classes, dtype=dtype), list(range(n_classes)))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def n_classes(self) -> int:
        return self.weight.shape[1]

    def logits(self, emb) -> torch.Tensor:
        emb = torch.as_tensor(emb, dtype=self.weight.dtype)
        if emb.dim() != 2 or emb.shape[1] != self.in_dim:
            raise ValidationError(f"probe expects N x {self.in_dim} embeddings, got {tuple(emb.shape)}")
        return emb @ self.weight + self.bias

    def state_dict(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}


def probe_forward(head: ProbeHead, emb) -> torch.Tensor:
    return torch.softmax(head.logits(emb), dim=1)


class SupervisedModel(nn.Module):
    """Encoder with a dense softmax head trained end to end."""

    def __init__(self, enc: EncoderSpec, n_classes: int, seed: int = 0):
        super().__init__()
        self.encoder_spec = enc.resolved()
        self.n_classes = n_classes
        g = torch.Generator().manual_seed(int(np.random.SeedSequence(seed).generate_state(1, dtype=np.uint64)[0]) & 0x7FFF_FFFF_FFFF_FFFF)
        self.encoder = build_encoder(self.encoder_spec, g)
        self.head = nn.Linear(self.encoder_spec.embedding_dim, n_classes)
        _init_params(self.head, g)

    def forward(self, x):
        return self.head(self.encoder(x))

    def spec_dict(self) -> dict:
        return {"encoder": self.encoder_spec.to_dict(), "n_classes": self.n_classes}

    def probe_head(self) -> ProbeHead:
        return ProbeHead(self.head.weight.detach().T.clone(), self.head.bias.detach().clone(), list(range(self.n_classes)))
