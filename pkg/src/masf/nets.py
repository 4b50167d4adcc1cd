"""Functional network definitions: feature extractor, task head, metric net.

Networks are plain functions applied to explicit parameter sets, so an
inner-updated copy of the parameters can be used alongside the originals
without mutation. All forward passes build autodiff graphs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Expr, GradMap

MAGIC = b"MASF1"

FEATURE_EXTRACTOR = "feature_extractor"
TASK_NET = "task_net"
METRIC_NET = "metric_net"


@dataclass(frozen=True)
class Architecture:
    """Layer sizes for the three sub-networks."""

    input_dim: int
    num_classes: int
    feature_widths: tuple[int, ...] = (64, 32)
    metric_widths: tuple[int, ...] = (32, 16)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        widths = (self.input_dim, *self.feature_widths, *self.metric_widths)
        if any(w < 1 for w in widths):
            raise ValueError("all layer widths must be >= 1")

    @property
    def feature_dim(self) -> int:
        return self.feature_widths[-1]

    @property
    def embed_dim(self) -> int:
        return self.metric_widths[-1]


@dataclass
class ParamSet:
    """Named, ordered parameter tensors for one network."""

    role: str
    entries: list[tuple[str, Expr]] = field(default_factory=list)

    def __post_init__(self):
        names = [n for n, _ in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")

    @property
    def tensors(self) -> list[Expr]:
        return [t for _, t in self.entries]

    def __getitem__(self, name: str) -> Expr:
        for n, t in self.entries:
            if n == name:
                return t
        raise KeyError(name)

    def replace(self, new_tensors: list[Expr]) -> "ParamSet":
        """New ParamSet with the same names; shapes must match."""
        if len(new_tensors) != len(self.entries):
            raise ValueError("tensor count mismatch")
        entries = []
        for (name, old), new in zip(self.entries, new_tensors):
            if new.shape != old.shape:
                raise ValueError(f"shape mismatch for {name}")
            entries.append((name, new))
        return ParamSet(self.role, entries)

    def values(self) -> list[np.ndarray]:
        return [t.value for t in self.entries]

    def detached(self) -> "ParamSet":
        """Copy whose tensors are fresh leaves (cuts graph history)."""
        return self.replace([ad.leaf(t.value) for t in self.tensors])


def _mlp_params(rng: np.random.Generator, role: str, dims: list[int]) -> ParamSet:
    entries = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        entries.append((f"w{i}", ad.leaf(w)))
        entries.append((f"b{i}", ad.leaf(np.zeros(fan_out))))
    return ParamSet(role, entries)


def init_params(arch: Architecture, seed: int) -> tuple[ParamSet, ParamSet, ParamSet]:
    """He-initialized weights (gaussian, scaled by fan-in), zero biases."""
    rng = np.random.default_rng(seed)
    psi = _mlp_params(rng, FEATURE_EXTRACTOR,
                      [arch.input_dim, *arch.feature_widths])
    theta = _mlp_params(rng, TASK_NET, [arch.feature_dim, arch.num_classes])
    phi = _mlp_params(rng, METRIC_NET, [arch.feature_dim, *arch.metric_widths])
    return psi, theta, phi


def _affine(params: ParamSet, i: int, x: Expr) -> Expr:
    return ad.add(ad.matmul(x, params[f"w{i}"]), params[f"b{i}"])


def _n_layers(params: ParamSet) -> int:
    return len(params.entries) // 2


def feature_forward(psi: ParamSet, x: Expr) -> Expr:
    """MLP with ReLU after every layer (including the last)."""
    if psi.role != FEATURE_EXTRACTOR:
        raise ValueError("expected feature-extractor parameters")
    h = x
    for i in range(_n_layers(psi)):
        h = ad.relu(_affine(psi, i, h))
    return h


def task_forward(theta: ParamSet, z: Expr) -> Expr:
    """Single linear layer producing unnormalized logits."""
    if theta.role != TASK_NET:
        raise ValueError("expected task-net parameters")
    return _affine(theta, 0, z)


def metric_forward(phi: ParamSet, z: Expr) -> Expr:
    """Two-layer MLP, linear final layer, rows L2-normalized."""
    if phi.role != METRIC_NET:
        raise ValueError("expected metric-net parameters")
    n = _n_layers(phi)
    h = z
    for i in range(n - 1):
        h = ad.relu(_affine(phi, i, h))
    e = _affine(phi, n - 1, h)
    norms = ad.sqrt(ad.reduce_sum(ad.square(e), axis=1))
    return ad.div(e, ad.reshape(norms, (e.shape[0], 1)))


def sgd_step(params: ParamSet, grads: GradMap, lr: float) -> ParamSet:
    """One gradient step as graph nodes, differentiable w.r.t. the originals."""
    new = []
    for _, t in params.entries:
        if t not in grads:
            raise KeyError("missing gradient entry for parameter")
        new.append(ad.sub(t, ad.mul(ad.const(lr), grads[t])))
    return params.replace(new)


# ---------------------------------------------------------------------------
# flat binary serialization: magic, int32 dims, little-endian float64 payload


def save_params(params: ParamSet, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<i", len(params.entries)))
        for name, t in params.entries:
            shape = t.shape
            f.write(struct.pack("<i", len(shape)))
            f.write(struct.pack(f"<{len(shape)}i", *shape))
        for _, t in params.entries:
            f.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())


def load_params(path: str | Path, role: str,
                names: list[str] | None = None) -> ParamSet:
    with open(path, "rb") as f:
        if f.read(5) != MAGIC:
            raise ValueError(f"{path}: bad magic, not a parameter file")
        (n_entries,) = struct.unpack("<i", f.read(4))
        shapes = []
        for _ in range(n_entries):
            (ndim,) = struct.unpack("<i", f.read(4))
            shapes.append(struct.unpack(f"<{ndim}i", f.read(4 * ndim)))
        entries = []
        for i, shape in enumerate(shapes):
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape)
            name = names[i] if names else (f"w{i // 2}" if i % 2 == 0 else f"b{i // 2}")
            entries.append((name, ad.leaf(data)))
    return ParamSet(role, entries)
