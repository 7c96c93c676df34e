"""Learnable spatial prior for large depthwise kernels.

The prior is a reciprocal distance decay over kernel offsets,
``P = beta / (d + beta)`` with ``d`` the Euclidean distance to the kernel
center.  A small depthwise generator ``f`` (conv -> layer norm -> sigmoid ->
conv -> layer norm, acting on the ``K^3`` kernel grid) produces a residual, so
the modulation mask is ``M = P + f(P)`` and the trained kernel is
``W_eff = W * M``.  Since ``dL/dW = M * dL/dW_eff``, the mask acts as a
per-element gradient scale.

After training the mask is folded into the kernel and the generator and prior
are dropped.

``beta`` is evaluated through a floor, ``max(beta, 1e-6)``, so that a
zero-initialized ``beta`` still yields ``P(center) == 1``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Node, ops
from .conv3d import check_kernel
from .tensor import as_tensor, check_finite, make_rng

BETA_FLOOR = 1e-6
BETA_INIT = 1e-3


def distance_map(k: int) -> np.ndarray:
    """Euclidean distance of every offset in a ``k^3`` grid to its center."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    c = (k - 1) // 2
    i = np.arange(k, dtype=np.float64) - c
    return np.sqrt(i[:, None, None] ** 2 + i[None, :, None] ** 2 + i[None, None, :] ** 2)


def effective_beta(beta: float, floor: float = BETA_FLOOR) -> float:
    return max(float(beta), floor)


@dataclass
class PriorState:
    beta: float
    P: np.ndarray


def prior_mask(d, beta: float, channels: int, floor: float = BETA_FLOOR) -> PriorState:
    """Reciprocal decay ``beta / (d + beta)`` broadcast to ``(C, 1, K, K, K)``."""
    d = as_tensor(d)
    b = effective_beta(beta, floor)
    p = b / (d + b)
    return PriorState(float(beta), np.broadcast_to(p, (channels, 1) + d.shape).copy())


def prior_graph(beta: Node, d, channels: int, floor: float = BETA_FLOOR) -> Node:
    """Differentiable prior; ``beta`` is a scalar node."""
    d = np.broadcast_to(as_tensor(d), (channels, 1) + as_tensor(d).shape).copy()
    b = ops.clamp_min(beta, floor)
    return ops.div(b, ops.add(d, b))


# -- generator ----------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    kernel_size: int = 7
    depth: int = 2
    zero_init: bool = True

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("generator kernel size must be odd")
        if not 1 <= self.depth <= 3:
            raise ValueError("generator depth must be 1, 2 or 3")


@dataclass
class GeneratorParams:
    convs: list[np.ndarray]
    gains: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def depth(self) -> int:
        return len(self.convs)

    @property
    def channels(self) -> int:
        return self.convs[0].shape[0]

    def as_dict(self, prefix: str = "gen") -> dict[str, np.ndarray]:
        out = {}
        for i, (w, g, b) in enumerate(zip(self.convs, self.gains, self.biases)):
            out[f"{prefix}.conv{i}"] = w
            out[f"{prefix}.gain{i}"] = g
            out[f"{prefix}.bias{i}"] = b
        return out

    @classmethod
    def from_dict(cls, d: dict[str, np.ndarray], prefix: str = "gen") -> "GeneratorParams":
        depth = sum(1 for k in d if k.startswith(f"{prefix}.conv"))
        return cls(
            [d[f"{prefix}.conv{i}"] for i in range(depth)],
            [d[f"{prefix}.gain{i}"] for i in range(depth)],
            [d[f"{prefix}.bias{i}"] for i in range(depth)],
        )

    def parameter_count(self) -> int:
        return sum(a.size for a in self.convs + self.gains + self.biases)


def init_generator(channels: int, cfg: GeneratorConfig = GeneratorConfig(), seed: int = 0) -> GeneratorParams:
    """Random inner layers; with ``zero_init`` the last conv is zero.

    Biases start at zero and gains at one, so for depth >= 2 the generator's
    output is exactly zero and ``M == P`` before the first update.  A depth-1
    generator ends in a sigmoid and outputs 0.5 instead.
    """
    rng = make_rng(seed)
    kg = cfg.kernel_size
    std = 1.0 / np.sqrt(kg**3)
    convs = [std * rng.standard_normal((channels, 1, kg, kg, kg)) for _ in range(cfg.depth)]
    if cfg.zero_init:
        convs[-1] = np.zeros_like(convs[-1])
    gains = [np.ones(channels) for _ in range(cfg.depth)]
    biases = [np.zeros(channels) for _ in range(cfg.depth)]
    return GeneratorParams(convs, gains, biases)


def generator_graph(p: Node, theta: dict[str, Node], depth: int) -> Node:
    """``Norm2(DConv2(sigmoid(Norm1(DConv1(P)))))`` over the kernel grid.

    Depth 1 is ``sigmoid(Norm1(DConv1(P)))``; depth 3 inserts another
    conv/norm/sigmoid stage before the last conv.
    """
    shape = p.value.shape
    c, k = shape[0], shape[2]
    h = ops.reshape(p, (1, c, k, k, k))
    for i in range(depth):
        h = ops.dwconv3d(h, theta[f"conv{i}"])
        h = ops.layer_norm(h, theta[f"gain{i}"], theta[f"bias{i}"])
        if i < depth - 1 or depth == 1:
            h = ops.sigmoid(h)
    return ops.reshape(h, shape)


def _theta_nodes(g: Graph, theta: GeneratorParams, prefix: str | None) -> dict[str, Node]:
    raw = theta.as_dict(prefix="")
    nodes = {}
    for key, val in raw.items():
        short = key.lstrip(".")
        nodes[short] = g.param(f"{prefix}.{short}", val) if prefix else g.const(val)
    return nodes


def generator_forward(P, theta: GeneratorParams) -> np.ndarray:
    P = as_tensor(P)
    check_kernel(P)
    if theta.channels != P.shape[0]:
        raise ValueError(f"generator has {theta.channels} channels, prior has {P.shape[0]}")
    g = Graph()
    return generator_graph(g.const(P), _theta_nodes(g, theta, None), theta.depth).value


# -- mask and kernel ----------------------------------------------------------


@dataclass
class ModulationMask:
    M: np.ndarray
    mode: str = "training"


def modulation_mask(ps: PriorState, theta: GeneratorParams | None) -> ModulationMask:
    """``M = P + f(P)``; with no generator the mask is the prior itself."""
    if theta is None:
        return ModulationMask(ps.P.copy())
    return ModulationMask(check_finite(ps.P + generator_forward(ps.P, theta), "mask"))


def mask_graph(beta: Node, theta: dict[str, Node] | None, d, channels: int, depth: int = 2) -> Node:
    p = prior_graph(beta, d, channels)
    if theta is None:
        return p
    return ops.add(p, generator_graph(p, theta, depth))


def effective_kernel(w, m) -> np.ndarray:
    w = as_tensor(w)
    m = as_tensor(m.M if isinstance(m, ModulationMask) else m)
    if w.shape != m.shape:
        raise ValueError(f"shape mismatch: {w.shape} vs {m.shape}")
    return check_finite(w * m, "effective kernel")


@dataclass
class FoldedKernel:
    """Inference-time kernel ``W * M``; carries no prior or generator."""

    weights: np.ndarray
    generator: None = field(default=None, repr=False)

    def parameter_count(self) -> int:
        return self.weights.size

    @property
    def generator_parameter_count(self) -> int:
        return 0


def fold_for_inference(w, m) -> FoldedKernel:
    return FoldedKernel(effective_kernel(w, m))


def write_offsets_csv(path, d, P, M=None, channel: int = 0) -> None:
    """One row per kernel offset: ``x, y, z, f_d, P, M`` (channel ``channel``)."""
    d = as_tensor(d)
    P = as_tensor(P)[channel, 0]
    M = P if M is None else as_tensor(M)[channel, 0]
    k = d.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z", "f_d", "P", "M"])
        for x in range(k):
            for y in range(k):
                for z in range(k):
                    w.writerow([x, y, z] + [f"{v:.12e}" for v in (d[x, y, z], P[x, y, z], M[x, y, z])])
