"""Gradient-check suites shared by the CLI and the test-suite.

Every suite builds a small random instance (4^3 volumes, K=3), contracts the
output with a fixed random tensor, and compares
reverse-mode gradients with central differences.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Graph, GradcheckReport, gradcheck, ops
from .encoder import BlockConfig, rep3d_block_forward
from .lrbm import GeneratorConfig, distance_map, init_generator, mask_graph
from .tensor import make_rng

SCOPES = ("conv", "lrbm", "block")


def _check(g: Graph, y, rng, tol, h) -> GradcheckReport:
    # loss = sum(r * y) for a fixed random r
    return gradcheck(g, y, tol, h, seed=rng.standard_normal(y.value.shape))


def gradcheck_conv(seed: int = 0, tol: float = 1e-6, h: float = 1e-5, size: int = 4, k: int = 3) -> GradcheckReport:
    """Rows ``dX`` and ``dW`` for one depthwise convolution."""
    rng = make_rng(seed, 11)
    g = Graph()
    x = g.param("dX", rng.standard_normal((1, 2, size, size, size)))
    w = g.param("dW", rng.standard_normal((2, 1, k, k, k)))
    return _check(g, ops.dwconv3d(x, w), rng, tol, h)


def gradcheck_generator(seed: int = 0, tol: float = 1e-6, h: float = 1e-5, k: int = 3,
                        gen: GeneratorConfig = GeneratorConfig(zero_init=False)) -> GradcheckReport:
    """Prior + generator path: rows for ``beta`` and every generator tensor."""
    rng = make_rng(seed, 12)
    c = 2
    theta = init_generator(c, gen, seed=seed)
    g = Graph()
    beta = g.param("beta", np.asarray(0.5 + rng.uniform()))
    nodes = {}
    for i in range(theta.depth):
        nodes[f"conv{i}"] = g.param(f"gen.conv{i}", theta.convs[i])
        nodes[f"gain{i}"] = g.param(f"gen.gain{i}", 1.0 + 0.1 * rng.standard_normal(c))
        nodes[f"bias{i}"] = g.param(f"gen.bias{i}", 0.1 * rng.standard_normal(c))
    m = mask_graph(beta, nodes, distance_map(k), c, theta.depth)
    return _check(g, m, rng, tol, h)


def gradcheck_effective_kernel(seed: int = 0, tol: float = 1e-6, h: float = 1e-5,
                               size: int = 4, k: int = 3) -> GradcheckReport:
    """Product rule through ``dwconv3d(x, W * M)``: rows ``W`` and ``M``."""
    rng = make_rng(seed, 13)
    g = Graph()
    x = g.const(rng.standard_normal((1, 2, size, size, size)))
    w = g.param("W", rng.standard_normal((2, 1, k, k, k)))
    m = g.param("M", rng.uniform(0.1, 1.0, (2, 1, k, k, k)))
    return _check(g, ops.dwconv3d(x, ops.mul(w, m)), rng, tol, h)


def gradcheck_block(seed: int = 0, tol: float = 1e-6, h: float = 1e-5, size: int = 4, k: int = 3,
                    arm: str = "lrbm") -> GradcheckReport:
    """Full Rep3D block (norm, masked depthwise conv, GELU) including its input."""
    rng = make_rng(seed, 14)
    c = 2
    cfg = BlockConfig(c, k, arm=arm, generator=GeneratorConfig(zero_init=False))
    g = Graph()
    nodes = {
        "b.norm.gain": g.param("b.norm.gain", 1.0 + 0.1 * rng.standard_normal(c)),
        "b.norm.bias": g.param("b.norm.bias", 0.1 * rng.standard_normal(c)),
        "b.w": g.param("b.w", rng.standard_normal((c, 1, k, k, k)) / np.sqrt(k**3)),
    }
    if arm in ("fixed", "lrbm"):
        nodes["b.beta"] = g.param("b.beta", np.asarray(0.5 + rng.uniform()))
    if arm == "lrbm":
        theta = init_generator(c, cfg.generator, seed=seed)
        for key, val in theta.as_dict(prefix="b.gen").items():
            nodes[key] = g.param(key, val)
    z = g.param("z", rng.standard_normal((1, c, size, size, size)))
    y = rep3d_block_forward(z, nodes, "b", cfg)
    return _check(g, y, rng, tol, h)


def run_scope(scope: str, seed: int = 0, tol: float = 1e-6, h: float = 1e-5) -> dict[str, GradcheckReport]:
    if scope not in SCOPES + ("all",):
        raise ValueError(f"unknown scope {scope!r}")
    out = {}
    if scope in ("conv", "all"):
        out["conv"] = gradcheck_conv(seed, tol, h)
    if scope in ("lrbm", "all"):
        out["lrbm.generator"] = gradcheck_generator(seed, tol, h)
        out["lrbm.effective_kernel"] = gradcheck_effective_kernel(seed, tol, h)
    if scope in ("block", "all"):
        out["block"] = gradcheck_block(seed, tol, h)
    return out
