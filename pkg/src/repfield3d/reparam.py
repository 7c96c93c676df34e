"""Two-branch large+small kernel blocks and their single-operator equivalents.

A CSLA block computes ``alpha_L (x * W_L) + alpha_S (x * W_S)``.  By
bilinearity it equals a single convolution with the merged kernel
``W' = alpha_L W_L + alpha_S embed(W_S)``.  Training the branches separately
with step sizes ``lambda_L``/``lambda_S`` moves ``W'`` exactly like plain SGD
on ``W'`` with a per-offset step field::

    periphery: lambda_L alpha_L^2
    center:    lambda_L alpha_L^2 + lambda_S alpha_S^2

(The second entry of ``FIELD_CONVENTIONS`` gives the alpha-linear variant
instead, which coincides with the exact field only when both alphas are 1.)

Under Adam the branch scale cancels from each branch's own step, but the
merged kernel still sees the sum of two steps on the small kernel's support.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .autodiff import Graph, Node, backward, ops
from .conv3d import check_kernel, dwconv3d, embed_kernel, support_mask
from .tensor import as_tensor, check_finite, make_rng

FIELD_CONVENTIONS = ("derived-alpha-squared", "as-written-eq11")
OPTIMIZERS = ("sgd", "adamw")

LossFn = Callable[[Node], Node]


@dataclass(frozen=True)
class CSLAConfig:
    alpha_l: float = 1.0
    alpha_s: float = 1.0
    lambda_l: float = 0.0002
    lambda_s: float = 0.0006
    k_l: int = 7
    k_s: int = 3
    optimizer: str = "sgd"
    field_convention: str = "derived-alpha-squared"

    def __post_init__(self):
        # alpha_s == 0 is allowed as the "branch off" degenerate case
        if self.alpha_l < 0 or self.alpha_s < 0:
            raise ValueError("branch scales must be non-negative")
        if self.lambda_l < 0 or self.lambda_s < 0:
            raise ValueError("step sizes must be non-negative")
        for k in (self.k_l, self.k_s):
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd and positive, got {k}")
        if self.k_s > self.k_l:
            raise ValueError("small kernel cannot exceed large kernel")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.field_convention not in FIELD_CONVENTIONS:
            raise ValueError(f"field_convention must be one of {FIELD_CONVENTIONS}")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.08

    @classmethod
    def zeros_like(cls, p, **kw) -> "AdamState":
        p = as_tensor(p)
        return cls(np.zeros_like(p), np.zeros_like(p), **kw)


@dataclass
class CSLAState:
    w_l: np.ndarray
    w_s: np.ndarray
    step: int = 0
    opt_l: AdamState | None = None
    opt_s: AdamState | None = None

    def check(self, cfg: CSLAConfig) -> None:
        if check_kernel(self.w_l) != cfg.k_l or check_kernel(self.w_s) != cfg.k_s:
            raise ValueError("kernel sizes do not match config")
        if self.w_l.shape[0] != self.w_s.shape[0]:
            raise ValueError("branch channel counts differ")


def init_state(cfg: CSLAConfig, channels: int, seed: int, std: float = 0.1) -> CSLAState:
    rng = make_rng(seed)
    w_l = std * rng.standard_normal((channels, 1) + (cfg.k_l,) * 3)
    w_s = std * rng.standard_normal((channels, 1) + (cfg.k_s,) * 3)
    return CSLAState(w_l, w_s)


# -- forward / merge ----------------------------------------------------------


def csla_forward(x, s: CSLAState, cfg: CSLAConfig) -> np.ndarray:
    s.check(cfg)
    return check_finite(cfg.alpha_l * dwconv3d(x, s.w_l) + cfg.alpha_s * dwconv3d(x, s.w_s))


def csla_graph(x: Node, w_l: Node, w_s: Node, cfg: CSLAConfig) -> Node:
    return ops.scale(ops.dwconv3d(x, w_l), cfg.alpha_l) + ops.scale(ops.dwconv3d(x, w_s), cfg.alpha_s)


def merge_so(s: CSLAState, cfg: CSLAConfig) -> np.ndarray:
    """Single-operator kernel ``alpha_L W_L + alpha_S embed(W_S, K_L)``."""
    s.check(cfg)
    return cfg.alpha_l * s.w_l + cfg.alpha_s * embed_kernel(s.w_s, cfg.k_l)


def so_forward(x, w_prime) -> np.ndarray:
    return dwconv3d(x, w_prime)


# -- losses and gradients -----------------------------------------------------


def squared_error_loss(target) -> LossFn:
    """``0.5 * sum((y - target)^2)``."""
    target = as_tensor(target)

    def loss(y: Node) -> Node:
        return ops.scale(ops.sum(ops.square(y - target)), 0.5)

    return loss


def csla_grads(x, s: CSLAState, cfg: CSLAConfig, loss: LossFn) -> dict[str, np.ndarray]:
    g = Graph()
    wl, ws = g.param("w_l", s.w_l), g.param("w_s", s.w_s)
    out = loss(csla_graph(g.const(x), wl, ws, cfg))
    return backward(g, out)


def so_grad(x, w_prime, loss: LossFn) -> np.ndarray:
    g = Graph()
    w = g.param("w", w_prime)
    out = loss(ops.dwconv3d(g.const(x), w))
    return backward(g, out)["w"]


# -- SGD dynamics -------------------------------------------------------------


def branch_sgd_step(s: CSLAState, grads: dict[str, np.ndarray], cfg: CSLAConfig) -> CSLAState:
    """Independent SGD on each branch with its own step size."""
    try:
        g_l, g_s = grads["w_l"], grads["w_s"]
    except KeyError as exc:
        raise KeyError(f"missing gradient {exc.args[0]!r}") from None
    return replace(
        s,
        w_l=s.w_l - cfg.lambda_l * g_l,
        w_s=s.w_s - cfg.lambda_s * g_s,
        step=s.step + 1,
    )


def composed_update_oracle(x, s: CSLAState, cfg: CSLAConfig, loss: LossFn) -> np.ndarray:
    """Brute force: take one branch step, then merge.  Returns ``W'(t+1)``."""
    return merge_so(branch_sgd_step(s, csla_grads(x, s, cfg, loss), cfg), cfg)


def composed_update(x, s: CSLAState, cfg: CSLAConfig, loss: LossFn) -> np.ndarray:
    """Assembled form ``W'(t) - lambda_L alpha_L g_L - lambda_S alpha_S embed(g_S)``."""
    grads = csla_grads(x, s, cfg, loss)
    return (
        merge_so(s, cfg)
        - cfg.lambda_l * cfg.alpha_l * grads["w_l"]
        - cfg.lambda_s * cfg.alpha_s * embed_kernel(grads["w_s"], cfg.k_l)
    )


def effective_lr_field(cfg: CSLAConfig) -> np.ndarray:
    """Per-offset step size on the merged kernel, shape ``(K_L, K_L, K_L)``."""
    center = support_mask(cfg.k_l, cfg.k_s)
    if cfg.field_convention == "derived-alpha-squared":
        peri = cfg.lambda_l * cfg.alpha_l**2
        extra = cfg.lambda_s * cfg.alpha_s**2
    else:
        peri = cfg.lambda_l * cfg.alpha_l
        extra = cfg.lambda_s * cfg.alpha_s
    return np.where(center, peri + extra, peri).astype(np.float64)


def equal_rate_field(cfg: CSLAConfig) -> np.ndarray:
    """The ``lambda_L == lambda_S == lambda`` case built directly as
    ``lambda (alpha_L^2 + alpha_S^2 1_S)``."""
    if cfg.lambda_l != cfg.lambda_s:
        raise ValueError("equal-rate field requires lambda_l == lambda_s")
    ind = support_mask(cfg.k_l, cfg.k_s).astype(np.float64)
    return cfg.lambda_l * (cfg.alpha_l**2 + cfg.alpha_s**2 * ind)


def so_grad_reparam_step(w_prime, grad, lr_field) -> np.ndarray:
    """``W' - field * grad`` with the field broadcast over channels."""
    w_prime, grad, lr_field = as_tensor(w_prime), as_tensor(grad), as_tensor(lr_field)
    if w_prime.shape != grad.shape:
        raise ValueError(f"shape mismatch: {w_prime.shape} vs {grad.shape}")
    if lr_field.ndim == 3:
        lr_field = lr_field.reshape((1, 1) + lr_field.shape)
    if lr_field.shape[2:] != w_prime.shape[2:]:
        raise ValueError(f"field shape {lr_field.shape[2:]} does not match kernel {w_prime.shape[2:]}")
    return check_finite(w_prime - lr_field * grad)


@dataclass
class TrajectoryReport:
    forward_diff: float
    kernel_diffs: list[float] = field(default_factory=list)

    @property
    def max_kernel_diff(self) -> float:
        return max(self.kernel_diffs, default=0.0)


def trajectory_equivalence(x, s: CSLAState, cfg: CSLAConfig, loss: LossFn, steps: int = 10) -> TrajectoryReport:
    """Run the two-branch block and the single operator side by side.

    Records the forward mismatch at the start and ``max |W'_csla - W'_so|``
    after every step.
    """
    lr_field = effective_lr_field(cfg)
    w_so = merge_so(s, cfg)
    rep = TrajectoryReport(float(np.max(np.abs(csla_forward(x, s, cfg) - so_forward(x, w_so)))))
    for _ in range(steps):
        s = branch_sgd_step(s, csla_grads(x, s, cfg, loss), cfg)
        w_so = so_grad_reparam_step(w_so, so_grad(x, w_so, loss), lr_field)
        rep.kernel_diffs.append(float(np.max(np.abs(merge_so(s, cfg) - w_so))))
    return rep


# -- Adam ---------------------------------------------------------------------


def adamw_step(p, grad, st: AdamState, lr: float = 1e-4) -> tuple[np.ndarray, AdamState]:
    """One AdamW step with bias correction and decoupled weight decay."""
    p, grad = as_tensor(p), as_tensor(grad)
    if p.shape != grad.shape or st.m.shape != p.shape:
        raise ValueError("parameter, gradient and state shapes must match")
    st = adam_moments(grad, st)
    new_p = p - lr * st.weight_decay * p - lr * adam_direction(st)
    return check_finite(new_p, "adamw"), st


def adam_moments(grad, st: AdamState) -> AdamState:
    """Advance the moment estimates by one gradient."""
    m = st.beta1 * st.m + (1.0 - st.beta1) * grad
    v = st.beta2 * st.v + (1.0 - st.beta2) * grad * grad
    return replace(st, m=m, v=v, t=st.t + 1)


def adam_direction(st: AdamState) -> np.ndarray:
    """Bias-corrected ``m_hat / (sqrt(v_hat) + eps)`` for the current state."""
    m_hat = st.m / (1.0 - st.beta1**st.t)
    v_hat = st.v / (1.0 - st.beta2**st.t)
    return m_hat / (np.sqrt(v_hat) + st.eps)


@dataclass
class ScaleInvarianceReport:
    alpha: float
    eps: float
    steps: int
    max_rel_deviation: float


def adam_scale_invariance_check(
    grads: Sequence[np.ndarray], alpha: float, eps: float = 1e-8, lr: float = 1e-4
) -> ScaleInvarianceReport:
    """Feed ``g_t`` and ``alpha * g_t`` to two Adam chains; compare their steps.

    Weight decay is off, so each step is ``-lr * m_hat / (sqrt(v_hat) + eps)``.
    Steps are compared directly rather than as differences of accumulated
    parameters, whose rounding would swamp near-zero steps.  Elements whose
    reference step is exactly zero are skipped.
    """
    grads = [as_tensor(g) for g in grads]
    if not grads:
        raise ValueError("empty gradient sequence")
    st_u = AdamState.zeros_like(grads[0], eps=eps, weight_decay=0.0)
    st_s = AdamState.zeros_like(grads[0], eps=eps, weight_decay=0.0)
    worst = 0.0
    for g in grads:
        st_u, st_s = adam_moments(g, st_u), adam_moments(alpha * g, st_s)
        du, ds = -lr * adam_direction(st_u), -lr * adam_direction(st_s)
        ok = du != 0
        if np.any(ok):
            worst = max(worst, float(np.max(np.abs(ds[ok] - du[ok]) / np.abs(du[ok]))))
    return ScaleInvarianceReport(alpha, eps, len(grads), worst)


def branch_adamw_step(s: CSLAState, grads: dict[str, np.ndarray], cfg: CSLAConfig,
                      weight_decay: float = 0.08) -> CSLAState:
    """Per-branch AdamW with separate moments and branch rates as peak LR."""
    opt_l = s.opt_l or AdamState.zeros_like(s.w_l, weight_decay=weight_decay)
    opt_s = s.opt_s or AdamState.zeros_like(s.w_s, weight_decay=weight_decay)
    w_l, opt_l = adamw_step(s.w_l, grads["w_l"], opt_l, cfg.lambda_l)
    w_s, opt_s = adamw_step(s.w_s, grads["w_s"], opt_s, cfg.lambda_s)
    return CSLAState(w_l, w_s, s.step + 1, opt_l, opt_s)


def csla_adam_run(x, s: CSLAState, cfg: CSLAConfig, loss: LossFn, steps: int,
                  weight_decay: float = 0.08) -> list[np.ndarray]:
    """Train with per-branch AdamW; return merged kernels ``W'(0..steps)``."""
    kernels = [merge_so(s, cfg)]
    for _ in range(steps):
        s = branch_adamw_step(s, csla_grads(x, s, cfg, loss), cfg, weight_decay)
        kernels.append(merge_so(s, cfg))
    return kernels


@dataclass
class StepRatioReport:
    central_mean_step: float
    peripheral_mean_step: float
    ratio: float
    note: str = ""


def central_peripheral_step_ratio(kernels: Sequence[np.ndarray], cfg: CSLAConfig) -> StepRatioReport:
    """Mean ``|delta W'|`` on the small kernel's support versus the rest."""
    if cfg.k_s == cfg.k_l:
        return StepRatioReport(float("nan"), float("nan"), float("nan"), "full-support overlap: no periphery")
    center = support_mask(cfg.k_l, cfg.k_s)
    deltas = np.abs(np.diff(np.stack(kernels), axis=0))  # (T, C, 1, K, K, K)
    cen = float(deltas[..., center].mean())
    per = float(deltas[..., ~center].mean())
    ratio = cen / per if per > 0 else float("inf")
    return StepRatioReport(cen, per, ratio)
