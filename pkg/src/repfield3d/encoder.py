"""Toy Rep3D encoder and a synthetic sphere-segmentation task.

Each Rep3D block is ``GELU(DWConv(Norm(z)))`` where the depthwise kernel is
``W`` (vanilla arm), ``W * P`` (fixed prior) or ``W * M`` (learnable mask).
``Norm`` is per-sample, per-channel normalization over the spatial axes with a
per-channel affine; at batch size 1 it coincides with batch normalization.

The network is a stride-2 patch stem, stages of Rep3D blocks separated by
stride-2 patch downsampling, and a minimal head: nearest-neighbour upsampling
back to the input grid followed by a 1x1x1 conv to logits.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Graph, Node, backward, ops
from .lrbm import BETA_INIT, GeneratorConfig, distance_map, init_generator, mask_graph, prior_graph
from .reparam import AdamState, adamw_step
from .tensor import LN_EPS, NonFiniteError, load_rt3d, make_rng, save_rt3d, sigmoid

ARMS = ("vanilla", "fixed", "lrbm", "folded")
DICE_SMOOTH = 1e-5


@dataclass(frozen=True)
class BlockConfig:
    channels: int
    kernel_size: int = 7
    norm_eps: float = LN_EPS
    arm: str = "lrbm"
    generator: GeneratorConfig = GeneratorConfig()

    def __post_init__(self):
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError(f"kernel size must be odd, got {self.kernel_size}")
        if self.arm not in ARMS:
            raise ValueError(f"arm must be one of {ARMS}, got {self.arm!r}")


@dataclass(frozen=True)
class EncoderConfig:
    stages: tuple[tuple[int, int], ...] = ((1, 8), (1, 16))  # (blocks, channels)
    kernel_size: int = 7
    arm: str = "lrbm"
    in_channels: int = 1
    out_channels: int = 1
    norm_eps: float = LN_EPS
    beta_init: float = BETA_INIT
    generator: GeneratorConfig = GeneratorConfig()

    def __post_init__(self):
        if not self.stages:
            raise ValueError("need at least one stage")
        if any(b < 1 or c < 1 for b, c in self.stages):
            raise ValueError(f"invalid stage layout {self.stages}")
        BlockConfig(self.stages[0][1], self.kernel_size, self.norm_eps, self.arm, self.generator)

    @property
    def downsample(self) -> int:
        return 2 ** len(self.stages)

    def block(self, stage: int) -> BlockConfig:
        return BlockConfig(self.stages[stage][1], self.kernel_size, self.norm_eps, self.arm, self.generator)

    def block_prefixes(self):
        for s, (nb, _) in enumerate(self.stages):
            for b in range(nb):
                yield s, f"s{s}.b{b}"


@dataclass
class Model:
    cfg: EncoderConfig
    params: dict[str, np.ndarray]
    trainable: tuple[str, ...]

    def parameter_count(self, trainable_only: bool = True) -> int:
        names = self.trainable if trainable_only else tuple(self.params)
        return sum(self.params[n].size for n in names)

    def lrbm_names(self) -> tuple[str, ...]:
        return tuple(n for n in self.trainable if n.endswith(".beta") or ".gen." in n)


def build_toy_encoder(cfg: EncoderConfig = EncoderConfig(), seed: int = 0) -> Model:
    """Initialize every tensor of the toy encoder from ``seed``.

    Shared tensors (stem, kernels, norms, head) are drawn identically for all
    arms so arms started from the same seed are paired.
    """
    rng = make_rng(seed, 1)
    k = cfg.kernel_size
    p: dict[str, np.ndarray] = {}

    def dense(name, shape, fan_in):
        p[name + ".w"] = rng.standard_normal(shape) / np.sqrt(fan_in)
        p[name + ".b"] = np.zeros(shape[0])

    c0 = cfg.stages[0][1]
    dense("stem", (c0, cfg.in_channels, 2, 2, 2), cfg.in_channels * 8)
    for s, (nb, c) in enumerate(cfg.stages):
        for b in range(nb):
            pre = f"s{s}.b{b}"
            p[pre + ".norm.gain"] = np.ones(c)
            p[pre + ".norm.bias"] = np.zeros(c)
            p[pre + ".w"] = rng.standard_normal((c, 1, k, k, k)) / np.sqrt(k**3)
        if s + 1 < len(cfg.stages):
            nxt = cfg.stages[s + 1][1]
            dense(f"down{s}", (nxt, c, 2, 2, 2), c * 8)
    c_last = cfg.stages[-1][1]
    p["head.w"] = rng.standard_normal((cfg.out_channels, c_last)) / np.sqrt(c_last)
    p["head.b"] = np.zeros(cfg.out_channels)

    if cfg.arm in ("fixed", "lrbm"):
        for i, (s, pre) in enumerate(cfg.block_prefixes()):
            p[pre + ".beta"] = np.asarray(float(cfg.beta_init))
            if cfg.arm == "lrbm":
                gen = init_generator(cfg.stages[s][1], cfg.generator, seed=int(make_rng(seed, 2, i).integers(2**32)))
                for key, val in gen.as_dict(prefix=pre + ".gen").items():
                    p[key] = val

    frozen = {n for n in p if n.endswith(".beta")} if cfg.arm == "fixed" else set()
    trainable = tuple(n for n in p if n not in frozen)
    return Model(cfg, p, trainable)


def analytic_parameter_count(cfg: EncoderConfig) -> int:
    """Closed-form trainable parameter count of :func:`build_toy_encoder`."""
    k3 = cfg.kernel_size**3
    kg3 = cfg.generator.kernel_size**3
    chans = [c for _, c in cfg.stages]
    total = cfg.in_channels * chans[0] * 8 + chans[0]
    for a, b in zip(chans, chans[1:]):
        total += a * b * 8 + b
    total += chans[-1] * cfg.out_channels + cfg.out_channels
    for nb, c in cfg.stages:
        per = c * k3 + 2 * c
        if cfg.arm == "lrbm":
            per += 1 + cfg.generator.depth * (c * kg3 + 2 * c)
        total += nb * per
    return total


# -- forward ------------------------------------------------------------------


def _generator_nodes(nodes: dict[str, Node], pre: str) -> dict[str, Node]:
    tag = pre + ".gen."
    return {n[len(tag):]: v for n, v in nodes.items() if n.startswith(tag)}


def block_kernel(nodes: dict[str, Node], pre: str, cfg: BlockConfig) -> Node:
    w = nodes[pre + ".w"]
    if cfg.arm in ("vanilla", "folded"):
        return w
    d = distance_map(cfg.kernel_size)
    if cfg.arm == "fixed":
        return ops.mul(w, prior_graph(nodes[pre + ".beta"], d, cfg.channels))
    theta = _generator_nodes(nodes, pre)
    return ops.mul(w, mask_graph(nodes[pre + ".beta"], theta, d, cfg.channels, cfg.generator.depth))


def rep3d_block_forward(z: Node, nodes: dict[str, Node], pre: str, cfg: BlockConfig) -> Node:
    """``GELU(dwconv(norm(z), kernel))`` with the arm's kernel parameterization."""
    if z.value.shape[1] != cfg.channels:
        raise ValueError(f"block expects {cfg.channels} channels, got {z.value.shape[1]}")
    h = ops.layer_norm(z, nodes[pre + ".norm.gain"], nodes[pre + ".norm.bias"], eps=cfg.norm_eps)
    return ops.gelu(ops.dwconv3d(h, block_kernel(nodes, pre, cfg)))


def encoder_graph(g: Graph, x: Node, model: Model, params: dict[str, np.ndarray] | None = None) -> Node:
    cfg = model.cfg
    params = model.params if params is None else params
    train = set(model.trainable)
    nodes = {n: (g.param(n, v) if n in train else g.const(v)) for n, v in params.items()}
    h = ops.patch_conv3d(x, nodes["stem.w"], nodes["stem.b"])
    for s, (nb, _) in enumerate(cfg.stages):
        for b in range(nb):
            h = rep3d_block_forward(h, nodes, f"s{s}.b{b}", cfg.block(s))
        if s + 1 < len(cfg.stages):
            h = ops.patch_conv3d(h, nodes[f"down{s}.w"], nodes[f"down{s}.b"])
    h = ops.upsample_nearest(h, cfg.downsample)
    return ops.pointwise_conv3d(h, nodes["head.w"], nodes["head.b"])


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    """Logits for a batch ``x`` of shape ``(N, C_in, D, H, W)``."""
    x = np.asarray(x, dtype=np.float64)
    if any(s % model.cfg.downsample for s in x.shape[2:]):
        raise ValueError(f"spatial dims must be divisible by {model.cfg.downsample}")
    g = Graph()
    return encoder_graph(g, g.const(x), model).value


def fold_model(model: Model) -> Model:
    """Replace each masked kernel with its frozen product and drop prior/generator."""
    cfg = model.cfg
    if cfg.arm in ("vanilla", "folded"):
        return Model(cfg, dict(model.params), model.trainable)
    g = Graph()
    nodes = {n: g.const(v) for n, v in model.params.items()}
    folded = {}
    for n, v in model.params.items():
        if n.endswith(".beta") or ".gen." in n:
            continue
        folded[n] = v
    for s, pre in cfg.block_prefixes():
        folded[pre + ".w"] = block_kernel(nodes, pre, cfg.block(s)).value.copy()
    fcfg = replace(cfg, arm="folded")
    return Model(fcfg, folded, tuple(folded))


# -- task -----------------------------------------------------------------------


@dataclass(frozen=True)
class ToyTask:
    size: int = 16
    n_spheres: int = 2
    radius_range: tuple[float, float] = (2.5, 4.5)
    noise: float = 0.3
    softness: float = 0.75
    batch: int = 1
    seed: int = 0
    balance_range: tuple[float, float] = (0.01, 0.35)

    def __post_init__(self):
        lo, hi = self.radius_range
        if not 0 < lo <= hi or 2 * hi >= self.size:
            raise ValueError(f"radius range {self.radius_range} does not fit a {self.size}^3 volume")


def synth_task_generate(t: ToyTask, stream: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Soft spheres plus Gaussian noise, and their binary masks.

    The intensity of a sphere is ``sigmoid((r - dist) / softness)``, so with no
    noise the label equals the volume thresholded at 0.5.
    """
    rng = make_rng(t.seed) if stream is None else make_rng(t.seed, stream)
    n = t.size
    grid = np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64),) * 3, indexing="ij"))
    vols = np.zeros((t.batch, 1, n, n, n))
    labels = np.zeros_like(vols)
    lo, hi = t.radius_range
    for b in range(t.batch):
        intensity = np.zeros((n, n, n))
        mask = np.zeros((n, n, n), dtype=bool)
        for _ in range(t.n_spheres):
            r = rng.uniform(lo, hi)
            c = rng.uniform(r, n - 1 - r, size=3)
            dist = np.sqrt(((grid - c.reshape(3, 1, 1, 1)) ** 2).sum(axis=0))
            intensity = np.maximum(intensity, sigmoid((r - dist) / t.softness))
            mask |= dist <= r
        vols[b, 0] = intensity + t.noise * rng.standard_normal((n, n, n))
        labels[b, 0] = mask
    return vols, labels


def soft_dice(pred, label, smooth: float = DICE_SMOOTH) -> float:
    pred, label = np.asarray(pred, dtype=np.float64), np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {label.shape}")
    inter = float((pred * label).sum())
    return (2.0 * inter + smooth) / (float(pred.sum()) + float(label.sum()) + smooth)


def soft_dice_graph(prob: Node, label: np.ndarray, smooth: float = DICE_SMOOTH) -> Node:
    inter = ops.sum(ops.mul(prob, label))
    den = ops.sum(prob) + float(label.sum()) + smooth
    return ops.div(ops.scale(inter, 2.0) + smooth, den)


def dice_loss_and_grads(model: Model, x: np.ndarray, label: np.ndarray):
    g = Graph()
    logits = encoder_graph(g, g.const(x), model)
    dice = soft_dice_graph(ops.sigmoid(logits), label)
    loss = 1.0 - dice
    return float(loss.value), float(dice.value), backward(g, loss, wrt=model.trainable)


# -- training -------------------------------------------------------------------


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    lrbm_lr: float | None = None  # LR for beta and generator; None -> lr
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.08


# The default peak LR (1e-4) barely moves a freshly initialized toy model in a
# few hundred steps; the toy runs use 1e-3 with the other AdamW settings kept.
TOY_OPTIM = OptimConfig(lr=1e-3)


@dataclass
class TrainCurve:
    arm: str
    seed: int
    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    dice: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    checkpoints: dict[int, float] = field(default_factory=dict)  # step -> eval dice
    diverged_at: int | None = None

    def final(self, tail: int = 50) -> tuple[float, float]:
        """Mean training loss and dice over the last ``tail`` records."""
        n = min(tail, len(self.loss))
        return float(np.mean(self.loss[-n:])), float(np.mean(self.dice[-n:]))

    def to_csv(self, path, wall_time: bool = False) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "dice", "wall_ms"])
            for s, lo, d, t in zip(self.steps, self.loss, self.dice, self.wall_ms):
                w.writerow([s, f"{lo:.12e}", f"{d:.12e}", f"{t:.3f}" if wall_time else ""])

    def checkpoints_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "eval_dice"])
            for s in sorted(self.checkpoints):
                w.writerow([s, f"{self.checkpoints[s]:.12e}"])


def evaluate(model: Model, task: ToyTask, n: int = 4) -> float:
    """Mean hard-free soft Dice over ``n`` held-out volumes (streams past 10^6)."""
    scores = []
    for i in range(n):
        x, y = synth_task_generate(task, stream=1_000_000 + i)
        scores.append(soft_dice(sigmoid(forward(model, x)), y))
    return float(np.mean(scores))


def train_toy(
    arm: str,
    steps: int,
    seed: int = 0,
    optim: OptimConfig = TOY_OPTIM,
    encoder: EncoderConfig = EncoderConfig(),
    task: ToyTask | None = None,
    checkpoints: tuple[int, ...] = (),
    eval_samples: int = 4,
    return_model: bool = False,
):
    """Train one arm with per-tensor AdamW on a fresh synthetic volume each step.

    Record ``t`` holds loss/dice of sample ``t`` after ``t`` updates, so
    ``steps=0`` yields only the initial loss.  Data depend on ``seed`` only, so
    arms with the same seed see identical volumes.
    """
    if arm not in ARMS[:3]:
        raise ValueError(f"arm must be one of {ARMS[:3]}, got {arm!r}")
    if steps < 0:
        raise ValueError("steps must be non-negative")
    task = replace(task or ToyTask(), seed=seed)
    model = build_toy_encoder(replace(encoder, arm=arm), seed)
    lrbm_names = set(model.lrbm_names())
    lrbm_lr = optim.lr if optim.lrbm_lr is None else optim.lrbm_lr
    opt = {
        n: AdamState.zeros_like(model.params[n], beta1=optim.beta1, beta2=optim.beta2,
                                eps=optim.eps, weight_decay=optim.weight_decay)
        for n in model.trainable
    }
    curve = TrainCurve(arm, seed)
    t0 = time.perf_counter()
    for t in range(steps + 1):
        if t in checkpoints:
            curve.checkpoints[t] = evaluate(model, task, eval_samples)
        x, y = synth_task_generate(task, stream=t)
        try:
            loss, dice, grads = dice_loss_and_grads(model, x, y)
        except NonFiniteError:
            curve.diverged_at = t
            break
        curve.steps.append(t)
        curve.loss.append(loss)
        curve.dice.append(dice)
        curve.wall_ms.append(1000.0 * (time.perf_counter() - t0))
        if t == steps:
            break
        for n in model.trainable:
            lr = lrbm_lr if n in lrbm_names else optim.lr
            model.params[n], opt[n] = adamw_step(model.params[n], grads[n], opt[n], lr)
    return (curve, model) if return_model else curve


# -- checkpoints ------------------------------------------------------------------


def _encoder_items(cfg: EncoderConfig) -> dict[str, str]:
    d = asdict(cfg)
    gen = d.pop("generator")
    d["stages"] = ";".join(f"{b}x{c}" for b, c in cfg.stages)
    d.update({f"generator_{k}": v for k, v in gen.items()})
    return {k: str(v) for k, v in d.items()}


def _encoder_from_items(items: dict[str, str]) -> EncoderConfig:
    stages = tuple(tuple(int(v) for v in part.split("x")) for part in items["stages"].split(";"))
    gen = GeneratorConfig(
        kernel_size=int(items["generator_kernel_size"]),
        depth=int(items["generator_depth"]),
        zero_init=items["generator_zero_init"] == "True",
    )
    return EncoderConfig(
        stages=stages,
        kernel_size=int(items["kernel_size"]),
        arm=items["arm"],
        in_channels=int(items["in_channels"]),
        out_channels=int(items["out_channels"]),
        norm_eps=float(items["norm_eps"]),
        beta_init=float(items["beta_init"]),
        generator=gen,
    )


def save_checkpoint(model: Model, directory) -> Path:
    """One ``.rt3d`` file per tensor plus a ``manifest.txt`` of ``key = value`` lines."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["# repfield3d checkpoint"]
    lines += [f"config.{k} = {v}" for k, v in _encoder_items(model.cfg).items()]
    for n in model.params:
        fname = n + ".rt3d"
        save_rt3d(directory / fname, model.params[n])
        role = "trainable" if n in model.trainable else "frozen"
        lines.append(f"tensor.{n} = {fname} {role}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
    return directory


def load_checkpoint(directory) -> Model:
    directory = Path(directory)
    items, params, trainable = {}, {}, []
    for raw in (directory / "manifest.txt").read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, val = (s.strip() for s in line.partition("="))
        if key.startswith("config."):
            items[key[len("config."):]] = val
        elif key.startswith("tensor."):
            fname, role = val.split()
            name = key[len("tensor."):]
            params[name] = load_rt3d(directory / fname)
            if role == "trainable":
                trainable.append(name)
    return Model(_encoder_from_items(items), params, tuple(trainable))
