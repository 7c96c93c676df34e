"""Command-line entry point: ``repfield3d <command> [flags]``.

Every command accepts ``--config FILE`` (flat ``key = value`` lines, ``#``
comments; keys are the long flag names with dashes or underscores) and
``--out DIR`` (default ``$REPFIELD3D_OUT`` or ``./out``).  Flags override the
file.  Each run writes ``manifest.txt`` with the resolved configuration.

Exit codes: 0 pass, 1 verification failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .autodiff import Graph, ops
from .checks import run_scope
from .conv3d import delta_kernel
from .encoder import (
    EncoderConfig,
    OptimConfig,
    ToyTask,
    fold_model,
    forward,
    load_checkpoint,
    rep3d_block_forward,
    save_checkpoint,
    train_toy,
)
from .erf import brute_force_support, erf_accumulate, erf_support, export_slices, mass_radius, support_mask_of
from .lrbm import GeneratorConfig, distance_map, init_generator, modulation_mask, prior_mask, write_offsets_csv
from .reparam import CSLAConfig, effective_lr_field, init_state, squared_error_loss, trajectory_equivalence
from .tensor import RNG_ALGORITHM, make_rng, save_rt3d

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Opt:
    name: str
    type: Callable[[str], Any]
    default: Any
    help: str
    choices: tuple | None = None

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")


def _bool(s: str) -> bool:
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(s).replace(";", ",").split(",") if v.strip())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(s).replace(";", ",").split(",") if v.strip())


_CSLA_OPTS = [
    Opt("k-l", int, 7, "large kernel size (odd)"),
    Opt("k-s", int, 3, "small kernel size (odd)"),
    Opt("alpha-l", float, 1.0, "large-branch scale"),
    Opt("alpha-s", float, 1.0, "small-branch scale"),
    Opt("lambda-l", float, 0.0002, "large-branch step size"),
    Opt("lambda-s", float, 0.0006, "small-branch step size"),
    Opt("field-convention", str, "derived-alpha-squared", "effective field convention",
        ("derived-alpha-squared", "as-written-eq11")),
]

_TRAIN_OPTS = [
    Opt("steps", int, 600, "training steps"),
    Opt("seeds", int, 1, "number of consecutive seeds starting at --seed"),
    Opt("lr", float, 1e-3, "AdamW learning rate"),
    Opt("lrbm-lr", float, None, "learning rate for beta and generator (default: --lr)"),
    Opt("weight-decay", float, 0.08, "decoupled weight decay"),
    Opt("k", int, 7, "Rep3D kernel size (odd)"),
    Opt("channels", _ints, (8, 16), "stage widths, comma separated"),
    Opt("blocks", _ints, (1, 1), "blocks per stage, comma separated"),
    Opt("size", int, 16, "toy volume edge length"),
    Opt("noise", float, 0.3, "toy task noise level"),
    Opt("radius", _floats, (2.5, 4.5), "sphere radius range as min,max (must fit the volume)"),
    Opt("beta-init", float, 1e-3, "initial prior beta"),
    Opt("gen-k", int, 7, "generator kernel size"),
    Opt("gen-depth", int, 2, "generator depth (1-3)"),
    Opt("checkpoints", _ints, (100, 200, 400, 600), "steps at which held-out Dice is evaluated"),
    Opt("tail", int, 50, "records averaged for final loss/Dice"),
    Opt("wall-time", _bool, False, "fill the wall_ms column of curve CSVs"),
]

COMMANDS: dict[str, tuple[str, list[Opt]]] = {
    "gradcheck": ("reverse-mode vs central finite differences", [
        Opt("scope", str, "all", "which suite", ("conv", "lrbm", "block", "all")),
        Opt("tol", float, 1e-6, "max relative error"),
        Opt("h", float, 1e-5, "finite-difference step"),
        # seed 0 draws a generator bias whose gradient nearly cancels in the
        # following norm, which leaves central differences at ~2e-6 rel-err
        Opt("seed", int, 1, "random seed"),
    ]),
    "merge-verify": ("two-branch block vs merged single operator", _CSLA_OPTS + [
        Opt("steps", int, 10, "SGD steps compared"),
        Opt("channels", int, 2, "channels"),
        Opt("size", int, 8, "volume edge length"),
        Opt("tol", float, 1e-10, "pass threshold for both diffs"),
    ]),
    "lr-field": ("export the effective learning-rate field", _CSLA_OPTS),
    "prior": ("export the distance-decay prior", [
        Opt("k", int, 21, "kernel size (odd)"),
        Opt("beta", float, 1.0, "prior beta"),
        Opt("channels", int, 1, "channels"),
    ]),
    "mask": ("export the modulation mask", [
        Opt("k", int, 21, "kernel size (odd)"),
        Opt("beta", float, 1.0, "prior beta"),
        Opt("channels", int, 1, "channels"),
        Opt("init", str, "zero-generator", "generator initialization", ("zero-generator", "random")),
        Opt("gen-k", int, 7, "generator kernel size"),
        Opt("gen-depth", int, 2, "generator depth (1-3)"),
    ]),
    "erf": ("effective receptive field probe", [
        Opt("kernel", str, "random", "kernel of the probe stack", ("delta", "ones", "random", "masked")),
        Opt("k", int, 3, "kernel size (odd)"),
        Opt("layers", int, 1, "stacked depthwise layers"),
        Opt("size", int, 9, "volume edge length (odd)"),
        Opt("channels", int, 1, "channels"),
        Opt("beta", float, 0.05, "prior beta for --kernel masked"),
        Opt("checkpoint", str, "", "probe the first-stage Rep3D blocks of a train-toy checkpoint"),
        Opt("samples", int, 32, "random inputs averaged"),
        Opt("threshold", float, 0.0, "relative support threshold"),
        Opt("axis", int, 0, "slice axis for the PGM export", (0, 1, 2)),
        Opt("verify-support", _bool, True, "compare support with per-voxel brute force"),
    ]),
    "train-toy": ("train toy encoder arms on synthetic spheres", [
        Opt("arm", str, "all", "which arm", ("vanilla", "fixed", "lrbm", "all")),
    ] + _TRAIN_OPTS),
    "fold": ("fold a trained checkpoint and check equivalence", [
        Opt("checkpoint", str, "", "train-toy checkpoint directory"),
        Opt("samples", int, 10, "random inputs compared"),
    ]),
}

COMMON = [
    Opt("seed", int, 0, "random seed"),
]


def read_config_file(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key.replace("_", "-")] = val
    return out


def command_opts(command: str) -> list[Opt]:
    own = COMMANDS[command][1]
    names = {o.name for o in own}
    return own + [o for o in COMMON if o.name not in names]


def resolve(command: str, flags: dict[str, Any], config_path: str | None) -> dict[str, Any]:
    """Defaults < config file < explicit flags; unknown file keys are rejected."""
    opts = {o.name: o for o in command_opts(command)}
    resolved = {o.dest: o.default for o in opts.values()}
    if config_path:
        for key, raw in read_config_file(config_path).items():
            if key not in opts:
                raise ConfigError(f"unknown config key {key!r} for {command}")
            opt = opts[key]
            try:
                val = opt.type(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for config key {key!r}: {exc}") from None
            if opt.choices and val not in opt.choices:
                raise ConfigError(f"config key {key!r} must be one of {opt.choices}")
            resolved[opt.dest] = val
    for dest, val in flags.items():
        if val is not None:
            resolved[dest] = val
    return resolved


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def write_manifest(out: Path, command: str, cfg: dict[str, Any], extra: dict[str, Any] | None = None) -> None:
    lines = [
        f"command = {command}",
        f"version = {__version__}",
        f"rng = {RNG_ALGORITHM}",
    ]
    lines += [f"{k} = {_fmt(v)}" for k, v in sorted(cfg.items())]
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {_fmt(v)}")
    lines.append(f"timestamp = {time.strftime('%Y-%m-%dT%H:%M:%S%z')}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.12e}" if isinstance(v, float) else v for v in r])


def _csla(cfg) -> CSLAConfig:
    return CSLAConfig(cfg["alpha_l"], cfg["alpha_s"], cfg["lambda_l"], cfg["lambda_s"],
                      cfg["k_l"], cfg["k_s"], field_convention=cfg["field_convention"])


# -- commands -------------------------------------------------------------------


def cmd_gradcheck(cfg, out: Path) -> int:
    reports = run_scope(cfg["scope"], cfg["seed"], cfg["tol"], cfg["h"])
    rows = []
    for suite, rep in reports.items():
        for r in rep.rows:
            rows.append((f"{suite}.{r.param}", r.max_rel_err, r.tol, int(r.passed)))
            print(f"{'PASS' if r.passed else 'FAIL'} {suite}.{r.param} max_rel_err={r.max_rel_err:.3e} tol={r.tol:.1e}")
    _write_rows(out / "gradcheck.csv", ["parameter", "max_rel_err", "tol", "pass"], rows)
    return EXIT_OK if all(r[3] for r in rows) else EXIT_FAIL


def _write_field(out: Path, lr_field: np.ndarray, stem: str = "lr_field") -> None:
    save_rt3d(out / f"{stem}.rt3d", lr_field)
    _write_rows(out / f"{stem}.csv", ["x", "y", "z", "value"],
                ((x, y, z, float(lr_field[x, y, z])) for x, y, z in np.ndindex(*lr_field.shape)))


def _field_summary(ccfg: CSLAConfig, lr_field: np.ndarray) -> tuple[float, float]:
    c = (ccfg.k_l - 1) // 2
    return float(lr_field[c, c, c]), float(lr_field[0, 0, 0])


def cmd_merge_verify(cfg, out: Path) -> int:
    ccfg = _csla(cfg)
    rng = make_rng(cfg["seed"], 21)
    shape = (1, cfg["channels"]) + (cfg["size"],) * 3
    x = rng.standard_normal(shape)
    target = rng.standard_normal(shape)
    state = init_state(ccfg, cfg["channels"], cfg["seed"])
    rep = trajectory_equivalence(x, state, ccfg, squared_error_loss(target), cfg["steps"])
    lr_field = effective_lr_field(ccfg)
    central, peripheral = _field_summary(ccfg, lr_field)
    _write_field(out, lr_field)
    _write_rows(out / "trajectory.csv", ["step", "max_kernel_diff"],
                ((i + 1, d) for i, d in enumerate(rep.kernel_diffs)))
    ok = rep.forward_diff < cfg["tol"] and rep.max_kernel_diff < cfg["tol"]
    print(f"field convention: {ccfg.field_convention}")
    print(f"field central={central:.6e} peripheral={peripheral:.6e}")
    print(f"max forward diff: {rep.forward_diff:.3e}")
    print(f"max {cfg['steps']}-step trajectory diff: {rep.max_kernel_diff:.3e}")
    if not ok and ccfg.field_convention == "as-written-eq11":
        print("trajectory mismatch expected: the alpha-linear field is exact only when alpha_l = alpha_s = 1")
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_lr_field(cfg, out: Path) -> int:
    ccfg = _csla(cfg)
    lr_field = effective_lr_field(ccfg)
    _write_field(out, lr_field)
    central, peripheral = _field_summary(ccfg, lr_field)
    print(f"central={central:.6e} peripheral={peripheral:.6e}")
    return EXIT_OK


def cmd_prior(cfg, out: Path) -> int:
    d = distance_map(cfg["k"])
    ps = prior_mask(d, cfg["beta"], cfg["channels"])
    save_rt3d(out / "prior.rt3d", ps.P)
    write_offsets_csv(out / "prior.csv", d, ps.P)
    c = (cfg["k"] - 1) // 2
    print(f"center={ps.P[0, 0, c, c, c]:.12e} corner={ps.P[0, 0, 0, 0, 0]:.12e}")
    return EXIT_OK


def cmd_mask(cfg, out: Path) -> int:
    d = distance_map(cfg["k"])
    ps = prior_mask(d, cfg["beta"], cfg["channels"])
    gcfg = GeneratorConfig(cfg["gen_k"], cfg["gen_depth"], zero_init=cfg["init"] == "zero-generator")
    theta = init_generator(cfg["channels"], gcfg, cfg["seed"])
    m = modulation_mask(ps, theta)
    save_rt3d(out / "mask.rt3d", m.M)
    write_offsets_csv(out / "mask.csv", d, ps.P, m.M)
    print(f"max |M - P| = {np.max(np.abs(m.M - ps.P)):.3e}")
    return EXIT_OK


def _probe_stack(cfg):
    """(model, numpy forward, input shape, description) for the ERF command."""
    if cfg["checkpoint"]:
        model = fold_model(load_checkpoint(cfg["checkpoint"]))
        ecfg = model.cfg
        nb, c = ecfg.stages[0]
        bcfg = ecfg.block(0)

        def graph_model(x):
            g = x.graph
            nodes = {n: g.const(v) for n, v in model.params.items() if n.startswith("s0.")}
            h = x
            for b in range(nb):
                h = rep3d_block_forward(h, nodes, f"s0.b{b}", bcfg)
            return h

        shape = (1, c) + (cfg["size"],) * 3
        desc = f"checkpoint {cfg['checkpoint']} stage-0 blocks ({nb}x K={ecfg.kernel_size}, folded)"
    else:
        k, c = cfg["k"], cfg["channels"]
        rng = make_rng(cfg["seed"], 31)
        kernels = []
        for _ in range(cfg["layers"]):
            if cfg["kernel"] == "delta":
                kernels.append(delta_kernel(c, k))
            elif cfg["kernel"] == "ones":
                kernels.append(np.ones((c, 1, k, k, k)))
            else:
                w = np.abs(rng.standard_normal((c, 1, k, k, k))) + 0.1
                if cfg["kernel"] == "masked":
                    w = w * prior_mask(distance_map(k), cfg["beta"], c).P
                kernels.append(w)

        def graph_model(x):
            h = x
            for w in kernels:
                h = ops.dwconv3d(h, w)
            return h

        shape = (1, c) + (cfg["size"],) * 3
        desc = f"{cfg['layers']}-layer depthwise K={k} {cfg['kernel']} kernels"

    def np_forward(x):
        g = Graph()
        return graph_model(g.const(x)).value

    return graph_model, np_forward, shape, desc


def cmd_erf(cfg, out: Path) -> int:
    if cfg["size"] % 2 == 0:
        raise ConfigError("--size must be odd so the central voxel is defined")
    graph_model, np_forward, shape, desc = _probe_stack(cfg)
    m = erf_accumulate(graph_model, shape, cfg["samples"], cfg["seed"], desc)
    export_slices(m, cfg["axis"], out / "erf")
    rep = erf_support(m, cfg["threshold"])
    _write_rows(out / "erf_support.csv", ["x", "y", "z", "value"],
                ((int(a), int(b), int(c), float(m.values[a, b, c])) for a, b, c in rep.voxels))
    print(desc)
    print(f"support voxels={len(rep.voxels)} bbox={rep.bbox} mass50_radius={mass_radius(m):.6f}")
    if cfg["verify_support"]:
        brute = brute_force_support(np_forward, shape, cfg["seed"])
        ok = bool(np.array_equal(brute, support_mask_of(m, 0.0)))
        print(f"brute-force support match: {ok} ({int(brute.sum())} voxels)")
        if not ok:
            return EXIT_FAIL
    return EXIT_OK


def _encoder_cfg(cfg) -> EncoderConfig:
    if len(cfg["channels"]) != len(cfg["blocks"]):
        raise ConfigError("--channels and --blocks must list the same number of stages")
    return EncoderConfig(
        stages=tuple(zip(cfg["blocks"], cfg["channels"])),
        kernel_size=cfg["k"],
        beta_init=cfg["beta_init"],
        generator=GeneratorConfig(cfg["gen_k"], cfg["gen_depth"]),
    )


def cmd_train_toy(cfg, out: Path) -> int:
    enc = _encoder_cfg(cfg)
    if len(cfg["radius"]) != 2:
        raise ConfigError("--radius takes two values: min,max")
    task = ToyTask(size=cfg["size"], noise=cfg["noise"], radius_range=cfg["radius"])
    optim = OptimConfig(lr=cfg["lr"], lrbm_lr=cfg["lrbm_lr"], weight_decay=cfg["weight_decay"])
    arms = ("vanilla", "fixed", "lrbm") if cfg["arm"] == "all" else (cfg["arm"],)
    seeds = range(cfg["seed"], cfg["seed"] + cfg["seeds"])
    summary = []
    status = EXIT_OK
    for seed in seeds:
        for arm in arms:
            curve, model = train_toy(arm, cfg["steps"], seed, optim, enc, task,
                                     checkpoints=cfg["checkpoints"], return_model=True)
            tag = f"{arm}_seed{seed}"
            curve.to_csv(out / f"curve_{tag}.csv", wall_time=cfg["wall_time"])
            curve.checkpoints_to_csv(out / f"eval_{tag}.csv")
            save_checkpoint(model, out / f"ckpt_{tag}")
            loss, dice = curve.final(cfg["tail"])
            summary.append((arm, seed, loss, dice, -1 if curve.diverged_at is None else curve.diverged_at))
            print(f"{tag}: final loss={loss:.6f} dice={dice:.6f}")
            if curve.diverged_at is not None:
                print(f"{tag}: diverged at step {curve.diverged_at}")
                status = EXIT_FAIL
    _write_rows(out / "summary.csv", ["arm", "seed", "final_loss", "final_dice", "diverged_at"], summary)
    if len(arms) == 3 and cfg["seeds"] > 0:
        lines = ordering_summary(summary)
        (out / "ordering.txt").write_text("\n".join(lines) + "\n")
        print("\n".join(lines))
    return status


def ordering_summary(summary) -> list[str]:
    by = {(a, s): (lo, d) for a, s, lo, d, _ in summary}
    seeds = sorted({s for _, s, *_ in summary})
    wins = sum(by[("lrbm", s)][0] <= by[("vanilla", s)][0] for s in seeds)
    mean_dice = {a: float(np.mean([by[(a, s)][1] for s in seeds])) for a in ("vanilla", "fixed", "lrbm")}
    return [
        f"seeds = {len(seeds)}",
        f"lrbm_loss_le_vanilla = {wins}/{len(seeds)}",
        *(f"mean_final_dice_{a} = {v:.6f}" for a, v in mean_dice.items()),
        f"lrbm_dice_ge_fixed_minus_0.01 = {mean_dice['lrbm'] >= mean_dice['fixed'] - 0.01}",
    ]


def cmd_fold(cfg, out: Path) -> int:
    if not cfg["checkpoint"]:
        raise ConfigError("--checkpoint is required")
    model = load_checkpoint(cfg["checkpoint"])
    folded = fold_model(model)
    save_checkpoint(folded, out / "folded")
    rng = make_rng(cfg["seed"], 41)
    size = 4 * model.cfg.downsample
    worst = 0.0
    for _ in range(cfg["samples"]):
        x = rng.standard_normal((1, model.cfg.in_channels) + (size,) * 3)
        worst = max(worst, float(np.max(np.abs(forward(model, x) - forward(folded, x)))))
    extra = sum(v.size for n, v in folded.params.items() if n.endswith(".beta") or ".gen." in n)
    print(f"fold equivalence max diff: {worst!r}")
    print(f"generator/prior parameters after folding: {extra}")
    print(f"parameters: train-mode={model.parameter_count()} folded={folded.parameter_count()}")
    return EXIT_OK if worst == 0.0 and extra == 0 else EXIT_FAIL


HANDLERS = {
    "gradcheck": cmd_gradcheck,
    "merge-verify": cmd_merge_verify,
    "lr-field": cmd_lr_field,
    "prior": cmd_prior,
    "mask": cmd_mask,
    "erf": cmd_erf,
    "train-toy": cmd_train_toy,
    "fold": cmd_fold,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="repfield3d", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (help_text, _) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--out", default=None, help="output directory (default $REPFIELD3D_OUT or ./out)")
        for o in command_opts(name):
            p.add_argument(f"--{o.name}", dest=o.dest, type=o.type, default=None, choices=o.choices,
                           help=f"{o.help} (default: {_fmt(o.default)})")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "out")}
    try:
        cfg = resolve(args.command, flags, args.config)
        out = Path(args.out or os.environ.get("REPFIELD3D_OUT") or "out")
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out, args.command, cfg)
        return HANDLERS[args.command](cfg, out)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
