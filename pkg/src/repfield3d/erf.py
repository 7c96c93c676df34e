"""Effective receptive field estimation.

Protocol: a unit gradient is injected at the central output voxel (summed
over channels and batch), back-propagated to the input, and ``|dX|`` summed
over channels is averaged over ``n_samples`` standard-normal inputs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import Graph, Node, backward
from .tensor import NonFiniteError, make_rng, save_rt3d

Model = Callable[[Node], Node]


@dataclass
class ERFMap:
    values: np.ndarray  # (D, H, W)
    n_samples: int
    seed: int
    description: str = ""

    @property
    def center(self) -> tuple[int, int, int]:
        return tuple((s - 1) // 2 for s in self.values.shape)


def _center_seed(shape) -> np.ndarray:
    if any(s % 2 == 0 for s in shape[2:]):
        raise ValueError(f"spatial dims must be odd to have a central voxel, got {shape[2:]}")
    seed = np.zeros(shape)
    cd, ch, cw = ((s - 1) // 2 for s in shape[2:])
    seed[:, :, cd, ch, cw] = 1.0
    return seed


def input_gradient(model: Model, x: np.ndarray) -> np.ndarray:
    g = Graph()
    xn = g.param("x", x)
    y = model(xn)
    return backward(g, y, seed=_center_seed(y.value.shape), wrt=["x"])["x"]


def erf_accumulate(model: Model, input_shape, n_samples: int = 32, seed: int = 0,
                   description: str = "") -> ERFMap:
    """Mean ``|d y_center / d x|`` over ``n_samples`` random inputs."""
    input_shape = tuple(int(s) for s in input_shape)
    if len(input_shape) != 5:
        raise ValueError("input shape must be (N, C, D, H, W)")
    if any(s % 2 == 0 for s in input_shape[2:]):
        raise ValueError(f"spatial dims must be odd, got {input_shape[2:]}")
    if n_samples < 1:
        raise ValueError("need at least one sample")
    rng = make_rng(seed)
    acc = np.zeros(input_shape[2:])
    for _ in range(n_samples):
        dx = input_gradient(model, rng.standard_normal(input_shape))
        if not np.all(np.isfinite(dx)):
            raise NonFiniteError("non-finite input gradient")
        acc += np.abs(dx).sum(axis=(0, 1))
    return ERFMap(acc / n_samples, n_samples, seed, description)


def brute_force_support(forward: Callable[[np.ndarray], np.ndarray], input_shape, seed: int = 0,
                        delta: float = 1.0) -> np.ndarray:
    """Boolean ``(D, H, W)`` map of input voxels whose perturbation moves the
    channel-summed central output."""
    input_shape = tuple(input_shape)
    x0 = make_rng(seed).standard_normal(input_shape)
    cen = tuple((s - 1) // 2 for s in input_shape[2:])

    def probe(x):
        y = forward(x)
        return y[(slice(None), slice(None)) + cen].sum()

    y0 = probe(x0)
    out = np.zeros(input_shape[2:], dtype=bool)
    for idx in np.ndindex(*input_shape[2:]):
        x = x0.copy()
        x[(slice(None), slice(None)) + idx] += delta
        out[idx] = probe(x) != y0
    return out


@dataclass
class SupportReport:
    voxels: np.ndarray  # (n, 3) indices
    bbox: tuple[tuple[int, int], ...]
    radial_profile: np.ndarray  # mean value per unit-width distance bin
    threshold: float


def distance_grid(shape) -> np.ndarray:
    axes = [np.arange(s) - (s - 1) / 2 for s in shape]
    return np.sqrt(sum(a**2 for a in np.meshgrid(*axes, indexing="ij")))


def radial_profile(values: np.ndarray) -> np.ndarray:
    """Mean value in distance bins ``[r, r+1)`` from the center."""
    bins = np.floor(distance_grid(values.shape)).astype(int)
    counts = np.bincount(bins.ravel())
    sums = np.bincount(bins.ravel(), weights=values.ravel())
    return np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)


def erf_support(m: ERFMap, rel_threshold: float) -> SupportReport:
    vmax = float(m.values.max())
    if vmax <= 0:
        raise ValueError("ERF map is all zero")
    mask = (m.values >= rel_threshold * vmax) & (m.values > 0)
    vox = np.argwhere(mask)
    bbox = tuple((int(vox[:, i].min()), int(vox[:, i].max())) for i in range(3))
    return SupportReport(vox, bbox, radial_profile(m.values), rel_threshold)


def support_mask_of(m: ERFMap, rel_threshold: float = 0.0) -> np.ndarray:
    mask = np.zeros(m.values.shape, dtype=bool)
    rep = erf_support(m, rel_threshold)
    mask[tuple(rep.voxels.T)] = True
    return mask


def mass_radius(m: ERFMap, fraction: float = 0.5) -> float:
    """Smallest distance ``r`` such that voxels within ``r`` hold ``fraction`` of the mass."""
    d = distance_grid(m.values.shape).ravel()
    v = m.values.ravel()
    total = v.sum()
    if total <= 0:
        raise ValueError("ERF map is all zero")
    order = np.argsort(d, kind="stable")
    ds, cum = d[order], np.cumsum(v[order])
    # accumulate whole distance shells so ties do not depend on sort order
    shell_end = np.r_[ds[1:] != ds[:-1], True]
    hit = np.nonzero(shell_end & (cum >= fraction * total * (1 - 1e-12)))[0]
    return float(ds[hit[0]])


# -- export ---------------------------------------------------------------------


def write_pgm(path, img: np.ndarray) -> None:
    """Binary P5 greyscale, max-normalized to 255."""
    img = np.asarray(img, dtype=np.float64)
    vmax = img.max()
    scaled = np.zeros(img.shape) if vmax <= 0 else img / vmax * 255.0
    pix = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def central_slice(values: np.ndarray, axis: int) -> np.ndarray:
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    return np.take(values, (values.shape[axis] - 1) // 2, axis=axis)


def export_slices(m: ERFMap, axis: int, prefix) -> list[Path]:
    """Write ``<prefix>_slice.pgm``, ``<prefix>_slice.csv``, ``<prefix>_radial.csv``
    and the full map as ``<prefix>.rt3d``."""
    prefix = Path(prefix)
    sl = central_slice(m.values, axis)
    pgm = prefix.with_name(prefix.name + "_slice.pgm")
    slice_csv = prefix.with_name(prefix.name + "_slice.csv")
    radial_csv = prefix.with_name(prefix.name + "_radial.csv")
    full = prefix.with_name(prefix.name + ".rt3d")
    write_pgm(pgm, sl)
    with open(slice_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "value"])
        for (r, c), v in np.ndenumerate(sl):
            w.writerow([r, c, f"{v:.12e}"])
    with open(radial_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["radius", "mean_value"])
        for r, v in enumerate(radial_profile(m.values)):
            w.writerow([r, f"{v:.12e}"])
    save_rt3d(full, m.values)
    return [pgm, slice_csv, radial_csv, full]
