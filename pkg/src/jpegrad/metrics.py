"""Perturbation quality, JPEG survival, frequency-zone and protection metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .diffjpeg import (
    CodecConfig,
    block_dct,
    diffjpeg_forward,
    diffjpeg_vjp,
    hard_jpeg,
    quality_to_tables,
    rgb_to_ycbcr,
    ste_quantize,
)
from .surrogate import SurrogateParams, denoise_loss, draw_noise

EVAL_QFS = (100, 95, 90, 85, 80, 75, 70, 60, 50)
PROTECTION_HEADER = ("qf", "clean_mean", "clean_std", "prot_mean", "prot_std", "delta")
ZONE_HEADER = ("dc", "low", "mid", "high")
DEGENERATE_MAGNITUDE = 1e-3


def deployment_codec(qf: int) -> CodecConfig:
    """What a platform applies: the reference codec with 0..1 output clamping."""
    return CodecConfig(qf=qf, clamp_output=True)


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for images on the [0, 1] scale; ``math.inf`` when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def perturbation_stats(x_p: np.ndarray, x_c: np.ndarray) -> dict:
    """Max and mean ``|delta|`` in 1/255 units and the fraction above 0.5/255."""
    x_p = np.asarray(x_p, dtype=np.float64)
    x_c = np.asarray(x_c, dtype=np.float64)
    _check_same(x_p, x_c)
    d = np.abs(x_p - x_c) * 255.0
    return {
        "max_delta": float(d.max()),
        "mean_delta": float(d.mean()),
        "coverage": float(np.mean(d > 0.5)),
    }


def survival_from_deltas(before: np.ndarray, after: np.ndarray) -> float:
    """sqrt(cos(before, after) * min(1, |after| / |before|)), clamped at 0."""
    b = np.asarray(before, dtype=np.float64).ravel()
    a = np.asarray(after, dtype=np.float64).ravel()
    nb = float(np.linalg.norm(b))
    na = float(np.linalg.norm(a))
    if nb == 0.0 and na == 0.0:
        return 1.0
    if nb == 0.0 or na == 0.0:
        return 0.0
    cos = float(np.dot(a, b)) / (na * nb)
    value = max(0.0, cos * min(1.0, na / nb))
    return min(1.0, math.sqrt(value))


def jpeg_survival(x_p: np.ndarray, x_c: np.ndarray, qf: int = 75) -> float:
    x_p = np.asarray(x_p)
    x_c = np.asarray(x_c)
    _check_same(x_p, x_c)
    cfg = deployment_codec(qf)
    before = x_p.astype(np.float64) - x_c
    after = hard_jpeg(x_p, cfg).astype(np.float64) - hard_jpeg(x_c, cfg)
    return survival_from_deltas(before, after)


def mean_survival(protected: Sequence[np.ndarray], clean: Sequence[np.ndarray], qf: int = 75) -> float:
    return float(np.mean([jpeg_survival(p, c, qf) for p, c in zip(protected, clean)]))


def grad_coverage(codec: str, x: np.ndarray, qf: int,
                  rng: Optional[np.random.Generator] = None,
                  cotangent: Optional[np.ndarray] = None, max_tries: int = 8) -> float:
    """Fraction of input elements that receive a non-zero cotangent.

    The hard codec has no backward pass, so its coverage is 0 by definition.
    An all-zero probe carries no information and is redrawn.
    """
    if codec not in ("diff", "hard"):
        raise ValueError("codec must be 'diff' or 'hard'")
    if codec == "hard":
        return 0.0
    rng = np.random.default_rng(0) if rng is None else rng
    y, ctx = diffjpeg_forward(np.asarray(x, dtype=np.float32), CodecConfig(qf=qf))
    g = cotangent
    for _ in range(max_tries):
        if g is not None and np.any(g != 0):
            break
        g = rng.standard_normal(y.shape).astype(y.dtype)
    else:
        raise RuntimeError("could not draw a non-zero cotangent")
    gx = diffjpeg_vjp(ctx, g.astype(y.dtype))
    return float(np.mean(np.abs(gx) > 0))


# --------------------------------------------------------------------------
# frequency analysis

_U, _V = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
_S = _U + _V
ZONES = {
    "dc": _S == 0,
    "low": (_S >= 1) & (_S <= 2),
    "mid": (_S >= 3) & (_S <= 9),
    "high": _S >= 10,
}


@dataclass
class SurvivalHeatmap:
    grid: np.ndarray
    qf: int
    n_blocks: int


@dataclass
class ZoneReport:
    dc: float
    low: float
    mid: float
    high: float

    def as_row(self) -> list[float]:
        return [self.dc, self.low, self.mid, self.high]


def dct_survival_heatmap(x: np.ndarray, qf: int) -> SurvivalHeatmap:
    """Per-frequency fraction of luma DCT magnitude kept by quantization."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3 or x.shape[-1] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {x.shape}")
    y = rgb_to_ycbcr(x * np.float32(255.0))[..., 0] - np.float32(128.0)
    f = block_dct(y)
    fq = ste_quantize(f, quality_to_tables(qf), "luma")
    h, w = f.shape
    blocks = f.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3).astype(np.float64)
    qblocks = fq.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3).astype(np.float64)
    before = np.abs(blocks).sum(axis=(0, 1))
    after = np.abs(qblocks).sum(axis=(0, 1))
    grid = np.ones((8, 8))
    # a one-level pixel change moves a coefficient by ~1/8; anything far below
    # that is float round-off and counts as no energy
    live = before / blocks.shape[0] / blocks.shape[1] >= DEGENERATE_MAGNITUDE
    grid[live] = np.minimum(1.0, after[live] / before[live])
    return SurvivalHeatmap(grid, qf, (h // 8) * (w // 8))


def zone_survival(h: SurvivalHeatmap) -> ZoneReport:
    g = np.asarray(h.grid)
    return ZoneReport(**{name: float(g[mask].mean()) for name, mask in ZONES.items()})


# --------------------------------------------------------------------------
# protection sweep


@dataclass
class ProtectionRow:
    qf: int
    clean_mean: float
    clean_std: float
    protected_mean: float
    protected_std: float

    @property
    def delta(self) -> float:
        return self.protected_mean - self.clean_mean

    def as_row(self) -> list:
        return [self.qf, self.clean_mean, self.clean_std,
                self.protected_mean, self.protected_std, self.delta]


@dataclass
class ProtectionTable:
    rows: list[ProtectionRow] = field(default_factory=list)

    @property
    def wins(self) -> int:
        return sum(r.delta > 0 for r in self.rows)


def _condition_losses(params, images, qf, n, seed, c):
    gen = np.random.default_rng(seed)
    cfg = deployment_codec(qf)
    losses = []
    for x in images:
        noise = draw_noise(gen, n, x.shape, params.schedule)
        _, per = denoise_loss(params, hard_jpeg(x, cfg), c, noise=noise)
        losses.append(per)
    return np.concatenate(losses)


def eval_protection(clean: Sequence[np.ndarray], protected: Sequence[np.ndarray],
                    params: SurrogateParams, qfs: Sequence[int] = EVAL_QFS, n: int = 8,
                    rng: Optional[np.random.Generator] = None, c: int = 0) -> ProtectionTable:
    """Denoising loss after JPEG at each quality factor, clean vs protected.

    Both conditions see identical timestep/noise draws, so ``delta`` isolates
    the effect of the perturbation.
    """
    if len(clean) != len(protected):
        raise ValueError("clean and protected lists differ in length")
    if n < 1:
        raise ValueError("n must be >= 1")
    for a, b in zip(clean, protected):
        _check_same(np.asarray(a), np.asarray(b))
    rng = np.random.default_rng(0) if rng is None else rng
    seed = int(rng.integers(2**63 - 1))
    table = ProtectionTable()
    for qf in qfs:
        lc = _condition_losses(params, clean, qf, n, seed, c)
        lp = _condition_losses(params, protected, qf, n, seed, c)
        table.rows.append(ProtectionRow(int(qf), float(lc.mean()), float(lc.std()),
                                        float(lp.mean()), float(lp.std())))
    return table


# --------------------------------------------------------------------------
# CSV


def _write_rows(path, header, rows):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if header:
            writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    tmp.replace(path)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_protection_csv(table: ProtectionTable, path: Union[str, Path]) -> None:
    _write_rows(path, PROTECTION_HEADER, [r.as_row() for r in table.rows])


def read_protection_csv(path: Union[str, Path]) -> ProtectionTable:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != PROTECTION_HEADER:
            raise ValueError(f"unexpected header {header}")
        rows = [ProtectionRow(int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4]))
                for r in reader]
    return ProtectionTable(rows)


def write_zone_csv(report: ZoneReport, path: Union[str, Path]) -> None:
    _write_rows(path, ZONE_HEADER, [report.as_row()])


def read_zone_csv(path: Union[str, Path]) -> ZoneReport:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != ZONE_HEADER:
            raise ValueError(f"unexpected header {header}")
        row = next(reader)
    return ZoneReport(*(float(v) for v in row))


def write_heatmap_csv(h: SurvivalHeatmap, path: Union[str, Path]) -> None:
    _write_rows(path, None, h.grid.tolist())


def read_heatmap_csv(path: Union[str, Path], qf: int = 0, n_blocks: int = 1) -> SurvivalHeatmap:
    grid = np.loadtxt(path, delimiter=",", ndmin=2)
    if grid.shape != (8, 8):
        raise ValueError(f"heatmap must be 8x8, got {grid.shape}")
    return SurvivalHeatmap(grid, qf, n_blocks)
