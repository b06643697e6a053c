"""JPEG-aware EOT distribution, differentiable spatial augmentations and the
curriculum schedule for the minimum quality factor."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

import numpy as np

from .diffjpeg import CodecConfig, DiffJPEG, bilinear_matrix, separable
from .tensorgrad import DiffOp, Identity, compose


class Category(str, Enum):
    JPEG_ONLY = "JpegOnly"
    JPEG_THEN_SPATIAL = "JpegThenSpatial"
    SPATIAL_THEN_JPEG = "SpatialThenJpeg"
    SPATIAL_ONLY = "SpatialOnly"
    IDENTITY = "Identity"

    @property
    def has_jpeg(self) -> bool:
        return self in (Category.JPEG_ONLY, Category.JPEG_THEN_SPATIAL, Category.SPATIAL_THEN_JPEG)

    @property
    def has_spatial(self) -> bool:
        return self in (Category.JPEG_THEN_SPATIAL, Category.SPATIAL_THEN_JPEG, Category.SPATIAL_ONLY)


CATEGORIES = tuple(Category)
CATEGORY_PROBS = (0.40, 0.30, 0.15, 0.10, 0.05)

SPATIAL_KINDS = ("GaussianBlur", "HorizontalFlip", "CropResize")
SIGMA_RANGE = (0.1, 2.0)
CROP_RANGE = (0.875, 1.0)


@dataclass(frozen=True)
class SpatialParams:
    kind: str
    sigma: Optional[float] = None
    crop_fraction: Optional[float] = None
    # relative position of the crop window in [0, 1]; resolved against the image size
    offsets: Optional[tuple[float, float]] = None

    def __post_init__(self):
        if self.kind not in SPATIAL_KINDS:
            raise ValueError(f"unknown spatial kind {self.kind!r}")
        if self.kind == "GaussianBlur":
            if self.sigma is None or not SIGMA_RANGE[0] <= self.sigma <= SIGMA_RANGE[1]:
                raise ValueError(f"blur sigma must lie in {SIGMA_RANGE}, got {self.sigma}")
        if self.kind == "CropResize":
            if self.crop_fraction is None or not CROP_RANGE[0] <= self.crop_fraction <= CROP_RANGE[1]:
                raise ValueError(f"crop fraction must lie in {CROP_RANGE}, got {self.crop_fraction}")

    def describe(self) -> str:
        if self.kind == "GaussianBlur":
            return f"blur sigma={self.sigma:.2f}"
        if self.kind == "HorizontalFlip":
            return "flip"
        r, c = self.offsets or (0.0, 0.0)
        return f"crop frac={self.crop_fraction:.3f} off={r:.3f},{c:.3f}"


@dataclass(frozen=True)
class TransformSpec:
    category: Category
    qf: Optional[int] = None
    spatial: Optional[SpatialParams] = None

    def __post_init__(self):
        cat = Category(self.category)
        object.__setattr__(self, "category", cat)
        if cat.has_jpeg != (self.qf is not None):
            raise ValueError(f"{cat.value}: qf must be set iff the category includes JPEG")
        if cat.has_spatial != (self.spatial is not None):
            raise ValueError(f"{cat.value}: spatial params must be set iff the category is spatial")

    def __str__(self) -> str:
        parts = [self.category.value]
        if self.qf is not None:
            parts.append(f"qf={self.qf}")
        if self.spatial is not None:
            parts.append(self.spatial.describe())
        return " ".join(parts)


@dataclass(frozen=True)
class CurriculumConfig:
    qf_max: int = 95
    qf_min_final: int = 50
    total_steps: int = 200

    def __post_init__(self):
        if not 1 <= self.qf_min_final <= self.qf_max <= 100:
            raise ValueError("need 1 <= qf_min_final <= qf_max <= 100")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def qf_min(t: int, cfg: CurriculumConfig = CurriculumConfig()) -> int:
    """Lower end of the sampled quality-factor range at step ``t``.

    Falls linearly from ``qf_max`` to ``qf_min_final`` over the first half of
    the run and stays there. Rounded half up.
    """
    if t < 0 or t > cfg.total_steps:
        raise ValueError(f"step {t} outside [0, {cfg.total_steps}]")
    frac = min(1.0, 2.0 * t / cfg.total_steps)
    value = cfg.qf_max - frac * (cfg.qf_max - cfg.qf_min_final)
    q = math.floor(value + 0.5)
    return int(min(max(q, cfg.qf_min_final), cfg.qf_max))


def sample_transform(rng: np.random.Generator, qf_range: tuple[int, int]) -> TransformSpec:
    lo, hi = qf_range
    if not (1 <= lo <= hi <= 100):
        raise ValueError(f"invalid quality range {qf_range}")
    category = CATEGORIES[rng.choice(len(CATEGORIES), p=CATEGORY_PROBS)]
    qf = int(rng.integers(lo, hi + 1)) if category.has_jpeg else None
    spatial = None
    if category.has_spatial:
        kind = SPATIAL_KINDS[rng.integers(len(SPATIAL_KINDS))]
        if kind == "GaussianBlur":
            spatial = SpatialParams(kind, sigma=float(rng.uniform(*SIGMA_RANGE)))
        elif kind == "HorizontalFlip":
            spatial = SpatialParams(kind)
        else:
            frac = float(rng.uniform(*CROP_RANGE))
            spatial = SpatialParams(kind, crop_fraction=frac,
                                    offsets=(float(rng.random()), float(rng.random())))
    return TransformSpec(category, qf, spatial)


# --------------------------------------------------------------------------
# spatial operators


def _reflect_index(i: np.ndarray, n: int) -> np.ndarray:
    # numpy "reflect": d c b | a b c d | c b a
    period = 2 * (n - 1) if n > 1 else 1
    i = np.abs(i) % period
    return np.where(i >= n, period - i, i)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    k = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    return k / k.sum()


def blur_matrix(n: int, sigma: float) -> np.ndarray:
    """1-D Gaussian blur with reflect padding as an explicit n x n matrix."""
    k = gaussian_kernel(sigma)
    radius = len(k) // 2
    m = np.zeros((n, n))
    rows = np.arange(n)
    for j, weight in enumerate(k):
        cols = _reflect_index(rows + j - radius, n)
        np.add.at(m, (rows, cols), weight)
    return m


class SeparableLinear(DiffOp):
    """``x -> Mh x Mw^T`` per channel; the VJP is ``Mh^T g Mw``."""

    def __init__(self, mh: np.ndarray, mw: np.ndarray, name: str):
        self.mh = mh
        self.mw = mw
        self.name = name
        self.in_shape_hw = (mh.shape[1], mw.shape[1])

    def forward(self, x):
        if x.shape[:2] != self.in_shape_hw:
            raise ValueError(f"{self.name}: expected {self.in_shape_hw} spatial dims, got {x.shape[:2]}")
        return separable(x, self.mh, self.mw), x.shape

    def vjp(self, ctx, g):
        return separable(g, self.mh.T, self.mw.T)

    def out_shape(self, in_shape):
        return (self.mh.shape[0], self.mw.shape[0]) + tuple(in_shape[2:])


class GaussianBlur(SeparableLinear):
    def __init__(self, sigma: float, h: int, w: int):
        super().__init__(blur_matrix(h, sigma), blur_matrix(w, sigma), f"blur(sigma={sigma:.2f})")
        self.sigma = sigma


class HorizontalFlip(DiffOp):
    name = "flip"

    def forward(self, x):
        return x[:, ::-1].copy(), None

    def vjp(self, ctx, g):
        return g[:, ::-1].copy()

    def out_shape(self, in_shape):
        return in_shape


def crop_window(n: int, fraction: float, rel_offset: float) -> tuple[int, int]:
    """Integer (offset, length) of a crop covering ``fraction`` of an axis."""
    length = max(1, min(n, int(round(fraction * n))))
    offset = int(math.floor(rel_offset * (n - length + 1)))
    return min(offset, n - length), length


class CropResize(SeparableLinear):
    """Crop a window then bilinearly resize it back to the full size."""

    def __init__(self, fraction: float, offsets: tuple[float, float], h: int, w: int):
        r0, rl = crop_window(h, fraction, offsets[0])
        c0, cl = crop_window(w, fraction, offsets[1])
        mh = bilinear_matrix(h, rl, offset=r0, length=rl, total=h)
        mw = bilinear_matrix(w, cl, offset=c0, length=cl, total=w)
        super().__init__(mh, mw, f"crop_resize(rows={r0}+{rl}, cols={c0}+{cl})")
        self.window = (r0, rl, c0, cl)


def spatial_op(params: SpatialParams, shape: tuple[int, ...]) -> DiffOp:
    h, w = shape[:2]
    if params.kind == "GaussianBlur":
        return GaussianBlur(params.sigma, h, w)
    if params.kind == "HorizontalFlip":
        return HorizontalFlip()
    return CropResize(params.crop_fraction, params.offsets or (0.0, 0.0), h, w)


def transform_op(spec: TransformSpec, shape: tuple[int, ...],
                 codec: Optional[CodecConfig] = None) -> DiffOp:
    """Build the operator chain a spec describes, in category order."""
    ops: list[DiffOp] = []
    jpeg = None
    if spec.category.has_jpeg:
        base = codec or CodecConfig()
        jpeg = DiffJPEG(CodecConfig(qf=spec.qf, chroma_mode=base.chroma_mode,
                                    clamp_output=base.clamp_output))
    spatial = spatial_op(spec.spatial, shape) if spec.spatial is not None else None
    if spec.category is Category.JPEG_ONLY:
        ops = [jpeg]
    elif spec.category is Category.JPEG_THEN_SPATIAL:
        ops = [jpeg, spatial]
    elif spec.category is Category.SPATIAL_THEN_JPEG:
        ops = [spatial, jpeg]
    elif spec.category is Category.SPATIAL_ONLY:
        ops = [spatial]
    else:
        ops = [Identity()]
    return compose(ops)


@dataclass
class TransformContext:
    op: DiffOp
    inner: object


def apply_transform(spec: TransformSpec, x: np.ndarray, mode: str = "with-grad",
                    codec: Optional[CodecConfig] = None
                    ) -> Union[np.ndarray, tuple[np.ndarray, TransformContext]]:
    """Apply ``spec`` to ``x``.

    ``mode="with-grad"`` returns ``(y, ctx)`` for :func:`transform_vjp`;
    ``mode="no-grad"`` returns only ``y``. Both share the same numerics.
    """
    if mode not in ("with-grad", "no-grad"):
        raise ValueError(f"mode must be 'with-grad' or 'no-grad', got {mode!r}")
    op = transform_op(spec, x.shape, codec)
    y, inner = op.forward(x)
    if mode == "no-grad":
        return y
    return y, TransformContext(op, inner)


def transform_vjp(ctx: Optional[TransformContext], g: np.ndarray) -> np.ndarray:
    if ctx is None:
        raise ValueError("transform_vjp needs the context saved by apply_transform")
    return ctx.op.vjp(ctx.inner, g)
