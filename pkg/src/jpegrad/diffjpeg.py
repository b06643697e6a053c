"""JPEG encode/decode round trip with a straight-through quantizer.

The forward pass is a faithful quantization simulator: RGB -> YCbCr (JFIF,
full range), level shift, orthonormal 8x8 block DCT, quantize-dequantize with
IJG-scaled Annex K tables, inverse DCT, level unshift, YCbCr -> RGB. There is
no entropy coding; the round trip is all that matters for perturbation
crafting.

``diffjpeg_forward`` and ``hard_jpeg`` share one forward path, so their outputs
are identical element for element. Only the former records a context for
``diffjpeg_vjp``, where rounding is treated as identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Union

import numpy as np

from .tensorgrad import DTYPE, DiffOp, UnsupportedOperation

BASE_LUMA = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.int32,
)

BASE_CHROMA = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.int32,
)

# JFIF / BT.601 full range; chroma offset of 128 is added separately
RGB_TO_YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ],
    dtype=np.float64,
)
YCC_TO_RGB = np.linalg.inv(RGB_TO_YCC)
YCC_OFFSET = np.array([0.0, 128.0, 128.0])


def _dct_matrix(n: int = 8) -> np.ndarray:
    k = np.arange(n)
    d = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * k[None, :] + 1) * k[:, None] / (2 * n))
    d[0] /= np.sqrt(2.0)
    return d


DCT8 = _dct_matrix()


# --------------------------------------------------------------------------
# quantization tables


@dataclass(frozen=True)
class QuantTables:
    luma: np.ndarray
    chroma: np.ndarray
    qf: int

    def for_plane(self, plane: str) -> np.ndarray:
        if plane == "luma":
            return self.luma
        if plane == "chroma":
            return self.chroma
        raise ValueError(f"unknown plane {plane!r}")


def _scale_table(base: np.ndarray, qf: int) -> np.ndarray:
    scale = 5000 // qf if qf < 50 else 200 - 2 * qf
    table = (base * scale + 50) // 100
    return np.clip(table, 1, 255).astype(np.int32)


@lru_cache(maxsize=None)
def _tables(qf: int) -> QuantTables:
    luma = _scale_table(BASE_LUMA, qf)
    chroma = _scale_table(BASE_CHROMA, qf)
    luma.setflags(write=False)
    chroma.setflags(write=False)
    return QuantTables(luma, chroma, qf)


def quality_to_tables(qf: int) -> QuantTables:
    """IJG quality scaling of the Annex K base tables.

    >>> int(quality_to_tables(50).luma[0, 0]), int(quality_to_tables(95).luma[0, 0])
    (16, 2)
    """
    if isinstance(qf, bool) or int(qf) != qf or not 1 <= qf <= 100:
        raise ValueError(f"quality factor must be an integer in [1, 100], got {qf!r}")
    return _tables(int(qf))


# the crafting loop samples these constantly
PRECOMPUTED_QFS = tuple(range(50, 100, 5))
for _qf in PRECOMPUTED_QFS:
    _tables(_qf)


@dataclass(frozen=True)
class CodecConfig:
    qf: int = 75
    chroma_mode: str = "444"  # "444" or "420"
    rounding: str = "half-away-from-zero"
    clamp_output: bool = False

    def __post_init__(self):
        quality_to_tables(self.qf)
        if self.chroma_mode not in ("444", "420"):
            raise ValueError(f"chroma_mode must be '444' or '420', got {self.chroma_mode!r}")
        if self.rounding != "half-away-from-zero":
            raise ValueError(f"unsupported rounding mode {self.rounding!r}")

    @property
    def tables(self) -> QuantTables:
        return quality_to_tables(self.qf)

    @property
    def block_multiple(self) -> int:
        return 16 if self.chroma_mode == "420" else 8


def _as_config(cfg: Union[CodecConfig, int]) -> CodecConfig:
    if isinstance(cfg, CodecConfig):
        return cfg
    return CodecConfig(qf=cfg)


# --------------------------------------------------------------------------
# elementary stages


def _check_channels(x: np.ndarray) -> None:
    if x.ndim != 3 or x.shape[-1] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {x.shape}")


def rgb_to_ycbcr(x: np.ndarray) -> np.ndarray:
    """RGB on the 0..255 scale to full-range YCbCr. No clamping."""
    _check_channels(x)
    m = RGB_TO_YCC.astype(x.dtype)
    return x @ m.T + YCC_OFFSET.astype(x.dtype)


def ycbcr_to_rgb(x: np.ndarray) -> np.ndarray:
    _check_channels(x)
    m = YCC_TO_RGB.astype(x.dtype)
    return (x - YCC_OFFSET.astype(x.dtype)) @ m.T


def rgb_to_ycbcr_vjp(g: np.ndarray) -> np.ndarray:
    return g @ RGB_TO_YCC.astype(g.dtype)


def ycbcr_to_rgb_vjp(g: np.ndarray) -> np.ndarray:
    return g @ YCC_TO_RGB.astype(g.dtype)


def _check_blocks(x: np.ndarray) -> None:
    if x.ndim not in (2, 3):
        raise ValueError(f"expected a 2-D plane or H x W x C array, got shape {x.shape}")
    h, w = x.shape[:2]
    if h % 8 or w % 8 or h == 0 or w == 0:
        raise ValueError(f"plane dimensions must be positive multiples of 8, got {h} x {w}")


def _block_transform(x: np.ndarray, left: np.ndarray) -> np.ndarray:
    # (H, W[, C]) -> blocks (H/8, W/8, C, 8, 8) -> left @ b @ left.T -> back
    _check_blocks(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[..., None]
    h, w, c = x.shape
    d = left.astype(x.dtype)
    b = x.reshape(h // 8, 8, w // 8, 8, c).transpose(0, 2, 4, 1, 3)
    f = d @ b @ d.T
    out = f.transpose(0, 3, 1, 4, 2).reshape(h, w, c)
    return out[..., 0] if squeeze else out


def block_dct(plane: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DCT-II on each non-overlapping 8x8 block."""
    return _block_transform(plane, DCT8)


def block_idct(coefs: np.ndarray) -> np.ndarray:
    """Inverse of :func:`block_dct` (and, being orthonormal, its adjoint)."""
    return _block_transform(coefs, DCT8.T)


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def _tile_table(table: np.ndarray, shape: tuple[int, ...], dtype) -> np.ndarray:
    h, w = shape[:2]
    return np.tile(table.astype(dtype), (h // 8, w // 8))


def ste_quantize(F: np.ndarray, Q: QuantTables, plane: str = "luma") -> np.ndarray:
    """Forward of the straight-through quantizer: ``round(F / Q) * Q``.

    The backward (see :func:`ste_quantize_vjp`) is the identity: the straight
    through round passes the cotangent unchanged and the 1/Q and Q scalings
    cancel.
    """
    _check_blocks(F)
    q = _tile_table(Q.for_plane(plane), F.shape, F.dtype)
    if F.ndim == 3:
        q = q[..., None]
    return round_half_away(F / q) * q


def ste_quantize_vjp(g: np.ndarray) -> np.ndarray:
    return g


# --------------------------------------------------------------------------
# chroma resampling and padding (linear; adjoints are matrix transposes)


def _avgpool_matrix(n: int) -> np.ndarray:
    m = np.zeros((n // 2, n))
    i = np.arange(n // 2)
    m[i, 2 * i] = 0.5
    m[i, 2 * i + 1] = 0.5
    return m


def bilinear_matrix(out_n: int, in_n: int, offset: int = 0, length: Optional[int] = None,
                    total: Optional[int] = None) -> np.ndarray:
    """1-D bilinear resampling matrix (half-pixel centers, edge clamped).

    Maps a window ``[offset, offset + length)`` of an axis of size ``total``
    onto ``out_n`` samples. With the defaults it resizes the whole axis.
    """
    length = in_n if length is None else length
    total = in_n if total is None else total
    src = offset + (np.arange(out_n) + 0.5) * (length / out_n) - 0.5
    src = np.clip(src, offset, offset + length - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, offset + length - 1)
    frac = src - lo
    m = np.zeros((out_n, total))
    rows = np.arange(out_n)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def separable(x: np.ndarray, mh: np.ndarray, mw: np.ndarray) -> np.ndarray:
    """Apply ``mh`` along rows and ``mw`` along columns of an H x W x C array."""
    t = np.tensordot(mh.astype(x.dtype), x, axes=(1, 0))
    t = np.tensordot(mw.astype(x.dtype), t, axes=(1, 1))
    return t.transpose(1, 0, 2)


def pad_to_multiple(x: np.ndarray, multiple: int = 8) -> np.ndarray:
    """Edge-replicate the bottom/right borders up to a multiple of ``multiple``."""
    h, w = x.shape[:2]
    ph = -h % multiple
    pw = -w % multiple
    if ph == 0 and pw == 0:
        return x
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (x.ndim - 2)
    return np.pad(x, pad, mode="edge")


def fold_padding(g: np.ndarray, h: int, w: int) -> np.ndarray:
    """Adjoint of :func:`pad_to_multiple`: sum padded cotangents into the edges."""
    g = g.copy()
    if g.shape[0] > h:
        g[h - 1] += g[h:].sum(axis=0)
    if g.shape[1] > w:
        g[:, w - 1] += g[:, w:].sum(axis=1)
    return g[:h, :w]


# --------------------------------------------------------------------------
# full codec


@dataclass
class JpegContext:
    cfg: CodecConfig
    in_shape: tuple[int, ...]
    padded_shape: tuple[int, ...]
    clamp_mask: Optional[np.ndarray]


def _plane_codec(plane: np.ndarray, table: np.ndarray, relaxed: bool) -> np.ndarray:
    f = block_dct(plane)
    q = _tile_table(table, f.shape, f.dtype)
    if f.ndim == 3:
        q = q[..., None]
    if relaxed:
        fq = f
    else:
        fq = round_half_away(f / q) * q
    return block_idct(fq)


def _codec(x: np.ndarray, cfg: CodecConfig, relaxed: bool = False):
    """Shared forward. Returns the decoded image and the pre-clamp output."""
    if x.ndim != 3 or x.shape[-1] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(DTYPE)
    h, w = x.shape[:2]
    dtype = x.dtype
    tables = cfg.tables
    xp = pad_to_multiple(x, cfg.block_multiple)
    ycc = rgb_to_ycbcr(xp * dtype.type(255.0)) - dtype.type(128.0)
    out = np.empty_like(ycc)
    out[..., 0] = _plane_codec(ycc[..., 0], tables.luma, relaxed)
    if cfg.chroma_mode == "444":
        out[..., 1:] = _plane_codec(ycc[..., 1:], tables.chroma, relaxed)
    else:
        H, W = ycc.shape[:2]
        down_h, down_w = _avgpool_matrix(H), _avgpool_matrix(W)
        up_h, up_w = bilinear_matrix(H, H // 2), bilinear_matrix(W, W // 2)
        small = separable(ycc[..., 1:], down_h, down_w)
        small = _plane_codec(small, tables.chroma, relaxed)
        out[..., 1:] = separable(small, up_h, up_w)
    rgb = ycbcr_to_rgb(out + dtype.type(128.0)) / dtype.type(255.0)
    rgb = rgb[:h, :w]
    if cfg.clamp_output:
        return np.clip(rgb, 0.0, 1.0), rgb
    return rgb, rgb


def diffjpeg_forward(x: np.ndarray, cfg: Union[CodecConfig, int] = CodecConfig()
                     ) -> tuple[np.ndarray, JpegContext]:
    """JPEG round trip of an image in [0, 1]; returns ``(decoded, ctx)``.

    ``ctx`` feeds :func:`diffjpeg_vjp`. The decoded image is identical to
    ``hard_jpeg(x, cfg)``.
    """
    cfg = _as_config(cfg)
    y, pre = _codec(x, cfg)
    mask = None
    if cfg.clamp_output:
        mask = (pre >= 0.0) & (pre <= 1.0)
    m = cfg.block_multiple
    padded = (x.shape[0] + (-x.shape[0] % m), x.shape[1] + (-x.shape[1] % m), x.shape[2])
    return y, JpegContext(cfg, x.shape, padded, mask)


def diffjpeg_vjp(ctx: Optional[JpegContext], g: np.ndarray) -> np.ndarray:
    """Pull a cotangent back through the codec with a straight-through round."""
    if ctx is None:
        raise ValueError("diffjpeg_vjp needs the context saved by diffjpeg_forward")
    if g.shape != ctx.in_shape:
        raise ValueError(f"cotangent shape {g.shape} does not match input {ctx.in_shape}")
    cfg = ctx.cfg
    dtype = g.dtype
    h, w = ctx.in_shape[:2]
    if ctx.clamp_mask is not None:
        g = np.where(ctx.clamp_mask, g, 0).astype(dtype)
    if cfg.chroma_mode == "444":
        # every stage is linear and the chain collapses to the identity:
        # colour matrices and DCTs cancel, STE passes through, padding is
        # cropped off again before the output
        return np.array(g, dtype=dtype, copy=True)
    H, W = ctx.padded_shape[:2]
    gp = np.zeros(ctx.padded_shape, dtype=dtype)
    gp[:h, :w] = g
    # rescale 1/255 and the inverse colour matrix
    gy = ycbcr_to_rgb_vjp(gp / dtype.type(255.0))
    # per plane: idct o quantize o dct has identity backward (orthonormal, STE)
    down_h, down_w = _avgpool_matrix(H), _avgpool_matrix(W)
    up_h, up_w = bilinear_matrix(H, H // 2), bilinear_matrix(W, W // 2)
    gc = separable(gy[..., 1:], up_h.T, up_w.T)
    gy = gy.copy()
    gy[..., 1:] = separable(gc, down_h.T, down_w.T)
    gx = rgb_to_ycbcr_vjp(gy) * dtype.type(255.0)
    return fold_padding(gx, h, w)


def hard_jpeg(x: np.ndarray, cfg: Union[CodecConfig, int] = CodecConfig()) -> np.ndarray:
    """Deployment reference: same numerics as :func:`diffjpeg_forward`, no gradient."""
    return _codec(x, _as_config(cfg))[0]


def relaxed_jpeg(x: np.ndarray, cfg: Union[CodecConfig, int] = CodecConfig()) -> np.ndarray:
    """The codec with rounding replaced by identity (the STE's claimed Jacobian)."""
    return _codec(x, _as_config(cfg), relaxed=True)[0]


class DiffJPEG(DiffOp):
    ste = True

    def __init__(self, cfg: Union[CodecConfig, int] = CodecConfig()):
        self.cfg = _as_config(cfg)
        self.name = f"diffjpeg(qf={self.cfg.qf})"

    def forward(self, x):
        return diffjpeg_forward(x, self.cfg)

    def vjp(self, ctx, g):
        return diffjpeg_vjp(ctx, g)

    def relaxed(self, x):
        return relaxed_jpeg(x, self.cfg)

    def out_shape(self, in_shape):
        return in_shape


class HardJPEG(DiffOp):
    differentiable = False

    def __init__(self, cfg: Union[CodecConfig, int] = CodecConfig()):
        self.cfg = _as_config(cfg)
        self.name = f"hard_jpeg(qf={self.cfg.qf})"

    def forward(self, x):
        return hard_jpeg(x, self.cfg), None

    def vjp(self, ctx, g):
        raise UnsupportedOperation("hard_jpeg exposes no gradient: round() has zero derivative a.e.")

    def out_shape(self, in_shape):
        return in_shape


# Thin DiffOp wrappers over the elementary stages, used by the gradient checks.


class RGBToYCbCr(DiffOp):
    name = "rgb_to_ycbcr"

    def forward(self, x):
        return rgb_to_ycbcr(x), None

    def vjp(self, ctx, g):
        return rgb_to_ycbcr_vjp(g)

    def out_shape(self, in_shape):
        return in_shape


class YCbCrToRGB(DiffOp):
    name = "ycbcr_to_rgb"

    def forward(self, x):
        return ycbcr_to_rgb(x), None

    def vjp(self, ctx, g):
        return ycbcr_to_rgb_vjp(g)

    def out_shape(self, in_shape):
        return in_shape


class LevelShift(DiffOp):
    def __init__(self, shift: float = -128.0):
        self.shift = shift
        self.name = f"level_shift({shift:g})"

    def forward(self, x):
        return x + x.dtype.type(self.shift), None

    def vjp(self, ctx, g):
        return g

    def out_shape(self, in_shape):
        return in_shape


class BlockDCT(DiffOp):
    name = "block_dct"

    def forward(self, x):
        return block_dct(x), None

    def vjp(self, ctx, g):
        return block_idct(g)

    def out_shape(self, in_shape):
        return in_shape


class BlockIDCT(DiffOp):
    name = "block_idct"

    def forward(self, x):
        return block_idct(x), None

    def vjp(self, ctx, g):
        return block_dct(g)

    def out_shape(self, in_shape):
        return in_shape


class STEQuantize(DiffOp):
    ste = True

    def __init__(self, tables: QuantTables, plane: str = "luma"):
        self.tables = tables
        self.plane = plane
        self.name = f"ste_quantize(qf={tables.qf}, {plane})"

    def forward(self, x):
        return ste_quantize(x, self.tables, self.plane), None

    def vjp(self, ctx, g):
        return ste_quantize_vjp(g)

    def relaxed(self, x):
        return x

    def out_shape(self, in_shape):
        return in_shape


class DequantizeScale(DiffOp):
    """Multiply coefficients by the tiled table (the dequantize step on its own)."""

    def __init__(self, tables: QuantTables, plane: str = "luma"):
        self.tables = tables
        self.plane = plane
        self.name = f"dequantize(qf={tables.qf}, {plane})"

    def _q(self, x):
        q = _tile_table(self.tables.for_plane(self.plane), x.shape, x.dtype)
        return q[..., None] if x.ndim == 3 else q

    def forward(self, x):
        return x * self._q(x), None

    def vjp(self, ctx, g):
        return g * self._q(g)

    def out_shape(self, in_shape):
        return in_shape


def codec_ops(cfg: Union[CodecConfig, int] = CodecConfig()) -> list[DiffOp]:
    """The 4:4:4 no-clamp codec written out as a chain of elementary ops."""
    cfg = _as_config(cfg)
    from .tensorgrad import Scale

    class _PerPlaneQuant(DiffOp):
        ste = True
        name = f"ste_quantize(qf={cfg.qf})"

        def forward(self, x):
            out = np.empty_like(x)
            out[..., :1] = ste_quantize(x[..., :1], cfg.tables, "luma")
            out[..., 1:] = ste_quantize(x[..., 1:], cfg.tables, "chroma")
            return out, None

        def vjp(self, ctx, g):
            return g

        def relaxed(self, x):
            return x

    return [
        Scale(255.0), RGBToYCbCr(), LevelShift(-128.0), BlockDCT(), _PerPlaneQuant(),
        BlockIDCT(), LevelShift(128.0), YCbCrToRGB(), Scale(1.0 / 255.0),
    ]
