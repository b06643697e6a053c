"""Desk-scale denoising surrogate.

A three-layer 3x3 convolutional denoiser stands in for the diffusion UNet:
two frozen backbone layers (3 -> 16 -> 16, softplus after each) and a
trainable head (16 -> 3) plus a per-condition output bias. The denoising
loss and its gradients with respect to the input image and to the head are
computed analytically.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .tensorgrad import DTYPE

HIDDEN = 16
N_CONDITIONS = 2
HEAD_KEYS = ("w3", "b3", "cond")
BACKBONE_KEYS = ("w1", "b1", "w2", "b2")


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size == 0 or np.any(ab <= 0) or np.any(ab > 1):
            raise ValueError("alpha_bar must be a non-empty 1-D array in (0, 1]")
        if np.any(np.diff(ab) > 0):
            raise ValueError("alpha_bar must be non-increasing")
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T_diff(self) -> int:
        return int(self.alpha_bar.size)

    @property
    def alpha(self) -> np.ndarray:
        return np.sqrt(self.alpha_bar)

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar)


def linear_schedule(T_diff: int = 100, start: float = 0.9999, end: float = 0.02) -> NoiseSchedule:
    return NoiseSchedule(np.linspace(start, end, T_diff))


DEFAULT_SCHEDULE = linear_schedule()


# --------------------------------------------------------------------------
# convolution helpers (NHWC, 3x3, zero "same" padding)


def _im2col(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, h, w, 9, c), dtype=x.dtype)
    for k in range(9):
        dy, dx = divmod(k, 3)
        cols[:, :, :, k, :] = xp[:, dy:dy + h, dx:dx + w, :]
    return cols.reshape(n, h, w, 9 * c)


def _col2im(dcols: np.ndarray, c: int) -> np.ndarray:
    n, h, w, _ = dcols.shape
    dcols = dcols.reshape(n, h, w, 9, c)
    gp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for k in range(9):
        dy, dx = divmod(k, 3)
        gp[:, dy:dy + h, dx:dx + w, :] += dcols[:, :, :, k, :]
    return gp[:, 1:-1, 1:-1, :]


def _conv(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    cols = _im2col(x)
    wm = w.reshape(-1, w.shape[-1])
    return cols @ wm + b, cols


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0, z).astype(z.dtype, copy=False)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return (0.5 * (1.0 + np.tanh(0.5 * z))).astype(z.dtype, copy=False)


# --------------------------------------------------------------------------
# parameters


@dataclass
class HeadState:
    arrays: dict
    shapes: dict


@dataclass
class SurrogateParams:
    backbone: dict
    head: dict
    seed: int = 0
    schedule: NoiseSchedule = field(default=DEFAULT_SCHEDULE)

    def __post_init__(self):
        for arr in self.backbone.values():
            arr.setflags(write=False)

    @property
    def n_backbone(self) -> int:
        return sum(a.size for a in self.backbone.values())

    @property
    def n_head(self) -> int:
        return sum(a.size for a in self.head.values())

    def forward(self, z: np.ndarray, c: int = 0):
        """Denoiser prediction for a batch ``z`` of shape (N, H, W, 3)."""
        bb, hd = self.backbone, self.head
        a1, cols1 = _conv(z, bb["w1"], bb["b1"])
        h1 = _softplus(a1)
        a2, cols2 = _conv(h1, bb["w2"], bb["b2"])
        h2 = _softplus(a2)
        out, cols3 = _conv(h2, hd["w3"], hd["b3"])
        out = out + hd["cond"][c]
        return out, (a1, a2, cols3, c)

    def backward(self, cache, gout: np.ndarray, need_input: bool = True,
                 need_head: bool = True):
        """Return ``(grad wrt z, grad wrt head)`` for an output cotangent."""
        a1, a2, cols3, c = cache
        hd, bb = self.head, self.backbone
        ghead = None
        if need_head:
            g2d = gout.reshape(-1, gout.shape[-1])
            ghead = {
                "w3": (cols3.reshape(-1, cols3.shape[-1]).T @ g2d).reshape(hd["w3"].shape),
                "b3": g2d.sum(axis=0),
                "cond": np.zeros_like(hd["cond"]),
            }
            ghead["cond"][c] = ghead["b3"]
        gz = None
        if need_input:
            gh2 = _col2im(gout @ hd["w3"].reshape(-1, 3).T, HIDDEN)
            ga2 = gh2 * _sigmoid(a2)
            gh1 = _col2im(ga2 @ bb["w2"].reshape(-1, HIDDEN).T, HIDDEN)
            ga1 = gh1 * _sigmoid(a1)
            gz = _col2im(ga1 @ bb["w1"].reshape(-1, HIDDEN).T, 3)
        return gz, ghead


def _uniform(rng, shape, fan_in):
    k = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-k, k, size=shape).astype(DTYPE)


def init_surrogate(seed: int = 0, schedule: NoiseSchedule = DEFAULT_SCHEDULE) -> SurrogateParams:
    """Fresh surrogate with weights ~ U[-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    rng = np.random.default_rng(seed)
    backbone = {
        "w1": _uniform(rng, (3, 3, 3, HIDDEN), 27),
        "b1": _uniform(rng, (HIDDEN,), 27),
        "w2": _uniform(rng, (3, 3, HIDDEN, HIDDEN), 9 * HIDDEN),
        "b2": _uniform(rng, (HIDDEN,), 9 * HIDDEN),
    }
    head = {
        "w3": _uniform(rng, (3, 3, HIDDEN, 3), 9 * HIDDEN),
        "b3": _uniform(rng, (3,), 9 * HIDDEN),
        "cond": np.zeros((N_CONDITIONS, 3), dtype=DTYPE),
    }
    return SurrogateParams(backbone, head, seed, schedule)


def zero_surrogate(schedule: NoiseSchedule = DEFAULT_SCHEDULE) -> SurrogateParams:
    """All-zero weights: the denoiser predicts 0 everywhere."""
    p = init_surrogate(0, schedule)
    return SurrogateParams({k: np.zeros_like(v) for k, v in p.backbone.items()},
                           {k: np.zeros_like(v) for k, v in p.head.items()}, 0, schedule)


# --------------------------------------------------------------------------
# denoising loss


@dataclass(frozen=True)
class NoiseDraw:
    """Timesteps (0-based schedule indices) and noise maps for one loss call."""

    t: np.ndarray
    eps: np.ndarray


def draw_noise(rng: np.random.Generator, n: int, shape: tuple[int, ...],
               schedule: NoiseSchedule = DEFAULT_SCHEDULE) -> NoiseDraw:
    if n < 1:
        raise ValueError("need at least one noise sample")
    t = rng.integers(0, schedule.T_diff, size=n)
    eps = rng.standard_normal((n,) + tuple(shape)).astype(DTYPE)
    return NoiseDraw(t, eps)


def _resolve_noise(params, x, n, rng, noise):
    if noise is None:
        if n < 1:
            raise ValueError("n must be >= 1")
        if rng is None:
            raise ValueError("pass either rng or a pre-drawn noise sample")
        noise = draw_noise(rng, n, x.shape, params.schedule)
    return noise


def _forward_loss(params: SurrogateParams, x: np.ndarray, c: int, noise: NoiseDraw):
    a = params.schedule.alpha[noise.t].astype(x.dtype)[:, None, None, None]
    s = params.schedule.sigma[noise.t].astype(x.dtype)[:, None, None, None]
    z = a * x[None] + s * noise.eps.astype(x.dtype)
    out, cache = params.forward(z, c)
    r = out - x[None]
    per_sample = np.mean(r.reshape(r.shape[0], -1) ** 2, axis=1)
    return per_sample, r, a, cache


def denoise_loss(params: SurrogateParams, x: np.ndarray, c: int = 0, n: int = 1,
                 rng: Optional[np.random.Generator] = None,
                 noise: Optional[NoiseDraw] = None) -> tuple[float, np.ndarray]:
    """Monte Carlo denoising loss, ``mean_i mean((D(a_t x + s_t eps) - x)^2)``.

    Returns the mean and the ``n`` per-sample losses. ``w_t`` is 1.
    """
    noise = _resolve_noise(params, x, n, rng, noise)
    per_sample = _forward_loss(params, x, c, noise)[0]
    return float(per_sample.mean()), per_sample


def loss_and_input_grad(params: SurrogateParams, x: np.ndarray, c: int = 0, n: int = 1,
                        rng: Optional[np.random.Generator] = None,
                        noise: Optional[NoiseDraw] = None) -> tuple[float, np.ndarray]:
    noise = _resolve_noise(params, x, n, rng, noise)
    per_sample, r, a, cache = _forward_loss(params, x, c, noise)
    m = r[0].size
    k = len(per_sample)
    gout = r * r.dtype.type(2.0 / (m * k))
    gz, _ = params.backward(cache, gout, need_input=True, need_head=False)
    gx = np.sum(a * gz - gout, axis=0)
    return float(per_sample.mean()), gx


def loss_vjp_wrt_input(params: SurrogateParams, x: np.ndarray, c: int = 0, n: int = 1,
                       rng: Optional[np.random.Generator] = None,
                       noise: Optional[NoiseDraw] = None) -> np.ndarray:
    """Exact gradient of :func:`denoise_loss` with respect to ``x``.

    Pass an identically seeded ``rng`` (or the same ``noise``) as the paired
    forward call to differentiate the same Monte Carlo estimate.
    """
    return loss_and_input_grad(params, x, c, n, rng, noise)[1]


def loss_and_head_grad(params: SurrogateParams, x: np.ndarray, c: int = 0, n: int = 1,
                       rng: Optional[np.random.Generator] = None,
                       noise: Optional[NoiseDraw] = None) -> tuple[float, dict]:
    noise = _resolve_noise(params, x, n, rng, noise)
    per_sample, r, _, cache = _forward_loss(params, x, c, noise)
    m = r[0].size
    gout = r * r.dtype.type(2.0 / (m * len(per_sample)))
    _, ghead = params.backward(cache, gout, need_input=False, need_head=True)
    return float(per_sample.mean()), ghead


def inner_step(params: SurrogateParams, batch: Sequence[np.ndarray], c: int = 0,
               lr: float = 1e-2, rng: Optional[np.random.Generator] = None, n: int = 1,
               noises: Optional[Sequence[NoiseDraw]] = None, return_loss: bool = False):
    """One plain SGD step on the head, minimizing the mean loss over ``batch``.

    Updates ``params.head`` in place and returns ``params`` (with
    ``return_loss=True``, ``(params, pre-step batch loss)``). The backbone is
    never touched.
    """
    if len(batch) == 0:
        raise ValueError("inner_step needs a non-empty batch")
    if lr < 0:
        raise ValueError("lr must be non-negative")
    total = {k: np.zeros_like(v) for k, v in params.head.items()}
    losses = []
    for i, x in enumerate(batch):
        noise = None if noises is None else noises[i]
        loss, g = loss_and_head_grad(params, x, c, n, rng, noise)
        losses.append(loss)
        for k in total:
            total[k] += g[k]
    scale = lr / len(batch)
    for k in params.head:
        params.head[k] -= (scale * total[k]).astype(params.head[k].dtype)
    if return_loss:
        return params, float(np.mean(losses))
    return params


def snapshot_head(params: SurrogateParams) -> HeadState:
    return HeadState({k: v.copy() for k, v in params.head.items()},
                     {k: v.shape for k, v in params.head.items()})


def restore_head(params: SurrogateParams, state: HeadState) -> SurrogateParams:
    if set(state.shapes) != set(params.head) or any(
        params.head[k].shape != s for k, s in state.shapes.items()
    ):
        raise ValueError("head state does not match this surrogate's architecture")
    for k, v in state.arrays.items():
        params.head[k][...] = v
    return params


# --------------------------------------------------------------------------
# flat binary serialization
#
# little endian:  b"JPGRSURR" | u32 version | i64 seed | u32 T_diff
#                 | f64 alpha_bar[T_diff] | u32 n_arrays
#                 | per array: u8 name_len, name, u32 ndim, u32 dims[ndim]
#                 | then all arrays as f32, row major, in header order

MAGIC = b"JPGRSURR"
VERSION = 1
_ORDER = BACKBONE_KEYS + HEAD_KEYS


def save_params(params: SurrogateParams, path: Union[str, Path]) -> None:
    arrays = {**params.backbone, **params.head}
    buf = bytearray(MAGIC)
    buf += struct.pack("<Iqi", VERSION, int(params.seed), params.schedule.T_diff)
    buf += params.schedule.alpha_bar.astype("<f8").tobytes()
    buf += struct.pack("<I", len(_ORDER))
    for name in _ORDER:
        a = arrays[name]
        buf += struct.pack("<B", len(name)) + name.encode()
        buf += struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    for name in _ORDER:
        buf += np.ascontiguousarray(arrays[name], dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_params(path: Union[str, Path]) -> SurrogateParams:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a surrogate parameter file")
    pos = 8
    version, seed, t_diff = struct.unpack_from("<Iqi", data, pos)
    pos += struct.calcsize("<Iqi")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    alpha_bar = np.frombuffer(data, "<f8", t_diff, pos).copy()
    pos += 8 * t_diff
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    header = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<B", data, pos)
        pos += 1
        name = data[pos:pos + ln].decode()
        pos += ln
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        header.append((name, shape))
    arrays = {}
    for name, shape in header:
        size = int(np.prod(shape))
        arrays[name] = np.frombuffer(data, "<f4", size, pos).reshape(shape).astype(DTYPE)
        pos += 4 * size
    backbone = {k: arrays[k] for k in BACKBONE_KEYS}
    head = {k: arrays[k] for k in HEAD_KEYS}
    return SurrogateParams(backbone, head, seed, NoiseSchedule(alpha_bar))
