"""Forward/VJP operator pairs and a finite-difference checker.

Every pipeline stage is a :class:`DiffOp`: ``forward(x)`` returns the output
together with whatever context the backward pass needs, and ``vjp(ctx, g)``
maps an output cotangent back to the input. Ops are dtype-following, so the
checker can evaluate central differences in float64 while the pipeline itself
runs in float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

DTYPE = np.float32


class ConfigurationError(ValueError):
    """Raised when ops are wired together inconsistently."""


class UnsupportedOperation(RuntimeError):
    """Raised when an op is asked for a gradient it does not define."""


def as_image(x) -> np.ndarray:
    """Coerce to a float32 ndarray, rejecting non-finite values."""
    arr = np.asarray(x, dtype=DTYPE)
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    return arr


class DiffOp:
    """A differentiable operator with an explicit vector-Jacobian product.

    Subclasses implement ``forward`` and ``vjp``. Ops with a straight-through
    backward also provide ``relaxed`` (the forward with the discrete step
    replaced by identity) so the checker can validate the declared gradient.
    """

    name = "op"
    #: True when the backward is a surrogate rather than the true derivative
    ste = False
    #: False for ops that expose no gradient at all
    differentiable = True

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Any]:
        raise NotImplementedError

    def vjp(self, ctx: Any, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def relaxed(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def out_shape(self, in_shape: tuple[int, ...]) -> Optional[tuple[int, ...]]:
        """Static output shape, or None when the op cannot tell in advance."""
        return None

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.name}>"


class FunctionOp(DiffOp):
    """Wrap plain forward/vjp callables as a :class:`DiffOp`."""

    def __init__(
        self,
        forward: Callable[[np.ndarray], tuple[np.ndarray, Any]],
        vjp: Callable[[Any, np.ndarray], np.ndarray],
        name: str = "fn",
        relaxed: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        ste: bool = False,
    ):
        self._forward = forward
        self._vjp = vjp
        self._relaxed = relaxed
        self.name = name
        self.ste = ste

    def forward(self, x):
        return self._forward(x)

    def vjp(self, ctx, g):
        return self._vjp(ctx, g)

    def relaxed(self, x):
        if self._relaxed is None:
            return self._forward(x)[0]
        return self._relaxed(x)


class Identity(DiffOp):
    name = "identity"

    def forward(self, x):
        return x, None

    def vjp(self, ctx, g):
        return g

    def out_shape(self, in_shape):
        return in_shape


class Scale(DiffOp):
    def __init__(self, factor: float):
        self.factor = factor
        self.name = f"scale({factor:g})"

    def forward(self, x):
        return x * np.asarray(self.factor, dtype=x.dtype), None

    def vjp(self, ctx, g):
        return g * np.asarray(self.factor, dtype=g.dtype)

    def out_shape(self, in_shape):
        return in_shape


class HardRound(DiffOp):
    """Elementwise rounding with no usable gradient (zero almost everywhere)."""

    name = "hard_round"
    differentiable = False

    def forward(self, x):
        return np.sign(x) * np.floor(np.abs(x) + 0.5), None

    def vjp(self, ctx, g):
        raise UnsupportedOperation("hard_round has zero derivative almost everywhere")

    def out_shape(self, in_shape):
        return in_shape


class Composed(DiffOp):
    def __init__(self, ops: Sequence[DiffOp]):
        self.ops = list(ops)
        self.name = " -> ".join(op.name for op in self.ops)
        self.ste = any(op.ste for op in self.ops)
        self.differentiable = all(op.differentiable for op in self.ops)

    def forward(self, x):
        ctxs = []
        for op in self.ops:
            x, ctx = op.forward(x)
            ctxs.append(ctx)
        return x, ctxs

    def vjp(self, ctxs, g):
        if ctxs is None:
            raise UnsupportedOperation("vjp called without a saved forward context")
        for op, ctx in zip(reversed(self.ops), reversed(ctxs)):
            g = op.vjp(ctx, g)
        return g

    def relaxed(self, x):
        for op in self.ops:
            x = op.relaxed(x)
        return x

    def out_shape(self, in_shape):
        shape = in_shape
        for op in self.ops:
            shape = op.out_shape(shape)
            if shape is None:
                return None
        return shape


def compose(ops: Sequence[DiffOp], in_shape: Optional[tuple[int, ...]] = None) -> DiffOp:
    """Chain ops left to right; the VJP runs them right to left.

    When ``in_shape`` is given, statically known shapes are checked along the
    chain and a mismatch raises :class:`ConfigurationError`.
    """
    ops = list(ops)
    if not ops:
        raise ConfigurationError("compose needs at least one op")
    if in_shape is not None:
        shape: Optional[tuple[int, ...]] = tuple(in_shape)
        for i, op in enumerate(ops):
            expected = getattr(op, "in_shape", None)
            if shape is not None and expected is not None and tuple(expected) != shape:
                raise ConfigurationError(
                    f"op {i} ({op.name}) expects input {tuple(expected)}, got {shape}"
                )
            shape = op.out_shape(shape) if shape is not None else None
    return Composed(ops)


@dataclass
class CheckReport:
    max_rel_error: float
    passed: bool
    probes: int
    mode: str = "exact"  # "exact", "ste-surrogate" or "non-differentiable"
    message: str = ""
    failing_coordinate: Optional[tuple[int, ...]] = None
    errors: list[float] = field(default_factory=list)


def finite_diff_check(
    op: DiffOp,
    x: np.ndarray,
    probes: int = 64,
    h: float = 1e-3,
    tol: float = 1e-3,
    rng: Optional[np.random.Generator] = None,
) -> CheckReport:
    """Compare ``op.vjp`` against central differences of a random functional.

    A random output cotangent ``w`` defines the scalar ``<w, op(x)>``; its
    derivative at ``probes`` random input coordinates is estimated by central
    differences and compared with ``op.vjp(ctx, w)``. Differences are taken in
    float64. For straight-through ops the differences are taken on
    ``op.relaxed`` (discrete step replaced by identity), which is the Jacobian
    the backward pass claims to implement.

    The relative error at a coordinate is ``|fd - vjp| / max(|fd|, |vjp|, s)``
    with ``s = 1e-3 * max|vjp|`` guarding coordinates whose true derivative is
    close to zero.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if probes < 1:
        raise ValueError("probes must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    mode = "ste-surrogate" if op.ste else "exact"

    if not op.differentiable:
        return CheckReport(np.inf, False, 0, "non-differentiable",
                           f"{op.name} is non-differentiable: no VJP is defined")

    x64 = np.asarray(x, dtype=np.float64)
    y, ctx = op.forward(x64)
    y = np.asarray(y)
    if not np.all(np.isfinite(y)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(y))[0])
        return CheckReport(np.inf, False, 0, mode, "non-finite forward value", bad)
    w = rng.standard_normal(y.shape)
    try:
        grad = np.asarray(op.vjp(ctx, w.astype(y.dtype)), dtype=np.float64)
    except UnsupportedOperation as exc:
        return CheckReport(np.inf, False, 0, "non-differentiable", str(exc))

    evaluate = op.relaxed if op.ste else op
    flat_idx = rng.choice(x64.size, size=min(probes, x64.size), replace=False)
    scale = 1e-3 * float(np.max(np.abs(grad))) if grad.size else 0.0
    errors = []
    worst, worst_coord = 0.0, None
    for k in flat_idx:
        coord = np.unravel_index(k, x64.shape)
        xp = x64.copy()
        xm = x64.copy()
        xp[coord] += h
        xm[coord] -= h
        yp = np.asarray(evaluate(xp), dtype=np.float64)
        ym = np.asarray(evaluate(xm), dtype=np.float64)
        if not (np.all(np.isfinite(yp)) and np.all(np.isfinite(ym))):
            return CheckReport(np.inf, False, len(errors), mode,
                               "non-finite forward value", tuple(int(c) for c in coord))
        fd = float(np.sum(w * (yp - ym))) / (2.0 * h)
        an = float(grad[coord])
        denom = max(abs(fd), abs(an), scale, 1e-30)
        err = abs(fd - an) / denom
        errors.append(err)
        if err > worst:
            worst, worst_coord = err, tuple(int(c) for c in coord)
    passed = worst <= tol
    msg = f"{op.name}: max relative error {worst:.3e} over {len(errors)} probes ({mode})"
    return CheckReport(worst, passed, len(errors), mode, msg,
                       None if passed else worst_coord, errors)


def adjoint_gap(op: DiffOp, x: np.ndarray, g: np.ndarray) -> float:
    """Relative gap between ``<op(x), g>`` and ``<x, vjp(g)>`` for a linear op."""
    y, ctx = op.forward(x)
    lhs = float(np.sum(np.asarray(y, np.float64) * g))
    rhs = float(np.sum(np.asarray(x, np.float64) * op.vjp(ctx, g)))
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-12)
