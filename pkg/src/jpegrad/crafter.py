"""Bilevel perturbation crafting.

Each step: advance the quality-factor curriculum, adapt the surrogate head on
transformed (detached) protected images, take one EOT-averaged sign-gradient
ascent step on the images against the adapted head, restore the head, and
project back into the l-inf ball around the clean images.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .metrics import mean_survival, psnr
from .surrogate import (
    SurrogateParams,
    init_surrogate,
    inner_step,
    loss_and_input_grad,
    restore_head,
    snapshot_head,
)
from .tensorgrad import DTYPE, as_image
from .transforms import CurriculumConfig, apply_transform, qf_min, sample_transform, transform_vjp

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "qf_min", "inner_loss", "outer_loss_mean", "outer_loss_std", "psnr", "survival")


class InvariantViolation(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class CraftConfig:
    epsilon: float = 8 / 255
    alpha: float = 0.5 / 255
    steps: int = 200
    eot_samples: int = 4
    inner_unroll: int = 1
    inner_lr: float = 0.01
    loss_samples: int = 2
    qf_max: int = 95
    qf_min_final: int = 50
    seed: int = 0
    surrogate_seed: int = 0
    survival_qf: int = 75
    condition: int = 0

    def __post_init__(self):
        if not 0 < self.alpha <= self.epsilon <= 1:
            raise ValueError("need 0 < alpha <= epsilon <= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.eot_samples < 1 or self.inner_unroll < 0 or self.loss_samples < 1:
            raise ValueError("eot_samples and loss_samples must be >= 1, inner_unroll >= 0")
        if self.inner_lr < 0:
            raise ValueError("inner_lr must be non-negative")
        CurriculumConfig(self.qf_max, self.qf_min_final, max(self.steps, 1))

    @property
    def curriculum(self) -> CurriculumConfig:
        return CurriculumConfig(self.qf_max, self.qf_min_final, max(self.steps, 1))


@dataclass
class StepRecord:
    step: int
    qf_min: int
    inner_loss: float
    outer_losses: list[float]
    psnr: float
    survival: float

    @property
    def outer_loss_mean(self) -> float:
        return float(np.mean(self.outer_losses))

    @property
    def outer_loss_std(self) -> float:
        return float(np.std(self.outer_losses))

    def as_row(self) -> list:
        return [self.step, self.qf_min, self.inner_loss, self.outer_loss_mean,
                self.outer_loss_std, self.psnr, self.survival]


@dataclass
class CraftState:
    x_p: list[np.ndarray]
    clean_ref: tuple[np.ndarray, ...]
    step: int = 0
    log: list[StepRecord] = field(default_factory=list)
    qf_min: int = 95
    inner_loss: float = float("nan")
    outer_losses: list[float] = field(default_factory=list)

    @classmethod
    def start(cls, clean: Sequence[np.ndarray], qf_max: int = 95) -> "CraftState":
        refs = []
        for x in clean:
            ref = as_image(x).copy()
            ref.setflags(write=False)
            refs.append(ref)
        return cls([r.copy() for r in refs], tuple(refs), qf_min=qf_max)


def project_linf(x: np.ndarray, ref: np.ndarray, epsilon: float) -> np.ndarray:
    """``clamp(ref + clamp(x - ref, -eps, eps), 0, 1)``."""
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    eps = np.asarray(epsilon, dtype=x.dtype)
    delta = np.clip(x - ref, -eps, eps)
    return np.clip(ref + delta, 0, 1).astype(x.dtype, copy=False)


def inner_update(state: CraftState, params: SurrogateParams, cfg: CraftConfig,
                 rng: np.random.Generator) -> SurrogateParams:
    """K SGD steps on the head against transformed copies of the protected images.

    The images are used as constants here. Callers snapshot the head
    beforehand and restore it once the outer step is done.
    """
    qrange = (state.qf_min, cfg.qf_max)
    losses = []
    for _ in range(cfg.inner_unroll):
        batch = [apply_transform(sample_transform(rng, qrange), x.copy(), "no-grad")
                 for x in state.x_p]
        _, loss = inner_step(params, batch, cfg.condition, cfg.inner_lr, rng,
                             n=cfg.loss_samples, return_loss=True)
        losses.append(loss)
    state.inner_loss = float(np.mean(losses)) if losses else float("nan")
    return params


def eot_gradient(x: np.ndarray, params: SurrogateParams, cfg: CraftConfig,
                 rng: np.random.Generator, qrange: tuple[int, int]):
    """Mean of L2-normalized loss gradients over ``cfg.eot_samples`` draws.

    Returns ``(avg_grad or None, per-sample losses)``; None when every sampled
    gradient vanished.
    """
    acc = np.zeros_like(x)
    used = 0
    losses = []
    for _ in range(cfg.eot_samples):
        spec = sample_transform(rng, qrange)
        y, ctx = apply_transform(spec, x)
        loss, gy = loss_and_input_grad(params, y, cfg.condition, cfg.loss_samples, rng)
        g = transform_vjp(ctx, gy)
        losses.append(loss)
        norm = float(np.linalg.norm(g))
        if norm > 0 and np.isfinite(norm):
            acc += g / np.float32(norm)
            used += 1
    if used == 0:
        return None, losses
    return acc / np.float32(used), losses


def outer_pgd_step(state: CraftState, params: SurrogateParams, cfg: CraftConfig,
                   rng: np.random.Generator) -> CraftState:
    """Sign-gradient ascent on the denoising loss, then l-inf projection."""
    qrange = (state.qf_min, cfg.qf_max)
    per_image = []
    for i, x in enumerate(state.x_p):
        avg, losses = eot_gradient(x, params, cfg, rng, qrange)
        per_image.append(losses)
        if avg is None:
            log.warning("step %d image %d: all EOT gradients vanished, no update", state.step, i)
            continue
        stepped = x + np.float32(cfg.alpha) * np.sign(avg).astype(DTYPE)
        state.x_p[i] = project_linf(stepped, state.clean_ref[i], cfg.epsilon)
    # outer loss of EOT sample j, averaged over images
    state.outer_losses = [float(v) for v in np.mean(np.array(per_image), axis=0)]
    return state


def check_constraints(state: CraftState, epsilon: float, tol: float = 1e-6) -> None:
    for i, (x, ref) in enumerate(zip(state.x_p, state.clean_ref)):
        if not np.all(np.isfinite(x)):
            raise InvariantViolation(state.step, f"image {i} has non-finite values")
        dev = float(np.max(np.abs(x.astype(np.float64) - ref)))
        if dev > epsilon + tol:
            raise InvariantViolation(state.step, f"image {i}: |delta|_inf = {dev:.8f} > eps")
        if x.min() < 0 or x.max() > 1:
            raise InvariantViolation(state.step, f"image {i} left [0, 1]")


def craft(clean: Sequence[np.ndarray], cfg: CraftConfig = CraftConfig(),
          params: Optional[SurrogateParams] = None,
          on_step: Optional[Callable[[CraftState], None]] = None
          ) -> tuple[list[np.ndarray], list[StepRecord]]:
    """Craft protected versions of ``clean``; returns ``(protected, log)``.

    Deterministic given ``cfg``. ``on_step`` sees the state after every
    projection, which is where the constraint audit hooks in.
    """
    if len(clean) == 0:
        raise ValueError("craft needs at least one image")
    if params is None:
        params = init_surrogate(cfg.surrogate_seed)
    rng = np.random.default_rng(cfg.seed)
    state = CraftState.start(clean, cfg.qf_max)
    curriculum = cfg.curriculum
    for t in range(cfg.steps):
        state.step = t
        state.qf_min = qf_min(t, curriculum)
        saved = snapshot_head(params)
        inner_update(state, params, cfg, rng)
        outer_pgd_step(state, params, cfg, rng)
        restore_head(params, saved)
        check_constraints(state, cfg.epsilon)
        record = StepRecord(
            t, state.qf_min, state.inner_loss, state.outer_losses,
            float(np.mean([psnr(x, r) for x, r in zip(state.x_p, state.clean_ref)])),
            mean_survival(state.x_p, state.clean_ref, cfg.survival_qf),
        )
        state.log.append(record)
        if on_step is not None:
            on_step(state)
    return [x.copy() for x in state.x_p], state.log


def write_log_csv(records: Sequence[StepRecord], path: Union[str, Path]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        for r in records:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in r.as_row()])
    tmp.replace(path)


def read_log_csv(path: Union[str, Path]) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LOG_HEADER:
            raise ValueError(f"unexpected header {reader.fieldnames}")
        return [{k: (int(v) if k in ("step", "qf_min") else float(v)) for k, v in row.items()}
                for row in reader]
