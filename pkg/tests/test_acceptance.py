"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[PASS]``/``[FAIL]`` line and the session summary
repeats them (see ``conftest.py``). Run alone with::

    pytest tests/test_acceptance.py -v
"""

import csv
import hashlib
import math
import time
from collections import Counter

import numpy as np
import pytest
from PIL import Image

from conftest import natural
from jpegrad import cli
from jpegrad.crafter import CraftConfig, craft
from jpegrad.diffjpeg import (
    BlockDCT,
    BlockIDCT,
    CodecConfig,
    RGBToYCbCr,
    YCbCrToRGB,
    diffjpeg_forward,
    diffjpeg_vjp,
    hard_jpeg,
)
from jpegrad.metrics import (
    dct_survival_heatmap,
    eval_protection,
    jpeg_survival,
    mean_survival,
    survival_from_deltas,
    zone_survival,
)
from jpegrad.surrogate import denoise_loss, draw_noise, init_surrogate, loss_vjp_wrt_input
from jpegrad.tensorgrad import FunctionOp, finite_diff_check
from jpegrad.transforms import (
    CATEGORIES,
    CATEGORY_PROBS,
    CropResize,
    CurriculumConfig,
    GaussianBlur,
    HorizontalFlip,
    qf_min,
    sample_transform,
)

EPS = 8 / 255
RESULTS: dict[int, tuple[bool, str]] = {}


def report(n: int, title: str, ok: bool, detail: str) -> None:
    RESULTS[n] = (ok, f"{title}: {detail}")
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d} {title}: {detail}")
    assert ok, detail


def craft_images():
    return [natural("astronaut"), natural("coffee")]


@pytest.fixture(scope="module")
def runs():
    """Default craft runs per seed, shared by the dynamics criteria."""
    cache = {}

    def get(seed):
        if seed not in cache:
            images = craft_images()
            audit = []

            def on_step(state):
                dev = max(float(np.abs(x.astype(np.float64) - r).max())
                          for x, r in zip(state.x_p, state.clean_ref))
                lo = min(float(x.min()) for x in state.x_p)
                hi = max(float(x.max()) for x in state.x_p)
                audit.append((state.step, dev, lo, hi))

            t0 = time.perf_counter()
            protected, log = craft(images, CraftConfig(seed=seed), on_step=on_step)
            cache[seed] = dict(images=images, protected=protected, log=log, audit=audit,
                               seconds=time.perf_counter() - t0)
        return cache[seed]

    return get


# --------------------------------------------------------------------------


def test_c01_gradient_flow_dichotomy(tmp_path):
    t0 = time.perf_counter()
    rc = cli.main(["gradcheck", "--qfs", "50,75,90", "--out-dir", str(tmp_path)])
    with open(tmp_path / "gradcheck.csv") as fh:
        rows = list(csv.DictReader(fh))
    dt = time.perf_counter() - t0
    ok = (rc == 0 and [int(r["qf"]) for r in rows] == [50, 75, 90]
          and all(float(r["diff_coverage"]) == 1.0 for r in rows)
          and all(float(r["hard_coverage"]) == 0.0 for r in rows) and dt < 10)
    detail = ", ".join(f"qf={r['qf']} diff={float(r['diff_coverage']):.0%} hard={float(r['hard_coverage']):.0%}"
                       for r in rows)
    report(1, "gradient-flow dichotomy", ok, f"{detail} ({dt:.1f}s)")


def test_c02_forward_bit_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    mismatches = 0
    for _ in range(100):
        x = rng.random((64, 64, 3)).astype(np.float32)
        for qf in (50, 60, 75, 90, 100):
            y, _ = diffjpeg_forward(x, CodecConfig(qf=qf))
            mismatches += int(not np.array_equal(y, hard_jpeg(x, CodecConfig(qf=qf))))
    dt = time.perf_counter() - t0
    report(2, "forward bit-exactness", mismatches == 0 and dt < 30,
           f"{mismatches}/500 mismatching pairs ({dt:.1f}s)")


def _loss_op(params, noise, pre=None):
    """Scalar toy loss, optionally behind a differentiable op, as a 1-element operator."""

    def forward(x):
        y, ctx = (x, None) if pre is None else pre.forward(x)
        return np.array([denoise_loss(params, y, noise=noise)[0]]), (y, ctx)

    def vjp(ctx, g):
        y, inner = ctx
        gy = g[0] * loss_vjp_wrt_input(params, y, noise=noise)
        return gy if pre is None else pre.vjp(inner, gy)

    return FunctionOp(forward, vjp, "toy loss" + (f" o {pre.name}" if pre else ""))


def test_c03_vjp_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    x01 = rng.random((16, 16, 3)).astype(np.float32)
    x255 = x01 * np.float32(255)
    checks = [
        (RGBToYCbCr(), x255, 1e-3), (YCbCrToRGB(), x255, 1e-3),
        (BlockDCT(), x255 - 128, 1e-3), (BlockIDCT(), x255 - 128, 1e-3),
        (GaussianBlur(1.0, 16, 16), x01, 1e-3), (HorizontalFlip(), x01, 1e-3),
        (CropResize(0.875, (0.4, 0.6), 16, 16), x01, 1e-3),
    ]
    params = init_surrogate(0)
    noise = draw_noise(rng, 4, x01.shape)
    checks.append((_loss_op(params, noise), x01, 2e-3))
    checks.append((_loss_op(params, noise, GaussianBlur(0.8, 16, 16)), x01, 2e-3))
    failures, worst = [], {}
    for op, x, tol in checks:
        rep = finite_diff_check(op, x, probes=64, h=1e-3, tol=tol, rng=rng)
        worst[op.name] = rep.max_rel_error
        if not rep.passed:
            failures.append(rep.message)
    gap = 0.0
    for qf in (50, 75, 90):
        g = rng.standard_normal(x01.shape).astype(np.float32)
        _, ctx = diffjpeg_forward(x01, CodecConfig(qf=qf))
        gap = max(gap, float(np.abs(diffjpeg_vjp(ctx, g) - g).max()))
    dt = time.perf_counter() - t0
    ok = not failures and gap < 1e-4 and dt < 60
    detail = f"max fd error {max(worst.values()):.2e} over {len(checks)} ops, identity-VJP gap {gap:.1e} ({dt:.1f}s)"
    report(3, "VJP correctness", ok, detail + ("; " + "; ".join(failures) if failures else ""))


def test_c04_curriculum_schedule():
    cfg = CurriculumConfig(95, 50, 200)
    vals = [qf_min(t, cfg) for t in range(201)]
    ok = (vals[0] == 95 and vals[100] == 50 and vals[200] == 50
          and all(a >= b for a, b in zip(vals, vals[1:])))
    report(4, "curriculum schedule", ok,
           f"qf_min(0)={vals[0]} qf_min(T/2)={vals[100]} qf_min(T)={vals[200]}, monotone")


def test_c05_eot_distribution():
    rng = np.random.default_rng(5)
    counts = Counter(sample_transform(rng, (50, 95)).category for _ in range(10_000))
    freqs = [counts[c] / 10_000 for c in CATEGORIES]
    dev = max(abs(f - p) for f, p in zip(freqs, CATEGORY_PROBS))
    report(5, "EOT distribution", dev <= 0.02,
           "freqs " + "/".join(f"{100 * f:.1f}" for f in freqs) + f"%, max dev {100 * dev:.2f} pp")


def test_c06_survival_metric():
    d = np.random.default_rng(6).standard_normal(4096)
    ortho = np.random.default_rng(7).standard_normal(4096)
    ortho -= ortho.dot(d) / d.dot(d) * d
    vals = [survival_from_deltas(d, d), survival_from_deltas(d, 0.5 * d),
            survival_from_deltas(d, ortho), survival_from_deltas(d, 2 * d)]
    ok = (vals[0] == 1.0 and abs(vals[1] - 0.7071) <= 1e-4 and abs(vals[2]) < 1e-6 and vals[3] == 1.0)
    report(6, "survival metric", ok, "identity/half/orthogonal/double = " + ", ".join(f"{v:.4f}" for v in vals))


def test_c07_constraint_discipline(runs):
    r = runs(0)
    audit = r["audit"]
    worst = max(a[1] for a in audit)
    box = all(a[2] >= 0 and a[3] <= 1 for a in audit)
    final = max(float(np.abs(p.astype(np.float64) - c).max()) for p, c in zip(r["protected"], r["images"]))
    ok = (len(audit) == 200 and worst <= EPS + 1e-6 and box and abs(final - EPS) <= 1e-6
          and r["seconds"] < 600)
    report(7, "constraint discipline", ok,
           f"{len(audit)} steps audited, max|delta| {255 * worst:.4f}/255, in [0,1]: {box}, "
           f"final {255 * final:.4f}/255 ({r['seconds']:.0f}s)")


def test_c08_loss_ascent(runs):
    parts, ok = [], True
    for seed in (0, 1, 2):
        ol = [rec.outer_loss_mean for rec in runs(seed)["log"]]
        first, last = float(np.mean(ol[:10])), float(np.mean(ol[-10:]))
        ok &= last > first
        parts.append(f"seed {seed}: {first:.4f} -> {last:.4f}")
    report(8, "loss-ascent dynamics", ok, "; ".join(parts))


def test_c09_survival_improvement(runs):
    parts, ok = [], True
    for seed in (0, 1, 2):
        r = runs(seed)
        rng = np.random.default_rng(1000 + seed)
        random = [np.clip(c + EPS * rng.choice([-1.0, 1.0], size=c.shape), 0, 1).astype(np.float32)
                  for c in r["images"]]
        s_rand = mean_survival(random, r["images"], 75)
        s_craft = mean_survival(r["protected"], r["images"], 75)
        ok &= s_craft > s_rand
        parts.append(f"seed {seed}: crafted {s_craft:.3f} vs random {s_rand:.3f}")
    report(9, "survival improvement", ok, "; ".join(parts))


def test_c10_frequency_zones():
    t0 = time.perf_counter()
    parts, ok = [], True
    for name in ("astronaut", "coffee", "chelsea"):
        z = zone_survival(dct_survival_heatmap(natural(name, 256), 50))
        good = z.dc >= 0.95 and z.low > z.high and 0.40 <= z.high <= 0.75
        ok &= good
        parts.append(f"{name}: dc={z.dc:.3f} low={z.low:.3f} mid={z.mid:.3f} high={z.high:.3f}")
    dt = time.perf_counter() - t0
    report(10, "frequency-zone structure", ok and dt < 30,
           "; ".join(parts) + f" (high band [0.40, 0.75]; {dt:.1f}s)")


def test_c11_protection_sign_sweep(runs):
    parts, ok = [], True
    for seed in (0, 1):
        r = runs(seed)
        table = eval_protection(r["images"], r["protected"], init_surrogate(0), rng=np.random.default_rng(seed))
        ok &= table.wins == 9
        parts.append(f"seed {seed}: {table.wins}/9 wins, min delta {min(row.delta for row in table.rows):.4f}")
    report(11, "protection sign sweep", ok, "; ".join(parts))


def test_c12_determinism(tmp_path):
    src = tmp_path / "in"
    src.mkdir()
    for name, img in zip(("astronaut", "coffee"), craft_images()):
        Image.fromarray(cli.to_uint8(img), "RGB").save(src / f"{name}.png")
    digests = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert cli.main(["craft", str(src), "--seed", "7", "--out-dir", str(out)]) == 0
        digests.append({p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(out.iterdir())})
    names = sorted(digests[0])
    ok = digests[0] == digests[1] and len(names) == 3
    report(12, "determinism", ok, f"{len(names)} files byte-identical across two runs: {', '.join(names)}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
