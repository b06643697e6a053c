"""
Sampling JPEG-aware transformations
===================================

Each crafting step averages gradients over a handful of random
transformations. Most of them involve JPEG, and the lowest quality factor
allowed falls from 95 to 50 over the first half of the run.
"""

from collections import Counter

import numpy as np

from jpegrad.transforms import (
    CATEGORIES,
    CATEGORY_PROBS,
    CurriculumConfig,
    apply_transform,
    qf_min,
    sample_transform,
    transform_vjp,
)

cfg = CurriculumConfig(qf_max=95, qf_min_final=50, total_steps=200)
for t in (0, 25, 50, 75, 100, 150, 200):
    print(f"step {t:3d}: qf range [{qf_min(t, cfg)}, {cfg.qf_max}]")

# a few draws late in the run
rng = np.random.default_rng(0)
for _ in range(6):
    print("  ", sample_transform(rng, (50, 95)))

# category frequencies against the target mix
counts = Counter(sample_transform(rng, (50, 95)).category for _ in range(10_000))
for cat, p in zip(CATEGORIES, CATEGORY_PROBS):
    print(f"{cat.value:16s} target {p:.0%}  observed {counts[cat] / 10_000:.1%}")

# every sampled chain is differentiable end to end
x = rng.random((32, 32, 3)).astype(np.float32)
spec = sample_transform(rng, (50, 95))
y, ctx = apply_transform(spec, x)
g = transform_vjp(ctx, np.ones_like(y))
print(f"{spec}: output {y.shape}, gradient norm {np.linalg.norm(g):.2f}")
