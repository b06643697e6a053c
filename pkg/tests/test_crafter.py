import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jpegrad.crafter import (
    LOG_HEADER,
    CraftConfig,
    CraftState,
    InvariantViolation,
    check_constraints,
    craft,
    inner_update,
    outer_pgd_step,
    project_linf,
    read_log_csv,
    write_log_csv,
)
from jpegrad.surrogate import init_surrogate, snapshot_head, zero_surrogate
from jpegrad.transforms import Category, TransformSpec

EPS = 8 / 255


def test_project_examples():
    x = np.array([0.5, 0.52])
    assert np.array_equal(project_linf(x, np.array([0.5, 0.5]), EPS), x)
    np.testing.assert_allclose(project_linf(np.array([0.6]), np.array([0.5]), EPS), 0.5 + 8 / 255)
    assert abs(0.5 + 8 / 255 - 0.53137) < 1e-5
    assert project_linf(np.array([-0.01]), np.array([0.01]), EPS)[0] == 0.0
    with pytest.raises(ValueError):
        project_linf(np.zeros(3), np.zeros(4), EPS)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), eps=st.floats(1e-3, 1.0))
def test_projection_satisfies_both_constraints(seed, eps):
    r = np.random.default_rng(seed)
    ref = r.random(64)
    x = ref + r.uniform(-2, 2, 64)
    y = project_linf(x, ref, eps)
    assert np.all(np.abs(y - ref) <= eps + 1e-12)
    assert np.all((y >= 0) & (y <= 1))
    assert np.array_equal(project_linf(y, ref, eps), y)


@pytest.mark.parametrize("kw", [dict(alpha=0.0), dict(alpha=0.1, epsilon=0.05), dict(epsilon=1.5),
                                dict(steps=-1), dict(eot_samples=0), dict(loss_samples=0),
                                dict(inner_lr=-1.0), dict(qf_min_final=99)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        CraftConfig(**kw)


def test_sign_step_pattern(monkeypatch):
    import jpegrad.crafter as crafter

    monkeypatch.setattr(crafter, "eot_gradient",
                        lambda x, p, c, r, q: (np.array([[[0.3, -0.2, 0.0]]], dtype=np.float32), [0.0]))
    ref = np.full((1, 1, 3), 0.5, dtype=np.float32)
    cfg = CraftConfig(alpha=1 / 255, eot_samples=1)
    state = CraftState.start([ref])
    outer_pgd_step(state, init_surrogate(0), cfg, np.random.default_rng(0))
    np.testing.assert_allclose(state.x_p[0] - ref, [[[1 / 255, -1 / 255, 0]]], atol=1e-7)


def test_zero_denoiser_moves_every_pixel_up(monkeypatch):
    import jpegrad.crafter as crafter

    monkeypatch.setattr(crafter, "sample_transform", lambda rng, q: TransformSpec(Category.IDENTITY))
    x = np.random.default_rng(0).uniform(0.2, 0.8, (8, 8, 3)).astype(np.float32)
    x[0, 0, 0] = 1.0  # saturated pixel stays put
    cfg = CraftConfig(eot_samples=1)
    state = CraftState.start([x])
    outer_pgd_step(state, zero_surrogate(), cfg, np.random.default_rng(0))
    moved = state.x_p[0] - x
    assert moved[0, 0, 0] == 0
    mask = np.ones_like(x, dtype=bool)
    mask[0, 0, 0] = False
    np.testing.assert_allclose(moved[mask], cfg.alpha, atol=1e-7)


def test_all_zero_gradients_is_noop(monkeypatch, caplog):
    import jpegrad.crafter as crafter

    monkeypatch.setattr(crafter, "sample_transform", lambda rng, q: TransformSpec(Category.IDENTITY))
    x = np.zeros((8, 8, 3), dtype=np.float32)
    state = CraftState.start([x])
    with caplog.at_level(logging.WARNING):
        outer_pgd_step(state, zero_surrogate(), CraftConfig(eot_samples=2), np.random.default_rng(0))
    assert np.array_equal(state.x_p[0], x)
    assert "vanished" in caplog.text


def test_inner_update_contracts(image):
    p = init_surrogate(0)
    state = CraftState.start([image])
    before = snapshot_head(p)
    inner_update(state, p, CraftConfig(inner_unroll=0), np.random.default_rng(0))
    for k, v in before.arrays.items():
        assert np.array_equal(p.head[k], v)
    x_before = state.x_p[0].copy()
    inner_update(state, p, CraftConfig(inner_unroll=1), np.random.default_rng(0))
    assert not np.array_equal(p.head["w3"], before.arrays["w3"])
    assert np.array_equal(state.x_p[0], x_before)
    assert math.isfinite(state.inner_loss)


def test_clean_reference_immutable(image):
    state = CraftState.start([image])
    with pytest.raises(ValueError):
        state.clean_ref[0][0, 0, 0] = 0.0
    state.x_p[0][0, 0, 0] = 0.123
    assert state.clean_ref[0][0, 0, 0] == image[0, 0, 0]


def test_check_constraints(image):
    state = CraftState.start([image])
    check_constraints(state, EPS)
    state.x_p[0] = np.clip(image + 0.1, 0, 1)
    state.step = 7
    with pytest.raises(InvariantViolation) as info:
        check_constraints(state, EPS)
    assert info.value.step == 7
    state.x_p[0] = image.copy()
    state.x_p[0][0, 0, 0] = np.nan
    with pytest.raises(InvariantViolation):
        check_constraints(state, EPS)


def test_zero_steps_returns_clean(image):
    out, log = craft([image], CraftConfig(steps=0))
    assert np.array_equal(out[0], image) and log == []
    with pytest.raises(ValueError):
        craft([], CraftConfig())


def test_short_run_deterministic_and_constrained(rng):
    imgs = [rng.random((16, 16, 3)).astype(np.float32), rng.random((8, 24, 3)).astype(np.float32)]
    cfg = CraftConfig(steps=6, seed=3)
    seen = []
    p1, l1 = craft(imgs, cfg, on_step=lambda s: seen.append(s.step))
    p2, l2 = craft(imgs, cfg)
    assert seen == list(range(6))
    for a, b, c in zip(p1, p2, imgs):
        assert np.array_equal(a, b)
        assert np.abs(a.astype(np.float64) - c).max() <= EPS + 1e-6
        assert a.min() >= 0 and a.max() <= 1
    assert [r.as_row() for r in l1] == [r.as_row() for r in l2]
    assert [r.qf_min for r in l1] == [95, 80, 65, 50, 50, 50]
    assert all(len(r.outer_losses) == cfg.eot_samples for r in l1)
    p3, _ = craft(imgs, CraftConfig(steps=6, seed=4))
    assert not np.array_equal(p1[0], p3[0])


def test_craft_does_not_touch_params(image):
    p = init_surrogate(0)
    before = snapshot_head(p)
    craft([image], CraftConfig(steps=3), params=p)
    for k, v in before.arrays.items():
        assert np.array_equal(p.head[k], v)


def test_log_csv_roundtrip(tmp_path, image):
    _, log = craft([image], CraftConfig(steps=3))
    write_log_csv(log, tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == ",".join(LOG_HEADER)
    rows = read_log_csv(tmp_path / "log.csv")
    for r, rec in zip(rows, log):
        assert [r[k] for k in LOG_HEADER] == pytest.approx(rec.as_row(), rel=0, abs=0)
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_log_csv(tmp_path / "bad.csv")
