import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import natural
from jpegrad.diffjpeg import hard_jpeg
from jpegrad.metrics import (
    EVAL_QFS,
    PROTECTION_HEADER,
    ZONES,
    SurvivalHeatmap,
    dct_survival_heatmap,
    eval_protection,
    grad_coverage,
    jpeg_survival,
    perturbation_stats,
    psnr,
    read_heatmap_csv,
    read_protection_csv,
    read_zone_csv,
    survival_from_deltas,
    write_heatmap_csv,
    write_protection_csv,
    write_zone_csv,
    zone_survival,
)
from jpegrad.surrogate import init_surrogate


def test_psnr_examples(image):
    assert psnr(image, image) == math.inf
    x = np.full((8, 8, 3), 0.5)
    assert psnr(x + 8 / 255, x) == pytest.approx(20 * math.log10(255 / 8), abs=1e-9)
    assert psnr(x + 8 / 255, x) == pytest.approx(30.07, abs=5e-3)
    with pytest.raises(ValueError):
        psnr(x, x[:4])


def test_perturbation_stats(image):
    assert perturbation_stats(image, image) == {"max_delta": 0.0, "mean_delta": 0.0, "coverage": 0.0}
    x = np.full((8, 8, 3), 0.25)
    s = perturbation_stats(x + 8 / 255, x)
    assert s["max_delta"] == pytest.approx(8.0) and s["mean_delta"] == pytest.approx(8.0)
    assert s["coverage"] == 1.0


@pytest.mark.parametrize("scale,expected", [(1.0, 1.0), (0.5, math.sqrt(0.5)), (2.0, 1.0)])
def test_survival_analytic(scale, expected, rng):
    d = rng.standard_normal(100)
    assert survival_from_deltas(d, scale * d) == pytest.approx(expected, abs=1e-12)


def test_survival_orthogonal_and_negative():
    assert survival_from_deltas(np.array([1.0, 0.0]), np.array([0.0, 3.0])) == 0.0
    assert survival_from_deltas(np.array([1.0, 0.0]), np.array([-1.0, 0.0])) == 0.0


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), qf=st.integers(1, 100))
def test_survival_in_unit_interval(seed, qf):
    r = np.random.default_rng(seed)
    clean = r.random((8, 8, 3)).astype(np.float32)
    prot = np.clip(clean + r.uniform(-0.05, 0.05, clean.shape), 0, 1).astype(np.float32)
    s = jpeg_survival(prot, clean, qf)
    assert 0.0 <= s <= 1.0


def test_survival_of_unchanged_image(image):
    assert jpeg_survival(image, image, 75) == 1.0


def test_grad_coverage(image, rng):
    for qf in (50, 75, 90):
        assert grad_coverage("diff", image, qf, rng) == 1.0
        assert grad_coverage("hard", image, qf, rng) == 0.0
    # a zero probe is rejected and redrawn
    assert grad_coverage("diff", image, 75, rng, cotangent=np.zeros_like(image)) == 1.0
    with pytest.raises(ValueError):
        grad_coverage("soft", image, 75)


def test_heatmap_qf100_and_constant(rng):
    h = dct_survival_heatmap(rng.random((64, 64, 3)).astype(np.float32), 100)
    assert h.grid.shape == (8, 8) and np.all(h.grid >= 0.9)
    assert h.n_blocks == 64
    flat = dct_survival_heatmap(np.full((16, 16, 3), 0.3, dtype=np.float32), 50)
    np.testing.assert_array_equal(flat.grid[1:, :], 1.0)
    np.testing.assert_array_equal(flat.grid[:, 1:], 1.0)
    assert 0.0 <= flat.grid[0, 0] <= 1.0
    assert zone_survival(flat).high == 1.0


def test_heatmap_decays_along_zones():
    for name in ("astronaut", "coffee", "chelsea"):
        h = dct_survival_heatmap(natural(name, 256), 50)
        z = zone_survival(h)
        assert z.dc >= 0.95
        assert z.dc >= z.low >= z.mid >= z.high
        sums = np.add.outer(np.arange(8), np.arange(8))
        diag = [h.grid[sums == k].mean() for k in range(15)]
        rho = scipy.stats.spearmanr(np.arange(15), diag)[0]
        assert rho < -0.8


def test_zone_masks_partition_grid():
    total = sum(m.astype(int) for m in ZONES.values())
    assert np.all(total == 1)
    assert ZONES["dc"].sum() == 1 and ZONES["low"].sum() == 5
    z = zone_survival(SurvivalHeatmap(np.ones((8, 8)), 50, 1))
    assert z.as_row() == [1.0, 1.0, 1.0, 1.0]


def test_heatmap_shape_error():
    with pytest.raises(ValueError):
        dct_survival_heatmap(np.zeros((16, 16)), 50)


def test_eval_protection_identical_inputs(rng):
    clean = [rng.random((16, 16, 3)).astype(np.float32)]
    table = eval_protection(clean, clean, init_surrogate(0), n=4, rng=rng)
    assert [r.qf for r in table.rows] == list(EVAL_QFS)
    assert all(r.delta == 0 for r in table.rows)
    assert table.wins == 0
    with pytest.raises(ValueError):
        eval_protection(clean, [], init_surrogate(0))


def test_eval_protection_uses_deployment_codec(rng):
    # protected = a brighter copy; shared noise makes the row deterministic
    clean = [rng.random((16, 16, 3)).astype(np.float32)]
    prot = [np.clip(clean[0] + 0.02, 0, 1)]
    a = eval_protection(clean, prot, init_surrogate(0), qfs=(75,), rng=np.random.default_rng(1))
    b = eval_protection(clean, prot, init_surrogate(0), qfs=(75,), rng=np.random.default_rng(1))
    assert a.rows == b.rows
    assert np.all(hard_jpeg(prot[0], 75).max() >= 0)


def test_csv_roundtrips(tmp_path, rng):
    clean = [rng.random((16, 16, 3)).astype(np.float32)]
    prot = [np.clip(clean[0] + rng.uniform(-0.03, 0.03, clean[0].shape), 0, 1).astype(np.float32)]
    table = eval_protection(clean, prot, init_surrogate(0), n=2, rng=rng)
    write_protection_csv(table, tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == ",".join(PROTECTION_HEADER)
    assert read_protection_csv(tmp_path / "p.csv").rows == table.rows

    h = dct_survival_heatmap(clean[0], 60)
    write_heatmap_csv(h, tmp_path / "h.csv")
    assert np.array_equal(read_heatmap_csv(tmp_path / "h.csv").grid, h.grid)

    z = zone_survival(h)
    write_zone_csv(z, tmp_path / "z.csv")
    assert (tmp_path / "z.csv").read_text().splitlines()[0] == "dc,low,mid,high"
    assert read_zone_csv(tmp_path / "z.csv") == z
    assert not list(tmp_path.glob("*.tmp"))
