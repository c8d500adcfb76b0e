import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scalegate.cshlora import init_tiers
from scalegate.diagnostics import (ProbeReport, bootstrap_interval, export_gate_curves,
                                   ridge_r2_cv, spoof_grid, spoof_sweep, tau_probe,
                                   write_probe_csv, write_spoof_csv)
from scalegate.errors import ConfigError, ContractError
from scalegate.synthdata import block_factors, generate_corpus
from scalegate.trainer import accuracy


def test_grid_midpoint_is_geometric_mean():
    grid = spoof_grid()
    assert len(grid) == 13 and grid[0] == pytest.approx(0.01) and grid[-1] == pytest.approx(30.0)
    assert grid[6] == pytest.approx(0.5477225575051661, rel=1e-12)


def test_grid_rejects_bad_bounds():
    with pytest.raises(ConfigError):
        spoof_grid(1.0, 0.5)


def test_zero_offset_matches_plain_accuracy(short_run, small_corpus):
    b = short_run.bundle
    test = generate_corpus(21, 400, fixed_g=0.5)
    rep = spoof_sweep(b, test.features(), test.labels(), 0.5, grid=[0.05, 0.5, 5.0], n_boot=50)
    assert rep.accuracy[1] == accuracy(b, test.features(), test.labels(), test.true_s)


def test_spoof_on_empty_set(short_run):
    with pytest.raises(ContractError):
        spoof_sweep(short_run.bundle, np.zeros((0, 33)), np.zeros(0, int), 1.0)


@pytest.mark.parametrize("p,n", [(0.5, 400), (0.8, 1000), (0.3, 2500)])
def test_bootstrap_half_width(p, n):
    correct = np.zeros(n)
    correct[: int(p * n)] = 1
    lo, hi = bootstrap_interval(correct, n_boot=2000, seed=1)
    expected = 1.959963984540054 * math.sqrt(p * (1 - p) / n)
    assert abs((hi - lo) / 2 - expected) / expected < 0.2


def test_spoof_csv(tmp_path, short_run):
    test = generate_corpus(22, 200, fixed_g=2.0)
    rep = spoof_sweep(short_run.bundle, test.features(), test.labels(), 2.0, n_boot=20)
    write_spoof_csv([rep], tmp_path / "s.csv")
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert len(rows) == 13 and set(rows[0]) == {"g", "acc", "ci_lo", "ci_hi", "variant"}
    assert all(float(r["ci_lo"]) <= float(r["acc"]) <= float(r["ci_hi"]) for r in rows)


# --- ridge probe --------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(st.floats(-50, 50).filter(lambda a: abs(a) > 1e-3), st.floats(-10, 10), st.integers(0, 99))
def test_r2_affine_invariant(a, c, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=200)
    y = 0.7 * x + rng.normal(size=200)
    assert abs(ridge_r2_cv(a * x + c, y) - ridge_r2_cv(x, y)) < 1e-10


def test_r2_scaled_by_three():
    rng = np.random.default_rng(0)
    x = rng.normal(size=300)
    y = x ** 2 + x
    assert abs(ridge_r2_cv(3 * x, y) - ridge_r2_cv(x, y)) < 1e-10


def test_r2_linear_target():
    x = np.random.default_rng(1).uniform(-1, 4, 500)
    assert ridge_r2_cv(x, 2.5 * x - 1) >= 0.99


def test_r2_constant_cases():
    x = np.random.default_rng(2).normal(size=100)
    assert ridge_r2_cv(x, np.full(100, 3.0)) == 0.0
    assert ridge_r2_cv(np.zeros(100), x) == 0.0


def test_r2_floored_at_zero():
    rng = np.random.default_rng(3)
    assert ridge_r2_cv(rng.normal(size=60), rng.normal(size=60)) >= 0.0


def test_probe_shapes(short_run, tmp_path):
    c = generate_corpus(23, 300)
    rep = tau_probe(short_run.bundle, c.features(), c.true_s, block_factors(c.features()))
    assert rep.r2.shape == (16, 3) and np.all(rep.r2 <= 1) and np.all(rep.r2 >= 0)
    assert rep.tier_means().shape == (3, 3)
    assert rep.tau_drift().shape == (16,)
    write_probe_csv(rep, tmp_path / "p.csv")
    rows = list(csv.DictReader(open(tmp_path / "p.csv")))
    assert len(rows) == 48 and rows[0]["tier"] == "object" and rows[-1]["tier"] == "semantic"


def test_probe_needs_100_samples(short_run):
    c = generate_corpus(24, 50)
    with pytest.raises(ContractError):
        tau_probe(short_run.bundle, c.features(), c.true_s, block_factors(c.features()))


def test_matched_minus_mismatched_on_diagonal_matrix():
    r2 = np.zeros((6, 3))
    r2[0, 0] = r2[1:3, 1] = r2[3:, 2] = 1.0
    rep = ProbeReport(r2, ((0, 1), (1, 3), (3, 6)))
    assert rep.matched_mean() == 1.0 and rep.mismatched_mean() == 0.0


# --- gate curves --------------------------------------------------------------

def test_gate_curves_half_activation(tmp_path):
    curve = export_gate_curves(init_tiers(64), path=tmp_path / "g.csv")
    for name, tau in (("object", 0.0), ("structure", 1.0)):
        # linear interpolation between the bracketing grid points
        assert np.interp(tau, curve.s, curve.curves[name]) == pytest.approx(0.5, abs=5e-3)
    # tau = 4 lies beyond the grid; the semantic curve stays open
    assert np.all(curve.curves["semantic"] > 0.99)
    with open(tmp_path / "g.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["s", "h_object", "h_structure", "h_semantic"] and len(rows) == 201


def test_gate_curves_exact_half_on_grid():
    curve = export_gate_curves(init_tiers(16), s_grid=np.array([-1.0, 0.0, 1.0, 2.0]))
    assert curve.curves["object"][1] == 0.5 and curve.curves["structure"][2] == 0.5


def test_gate_curves_monotone():
    ad = init_tiers(16)
    ad.tau.data = ad.tau.data + np.random.default_rng(0).normal(0, 0.3, 16)
    for c in export_gate_curves(ad).curves.values():
        assert np.all(np.diff(c) <= 0)


def test_gate_curves_step_functions_at_large_sharpness():
    ad = init_tiers(16)
    ad.log_sharpness.data[:] = math.log(1e4)
    curve = export_gate_curves(ad, s_grid=np.linspace(-2, 2, 41) + 0.05)
    for name in ("object", "structure"):
        c = curve.curves[name]
        assert np.all(np.minimum(c, 1 - c) < 1e-12)
