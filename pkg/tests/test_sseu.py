import math

import numpy as np
import pytest

from scalegate import diffcore as dc
from scalegate.diffcore import grad_check
from scalegate.errors import ContractError, DimensionError, DomainError
from scalegate.sseu import (LOG_VAR_MAX, LOG_VAR_MIN, ScaleEstimate, SSEUHead, calibration_ratio,
                            calibration_ratio_of, clamp_log_var, nll)


def test_zero_output_weights():
    head = SSEUHead(6, hidden=8)
    head.W_mu.data[:] = 0
    est = head.predict(np.arange(6.0))
    assert (est.mu, est.log_var, est.sigma) == (0.0, 0.0, 1.0)


@pytest.mark.parametrize("raw,expected", [(-1e6, LOG_VAR_MIN), (-10.0, -10.0), (0.3, 0.3),
                                          (4.0, 4.0), (1e6, LOG_VAR_MAX)])
def test_clamp(raw, expected):
    assert clamp_log_var(raw) == expected


def test_clamp_endpoint_sigmas():
    lo, hi = ScaleEstimate(0.0, LOG_VAR_MIN).sigma, ScaleEstimate(0.0, LOG_VAR_MAX).sigma
    assert lo == pytest.approx(0.006737946999085467, rel=1e-12)
    assert hi == pytest.approx(7.38905609893065, rel=1e-12)


def test_head_clamps_extreme_logvar():
    head = SSEUHead(4, hidden=8)
    for big in (1e6, -1e6):
        head.W_sigma.data[:] = big
        mu, lv = head.predict_batch(np.random.default_rng(0).normal(size=(3, 4)))
        assert np.all(np.isfinite(lv)) and np.all((lv == LOG_VAR_MIN) | (lv == LOG_VAR_MAX) | (lv == 0))
        assert np.all(np.isfinite(np.exp(0.5 * lv)))


@pytest.mark.parametrize("mu,lv,s,expected", [
    (0.0, 0.0, 0.0, 0.0),
    (1.0, 0.0, 0.0, 0.5),
    (0.0, math.log(4.0), 2.0, 1.1931471805599454),  # 0.5 + ln 2
])
def test_nll_examples(mu, lv, s, expected):
    assert abs(nll(ScaleEstimate(mu, lv), s) - expected) < 1e-9


@pytest.mark.parametrize("d", [0.1, 0.5, 1.3])
def test_nll_minimized_at_log_squared_residual(d):
    grid = np.linspace(-8, 3, 22001)
    vals = [nll(ScaleEstimate(0.0, v), d) for v in grid]
    assert abs(grid[int(np.argmin(vals))] - math.log(d * d)) < 1e-3


def test_nll_length_mismatch():
    with pytest.raises(ContractError):
        nll([ScaleEstimate(0, 0)], [1.0, 2.0])


def test_calibration_of_well_calibrated_residuals():
    # E|N(0, s^2)| = s sqrt(2/pi)
    rng = np.random.default_rng(0)
    mu = rng.normal(size=10000)
    ratio = calibration_ratio(mu, np.full(10000, 0.2), mu + rng.normal(0, 0.2, 10000))
    assert abs(ratio - 0.7978845608028654) < 0.05


def test_calibration_of_estimates():
    ests = [ScaleEstimate.from_sigma(0.0, 0.5)] * 2
    assert calibration_ratio_of(ests, [0.5, -0.5]) == pytest.approx(1.0)


@pytest.mark.parametrize("args", [([], [], []), ([0.0], [1.0, 1.0], [0.0])])
def test_calibration_contract(args):
    with pytest.raises(ContractError):
        calibration_ratio(*args)


def test_predict_domain_and_dims():
    head = SSEUHead(4, hidden=8)
    with pytest.raises(DomainError):
        head.predict(np.array([0.0, np.nan, 0.0, 0.0]))
    with pytest.raises(DimensionError):
        head.predict(np.zeros(5))


def test_invalid_estimate():
    with pytest.raises(DomainError):
        ScaleEstimate(0.0, 5.0)


def test_gradcheck_head_nll():
    rng = np.random.default_rng(1)
    head = SSEUHead(5, hidden=7, rng=rng)
    head.W_sigma.data = rng.normal(0, 0.3, head.W_sigma.shape)
    x = dc.constant(rng.normal(size=(6, 5)))
    target, mask = rng.normal(size=6), np.array([1, 1, 0, 1, 0, 1.0])

    def loss():
        mu, lv = head.forward(x)
        return dc.gaussian_nll(mu, lv, target, mask)

    rep = grad_check(loss, head.parameters(), tolerance=1e-6)
    assert rep.passed, rep.worst


def test_round_trip():
    head = SSEUHead(5, hidden=7, rng=np.random.default_rng(3))
    back = SSEUHead.from_dict(head.to_dict())
    x = np.random.default_rng(4).normal(size=(3, 5))
    assert np.array_equal(head.predict_batch(x)[0], back.predict_batch(x)[0])
