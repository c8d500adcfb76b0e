import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scalegate import diffcore as dc
from scalegate.cshlora import CSHLoRAAdapter, apply_adapted, init_tiers, tier_layout
from scalegate.diffcore import Tensor, grad_check
from scalegate.errors import DimensionError, DomainError


def trained_like(r=16, d_in=6, d_out=5, seed=0):
    """Adapter with non-zero B and jittered thresholds, as after some training."""
    rng = np.random.default_rng(seed)
    ad = CSHLoRAAdapter(d_in, d_out, r, rng=rng)
    ad.B.data = rng.normal(0, 0.5, ad.B.shape)
    ad.tau.data = ad.tau.data + rng.normal(0, 0.1, r)
    return ad


@pytest.mark.parametrize("r,layout", [
    (64, ((0, 11), (11, 32), (32, 64))),
    (16, ((0, 3), (3, 8), (8, 16))),
    (3, ((0, 1), (1, 2), (2, 3))),
])
def test_tier_layout(r, layout):
    assert tier_layout(r) == layout


def test_tier_layout_too_small():
    with pytest.raises(DomainError):
        tier_layout(2)


def test_init_thresholds_r64():
    ad = init_tiers(64)
    assert np.all(ad.tau.data[:11] == 0) and np.all(ad.tau.data[11:32] == 1)
    assert np.all(ad.tau.data[32:] == 4)
    assert ad.sharpness == pytest.approx(5.0, rel=1e-15)
    assert np.all(ad.B.data == 0)


def test_gate_values_at_init():
    h = init_tiers(64).gate(1.0).h
    assert h[0] == pytest.approx(0.0066928509242848554, rel=1e-12)  # sigmoid(-5)
    assert h[20] == 0.5
    assert h[40] == pytest.approx(0.9999996940977731, rel=1e-12)  # sigmoid(15)


def test_half_activation_at_threshold():
    ad = trained_like()
    for k in range(ad.r):
        assert ad.gate(float(ad.tau.data[k])).h[k] == 0.5


def test_gates_monotone_in_scale():
    ad = trained_like(seed=3)
    h = ad.gates(np.linspace(-3, 5, 100))
    assert np.all(np.diff(h, axis=0) <= 0)


def test_hard_routing_limit():
    ad = init_tiers(16)
    ad.log_sharpness.data[:] = math.log(1e4)
    for s in (-0.5, 0.5, 2.0):
        assert np.array_equal(ad.gate(s).h, (ad.tau.data > s).astype(float))


def test_init_tier_pattern():
    ad = init_tiers(64)
    fine = ad.gate(-1.0).h
    assert np.all(fine > 0.99)
    coarse = ad.gate(1.3).h
    obj, struct, sem = (coarse[a:b] for a, b in ad.layout)
    assert np.all(obj < 0.25) and np.all(struct < 0.25) and np.all(sem > 0.99)


def test_gate_rejects_non_finite():
    with pytest.raises(DomainError):
        init_tiers(8).gate(float("nan"))


def test_delta_w_continuous_across_tier_boundaries():
    ad = trained_like(seed=1)
    for boundary in (math.log10(0.2), 0.0, 1.0):
        eps = 1e-6
        jump = np.abs(ad.delta_w(boundary + eps) - ad.delta_w(boundary - eps)).max()
        # Lipschitz bound: |dDW/ds| <= scaling * alpha/4 * sum_k |B_k||A_k|
        bound = 2 * eps * ad.scaling * ad.sharpness / 4 * np.abs(ad.B.data).sum() * np.abs(ad.A.data).max()
        assert jump <= bound


def test_zero_b_gives_zero_update():
    ad = init_tiers(16, d_in=4, d_out=3)
    assert np.all(ad.delta_w(0.3) == 0.0)


@settings(max_examples=25, deadline=None)
@given(st.floats(-2, 3), st.integers(0, 1000))
def test_factored_matches_dense(s, seed):
    ad = trained_like(seed=seed % 7)
    x = np.random.default_rng(seed).normal(size=(4, ad.d_in))
    fact = ad.update(dc.constant(x), dc.constant(np.full(4, s))).data
    dense = x @ ad.delta_w(s).T
    assert np.abs(fact - dense).max() < 1e-12


def test_effective_magnitude_matches_frobenius():
    ad = trained_like(seed=5)
    fro = ad.scaling * np.linalg.norm(ad.B.data @ ad.A.data)
    assert abs(ad.effective_magnitude() - fro) < 1e-10


def test_apply_adapted_spoofed_coarse_scale_is_frozen_path():
    # with every tau <= 4, s = 10 closes all gates to ~sigmoid(-30)
    ad = trained_like(seed=2)
    rng = np.random.default_rng(9)
    W = dc.constant(rng.normal(size=(ad.d_out, ad.d_in)))
    x = rng.normal(size=ad.d_in)
    out = apply_adapted(W, ad, dc.constant([10.0]), dc.constant(x)).data
    assert np.abs(out - W.data @ x).max() < 1e-9


def test_apply_adapted_dimension_errors():
    ad = init_tiers(8, d_in=4, d_out=3)
    with pytest.raises(DimensionError):
        apply_adapted(dc.constant(np.zeros((3, 5))), ad, dc.constant([0.0]), dc.constant(np.zeros(4)))
    with pytest.raises(DimensionError):
        apply_adapted(dc.constant(np.zeros((3, 4))), ad, dc.constant([0.0]), dc.constant(np.zeros(5)))


def test_gradcheck_all_adapter_leaves_and_scale():
    ad = trained_like(r=8, d_in=4, d_out=3, seed=4)
    rng = np.random.default_rng(0)
    x = dc.constant(rng.normal(size=(5, 4)))
    s = Tensor(rng.uniform(-1, 2, 5), requires_grad=True, name="s")
    w = dc.constant(rng.normal(size=(5, 3)))
    loss = lambda: dc.mean(dc.mul(dc.gelu(ad.update(x, s)), w))
    leaves = dict(ad.parameters(), s=s)
    rep = grad_check(loss, leaves, tolerance=1e-6)
    assert rep.passed, rep.worst


def test_round_trip_dict():
    ad = trained_like(seed=6)
    back = CSHLoRAAdapter.from_dict(ad.to_dict())
    for a, b in zip(ad.parameters().values(), back.parameters().values()):
        assert np.array_equal(a.data, b.data)
    assert back.layout == ad.layout
