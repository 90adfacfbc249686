import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from barprune import tensor as T
from barprune.errors import DimensionError
from barprune.gates import (
    DEFAULT_HC,
    GateParams,
    HCConfig,
    alive_mask,
    apply_gates,
    deterministic_gates,
    gate_open_probability,
    hc_sparsity_loss,
    init_gate_params,
    sample_gates,
)
from gradcheck import check_grads

BETA, GAMMA, ZETA = 2.0 / 3.0, -0.1, 1.1


def gates64(values, protect=False):
    return GateParams(T.parameter(np.asarray(values, dtype=np.float64)), DEFAULT_HC, protect)


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def hc_cdf(t, log_alpha=0.0):
    """P(z <= t) for the clamped stretched concrete, written from first principles."""
    if t < 0:
        return 0.0
    if t >= 1:
        return 1.0
    s = (t - GAMMA) / (ZETA - GAMMA)
    return _sig(BETA * math.log(s / (1 - s)) - log_alpha)


def test_point_mass_at_zero_hand_value():
    # s = 1/12 at the lower clamp edge
    assert hc_cdf(0.0) == pytest.approx(_sig(BETA * math.log(1 / 11)), abs=1e-15)
    assert hc_cdf(0.0) == pytest.approx(0.168, abs=5e-4)


def test_hc_config_validation():
    with pytest.raises(ValueError):
        HCConfig(beta=0.0)
    with pytest.raises(ValueError):
        HCConfig(gamma=0.1)
    with pytest.raises(ValueError):
        HCConfig(zeta=0.9)


def test_death_threshold_value():
    expected = BETA * math.log((1 / 12) / (11 / 12))
    assert DEFAULT_HC.death_threshold == pytest.approx(expected, abs=1e-15)
    assert DEFAULT_HC.death_threshold == pytest.approx(-1.5986, abs=1e-4)


# ---------------------------------------------------------------------------
# init


def test_init_range_and_count():
    phi = init_gate_params(3, T.Rng(0))
    assert phi.channels == 3
    assert np.all((phi.log_alpha.value >= 0) & (phi.log_alpha.value < 0.01))


def test_init_deterministic():
    a = init_gate_params(8, T.Rng(5)).log_alpha.value
    b = init_gate_params(8, T.Rng(5)).log_alpha.value
    assert np.array_equal(a, b)


def test_init_mean_law_of_large_numbers():
    n = 100_000
    la = init_gate_params(n, T.Rng(1), dtype=np.float64).log_alpha.value
    sigma = 0.01 / math.sqrt(12) / math.sqrt(n)
    assert abs(la.mean() - 0.005) < 3 * sigma


def test_init_zero_channels_rejected():
    with pytest.raises(ValueError):
        init_gate_params(0, T.Rng(0))


def test_log_alpha_must_be_vector():
    with pytest.raises(DimensionError):
        GateParams(T.parameter(np.zeros((2, 2))))


# ---------------------------------------------------------------------------
# sampling


def test_sample_symmetry_point():
    z = sample_gates(gates64([0.0]), T.Rng(0), eps=np.array([0.5])).values
    assert z[0] == pytest.approx(0.5, abs=1e-15)


def test_sample_small_eps_clamps_to_zero():
    z = sample_gates(gates64([0.0, 0.0]), T.Rng(0), eps=np.array([0.0, 1e-9])).values
    assert np.all(z == 0.0)


def test_sample_large_eps_clamps_to_one():
    z = sample_gates(gates64([0.0]), T.Rng(0), eps=np.array([1.0])).values
    assert z[0] == 1.0


def test_sample_statistics_against_analytic_cdf():
    n = 100_000
    z = sample_gates(gates64(np.zeros(n)), T.Rng(42)).values
    p0 = float(np.mean(z == 0.0))
    p1 = float(np.mean(z == 1.0))
    assert abs(p0 - hc_cdf(0.0)) < 0.01
    assert abs(p1 - (1 - hc_cdf(1 - 1e-12))) < 0.01
    zs = np.sort(z)
    ecdf_hi = np.arange(1, n + 1) / n
    ecdf_lo = np.arange(0, n) / n
    interior = (zs > 0) & (zs < 1)
    cdf = np.array([hc_cdf(t) for t in zs[interior]])
    ks = max(np.max(np.abs(ecdf_hi[interior] - cdf)), np.max(np.abs(ecdf_lo[interior] - cdf)))
    assert ks < 0.01


def test_sample_in_unit_interval_for_extreme_params():
    phi = gates64(np.linspace(-50, 50, 101))
    z = sample_gates(phi, T.Rng(3)).values
    assert np.all((z >= 0) & (z <= 1))


def test_sample_gradient_matches_fd_at_fixed_eps():
    rng = np.random.default_rng(0)
    for seed in range(20):
        phi = gates64(rng.normal(0, 1.5, size=5))
        eps = np.random.default_rng(seed).uniform(0.05, 0.95, size=5)
        h = T.tensor(rng.normal(size=(2, 5, 3, 3)), dtype=np.float64)
        w = rng.normal(size=(2, 5, 3, 3))

        def build():
            out = apply_gates(h, sample_gates(phi, T.Rng(0), eps=eps))
            return T.sum_all(out * w)

        check_grads(build, [phi.log_alpha], tol=1e-4)


# ---------------------------------------------------------------------------
# deterministic gates and masks


@pytest.mark.parametrize(
    "la, expected",
    [
        (0.0, 0.5),
        (-2.0, 0.0),
        (5.0, 1.0),
    ],
)
def test_deterministic_examples(la, expected):
    assert deterministic_gates(gates64([la])).values[0] == pytest.approx(expected, abs=1e-15)


def test_deterministic_unclamped_value_at_minus_two():
    raw = _sig(-3.0) * 1.2 - 0.1
    assert raw == pytest.approx(-0.0431, abs=5e-4)


def test_deterministic_monotone_on_grid():
    z = deterministic_gates(gates64(np.linspace(-10, 10, 4001))).values
    assert np.all(np.diff(z) >= 0)
    assert np.all((z >= 0) & (z <= 1))


def test_alive_mask_all_dead_without_clamp():
    assert not alive_mask(gates64(np.full(4, -10.0))).any()


def test_alive_mask_clamp_keeps_one_lowest_index_on_ties():
    m = alive_mask(gates64(np.full(4, -10.0), protect=True))
    assert m.tolist() == [True, False, False, False]
    m = alive_mask(gates64([-10.0, -3.0, -3.0, -12.0], protect=True))
    assert m.tolist() == [False, True, False, False]


def test_alive_mask_threshold_boundary():
    thr = DEFAULT_HC.death_threshold
    vals = np.array([thr - 1e-6, thr + 1e-6, thr - 0.5, thr + 0.5, 0.0])
    m = alive_mask(gates64(vals))
    assert m.tolist() == [False, True, False, True, True]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-8, 8, allow_nan=False), min_size=1, max_size=12), st.booleans())
def test_alive_mask_matches_support(vals, protect):
    phi = gates64(vals, protect)
    support = deterministic_gates(phi).values > 0
    m = alive_mask(phi)
    if not protect or support.any():
        assert np.array_equal(m, support)
    else:
        assert m.sum() == 1 and m[int(np.argmax(vals))]


# ---------------------------------------------------------------------------
# sparsity loss


def test_open_probability_hand_value():
    p = gate_open_probability(gates64([0.0])).value[0]
    assert p == pytest.approx(_sig(BETA * math.log(11)), abs=1e-15)
    assert p == pytest.approx(0.832, abs=5e-4)
    # complement of the point mass at zero
    assert p == pytest.approx(1 - hc_cdf(0.0), abs=1e-12)


def test_sparsity_loss_limits():
    assert hc_sparsity_loss(gates64(np.full(4, -60.0))).item() < 1e-12
    assert hc_sparsity_loss(gates64(np.full(4, 60.0))).item() == pytest.approx(4.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-30, 30, allow_nan=False), min_size=1, max_size=16))
def test_sparsity_loss_bounded(vals):
    v = hc_sparsity_loss(gates64(vals)).item()
    assert 0.0 <= v <= len(vals)


def test_sparsity_loss_gradient_fd():
    rng = np.random.default_rng(2)
    for _ in range(20):
        phi = gates64(rng.normal(0, 2, size=7))
        check_grads(lambda: hc_sparsity_loss(phi), [phi.log_alpha], tol=1e-5)


# ---------------------------------------------------------------------------
# apply_gates


def test_apply_gates_ones_is_identity(rng):
    h = T.tensor(rng.normal(size=(2, 3, 4, 4)), dtype=np.float64)
    out = apply_gates(h, T.tensor(np.ones(3)))
    assert np.array_equal(out.value, h.value)


def test_apply_gates_zero_channel(rng):
    h = T.tensor(rng.normal(size=(1, 2, 3, 3)), dtype=np.float64)
    out = apply_gates(h, T.tensor(np.array([1.0, 0.0]))).value
    assert np.array_equal(out[:, 0], h.value[:, 0])
    assert not out[:, 1].any()


def test_apply_gates_length_mismatch(rng):
    h = T.tensor(rng.normal(size=(1, 2, 3, 3)))
    with pytest.raises(DimensionError):
        apply_gates(h, T.tensor(np.ones(3)))
