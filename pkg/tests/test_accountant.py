import math
import warnings

import numpy as np
import pytest
from scipy.integrate import quad

from privfed.accountant import (
    DEFAULT_ORDERS,
    PrivacyLedger,
    amplified_delta,
    amplified_epsilon,
    epsilon_for,
    ledger_query,
    naive_composition,
    rdp_subsampled_gaussian,
)


def test_default_orders_grid():
    assert DEFAULT_ORDERS[0] == 2
    assert 63 in DEFAULT_ORDERS and 512 in DEFAULT_ORDERS
    assert all(int(a) == a and a >= 2 for a in DEFAULT_ORDERS)
    assert list(DEFAULT_ORDERS) == sorted(set(DEFAULT_ORDERS))


def test_rdp_closed_forms():
    # q=0: the mechanism never touches the data
    assert np.all(rdp_subsampled_gaussian(0.0, 6.0) == 0.0)
    # q=1: plain Gaussian, a / (2 sigma^2)
    out = rdp_subsampled_gaussian(1.0, 2.0, orders=(4,))
    assert np.isclose(out[0], 4 / (2 * 2.0 * 2.0))
    out = rdp_subsampled_gaussian(1.0, 6.0, orders=(2, 10))
    assert np.allclose(out, [2 / 72.0, 10 / 72.0])


def test_rdp_matches_quadrature_oracle():
    # the binomial expansion equals E_{x~N(0,s^2)}[((1-q) + q e^{(2x-1)/(2s^2)})^a]
    for q, sigma in ((0.01, 6.0), (0.1, 4.0), (0.5, 2.0)):
        got = rdp_subsampled_gaussian(q, sigma, orders=tuple(range(2, 65)))
        for k, a in enumerate(range(2, 65)):
            def integrand(x):
                log_pdf = -x * x / (2 * sigma * sigma) - math.log(sigma * math.sqrt(2 * math.pi))
                log_mix = np.logaddexp(math.log1p(-q), math.log(q) + (2 * x - 1) / (2 * sigma * sigma))
                return math.exp(log_pdf + a * log_mix)
            val, err = quad(integrand, -50 * sigma, 50 * sigma, limit=400)
            expected = math.log(val) / (a - 1)
            assert abs(got[k] - expected) <= 1e-6 * abs(expected)


def test_rdp_validation():
    with pytest.raises(ValueError):
        rdp_subsampled_gaussian(-0.1, 6.0)
    with pytest.raises(ValueError):
        rdp_subsampled_gaussian(1.1, 6.0)
    with pytest.raises(ValueError):
        rdp_subsampled_gaussian(0.01, 0.0)
    with pytest.raises(ValueError):
        rdp_subsampled_gaussian(0.01, 6.0, orders=())
    with pytest.raises(ValueError):
        rdp_subsampled_gaussian(0.01, 6.0, orders=(1,))
    with pytest.raises(ValueError):
        rdp_subsampled_gaussian(0.01, 6.0, orders=(2.5,))


def test_epsilon_for_paper_operating_point():
    # q=0.01, sigma=6, delta=1e-5: the documented reference values
    assert np.isclose(epsilon_for(0.01, 6.0, 1e-5, 10000), 0.8227, rtol=0.05)
    assert np.isclose(epsilon_for(0.01, 6.0, 1e-5, 300), 0.1469, rtol=0.05)
    assert np.isclose(epsilon_for(0.01, 6.0, 1e-5, 3), 0.0467, rtol=0.05)


def test_epsilon_for_monotone():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for q in (0.001, 0.01, 0.05):
            for sigma in (1.0, 4.0, 10.0):
                e1 = epsilon_for(q, sigma, 1e-5, 1)
                e2 = epsilon_for(q, sigma, 1e-5, 100)
                e3 = epsilon_for(q, sigma, 1e-5, 10000)
                assert 0 < e1 < e2 < e3
        # non-decreasing in q, non-increasing in sigma
        qs = [epsilon_for(q, 6.0, 1e-5, 1000) for q in (0.001, 0.005, 0.01, 0.05)]
        assert all(a <= b for a, b in zip(qs, qs[1:]))
        ss = [epsilon_for(0.01, s, 1e-5, 1000) for s in (1.0, 2.0, 6.0, 10.0)]
        assert all(a >= b for a, b in zip(ss, ss[1:]))
        # smaller delta costs more epsilon
        assert epsilon_for(0.01, 6.0, 1e-7, 1000) > epsilon_for(0.01, 6.0, 1e-5, 1000)


def test_epsilon_sqrt_steps_scaling():
    # epsilon / sqrt(steps) stays within a 25% band between 1e3 and 1e4 steps
    r3 = epsilon_for(0.01, 6.0, 1e-5, 1000) / math.sqrt(1000)
    r4 = epsilon_for(0.01, 6.0, 1e-5, 10000) / math.sqrt(10000)
    assert abs(r3 - r4) / r3 < 0.25


def test_epsilon_for_edge_cases():
    assert epsilon_for(0.01, 6.0, 1e-5, 0) == 0.0
    assert epsilon_for(0.0, 6.0, 1e-5, 1000) == 0.0
    with pytest.raises(ValueError):
        epsilon_for(0.01, 6.0, 0.0, 10)
    with pytest.raises(ValueError):
        epsilon_for(0.01, 6.0, 1.0, 10)
    with pytest.raises(ValueError):
        epsilon_for(0.01, 6.0, 1e-5, -1)


def test_large_q_warns():
    with pytest.warns(UserWarning, match="degrades"):
        epsilon_for(0.5, 2.0, 1e-5, 10)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        epsilon_for(0.01, 6.0, 1e-5, 10)  # 0.01 < 1/96, no warning


def test_accountant_beats_naive_composition():
    q, sigma, delta, steps = 0.01, 4.0, 1e-5, 1000
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tight = epsilon_for(q, sigma, delta, steps)
        # naive: per-step Gaussian epsilon amplified by sampling, summed
        per_step_delta = delta / steps
        base_eps = math.sqrt(2.0 * math.log(1.25 / (per_step_delta / q))) / sigma
        step_eps = amplified_epsilon(base_eps, q)
        naive_eps, naive_delta = naive_composition([(step_eps, per_step_delta)] * steps)
    assert naive_delta <= delta + 1e-15
    assert tight < naive_eps


def test_amplified_epsilon():
    assert amplified_epsilon(0.7, 1.0) == pytest.approx(0.7)
    assert amplified_epsilon(0.0, 0.3) == 0.0
    assert amplified_epsilon(0.7, 0.0) == 0.0
    assert amplified_epsilon(math.log(2.0), 0.5) == pytest.approx(math.log(1.5))
    # small-epsilon linearization: about q * eps
    assert amplified_epsilon(1e-4, 0.01) == pytest.approx(1e-6, rel=1e-3)
    with pytest.raises(ValueError):
        amplified_epsilon(-0.1, 0.5)
    with pytest.raises(ValueError):
        amplified_epsilon(0.5, 1.5)


def test_amplified_delta():
    assert amplified_delta(1e-5, 0.1) == pytest.approx(1e-6)
    assert amplified_delta(0.0, 0.5) == 0.0
    with pytest.raises(ValueError):
        amplified_delta(1.0, 0.5)
    with pytest.raises(ValueError):
        amplified_delta(1e-5, -0.1)


def test_naive_composition():
    eps, delta = naive_composition([(0.1, 1e-6), (0.2, 2e-6), (0.3, 0.0)])
    assert eps == pytest.approx(0.6)
    assert delta == pytest.approx(3e-6)
    assert naive_composition([]) == (0.0, 0.0)
    with pytest.raises(ValueError):
        naive_composition([(-0.1, 0.0)])


def test_ledger_basic_accounting():
    ledger = PrivacyLedger(sigma=6.0, delta=1e-5, scope="instance")
    assert ledger_query(ledger) == 0.0
    ledger = ledger.extended(0.01, 300)
    assert ledger.total_steps == 300
    assert ledger_query(ledger) == pytest.approx(epsilon_for(0.01, 6.0, 1e-5, 300))
    # appending is cumulative: 300 + 700 equals 1000 in one entry
    ledger = ledger.extended(0.01, 700)
    one_entry = PrivacyLedger(6.0, 1e-5, "instance", ((0.01, 1000),))
    assert ledger_query(ledger) == pytest.approx(ledger_query(one_entry), rel=1e-12)


def test_ledger_heterogeneous_rates():
    ledger = PrivacyLedger(6.0, 1e-5, "instance", ((0.01, 100), (0.05, 50)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        mixed = ledger_query(ledger)
        lo = ledger_query(PrivacyLedger(6.0, 1e-5, "instance", ((0.01, 150),)))
        hi = ledger_query(PrivacyLedger(6.0, 1e-5, "instance", ((0.05, 150),)))
    assert lo < mixed < hi


def test_ledger_zero_and_empty_entries():
    ledger = PrivacyLedger(6.0, 1e-5, "instance", ((0.01, 0), (0.0, 50)))
    assert ledger_query(ledger) == 0.0


def test_ledger_sigma_zero_spends_everything():
    ledger = PrivacyLedger(0.0, 1e-5, "instance", ((0.01, 1),))
    assert ledger_query(ledger) == math.inf
    # but an untouched sigma=0 ledger has spent nothing
    assert ledger_query(PrivacyLedger(0.0, 1e-5, "instance")) == 0.0


def test_ledger_scope_rules():
    inst = PrivacyLedger(6.0, 1e-5, "instance", ((0.01, 100),))
    cli = PrivacyLedger(6.0, 1e-5, "client", ((0.1, 100),))
    # per-example accounting covers any one client's records too
    assert ledger_query(inst, scope="client") == ledger_query(inst, scope="instance")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # q=0.1 trips the large-q advisory
        assert ledger_query(cli, scope="client") == ledger_query(cli)
    with pytest.raises(ValueError):
        ledger_query(cli, scope="instance")
    with pytest.raises(ValueError):
        ledger_query(inst, scope="global")


def test_ledger_validation():
    with pytest.raises(ValueError):
        PrivacyLedger(6.0, 1e-5, "server")
    with pytest.raises(ValueError):
        PrivacyLedger(-1.0, 1e-5, "instance")
    with pytest.raises(ValueError):
        PrivacyLedger(6.0, 0.0, "instance")
    with pytest.raises(ValueError):
        PrivacyLedger(6.0, 1e-5, "instance", ((1.5, 10),))
    with pytest.raises(ValueError):
        PrivacyLedger(6.0, 1e-5, "instance", ((0.01, -1),))
    ledger = PrivacyLedger(6.0, 1e-5, "instance")
    with pytest.raises(ValueError):
        ledger.extended(0.01, 10, sigma=4.0)
    same = ledger.extended(0.01, 10, sigma=6.0)
    assert same.entries == ((0.01, 10),)
