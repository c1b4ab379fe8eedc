"""Privacy accounting for repeated subsampled Gaussian releases.

Tracks Renyi divergence at a fixed grid of integer orders and converts
to (epsilon, delta) at query time, which composes far more tightly than
summing per-step (epsilon, delta) pairs.  The order grid spans 2..63
densely plus 128, 256, 512 for the very-low-epsilon regime.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import gammaln, logsumexp

DEFAULT_ORDERS: tuple[int, ...] = tuple(range(2, 64)) + (128, 256, 512)

SCOPES = ("instance", "client")


def _check_q_sigma(q: float, sigma: float):
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"sampling rate must lie in [0, 1], got {q}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")


def _check_orders(orders) -> tuple[int, ...]:
    orders = tuple(orders)
    if not orders:
        raise ValueError("need at least one order")
    for a in orders:
        if int(a) != a or a < 2:
            raise ValueError(f"orders must be integers >= 2, got {a}")
    return tuple(int(a) for a in orders)


def rdp_subsampled_gaussian(q: float, sigma: float,
                            orders=DEFAULT_ORDERS) -> np.ndarray:
    """Per-step Renyi divergence of the Poisson-subsampled Gaussian.

    For integer order a the divergence has a closed binomial expansion:

        rdp(a) = logsumexp_{i=0..a}[ log C(a,i) + i log q
                 + (a-i) log(1-q) + (i^2 - i) / (2 sigma^2) ] / (a - 1)

    evaluated in log space.  q = 0 gives 0; q = 1 is the plain Gaussian,
    a / (2 sigma^2).
    """
    _check_q_sigma(q, sigma)
    orders = _check_orders(orders)
    out = np.empty(len(orders))
    for k, a in enumerate(orders):
        if q == 0.0:
            out[k] = 0.0
        elif q == 1.0:
            out[k] = a / (2.0 * sigma * sigma)
        else:
            i = np.arange(a + 1)
            log_terms = (
                gammaln(a + 1) - gammaln(i + 1) - gammaln(a - i + 1)
                + i * math.log(q)
                + (a - i) * math.log1p(-q)
                + (i * i - i) / (2.0 * sigma * sigma)
            )
            out[k] = logsumexp(log_terms) / (a - 1)
    return out


def _warn_if_q_large(q: float, sigma: float):
    if q > 0 and q >= 1.0 / (16.0 * sigma):
        warnings.warn(
            f"sampling rate q={q:g} is large relative to sigma={sigma:g} "
            f"(q >= 1/(16 sigma)); the bound degrades in this regime",
            stacklevel=3,
        )


def _epsilon_from_total_rdp(total_rdp: np.ndarray, orders: tuple[int, ...], delta: float) -> float:
    alphas = np.asarray(orders, dtype=np.float64)
    eps = total_rdp + math.log(1.0 / delta) / (alphas - 1.0)
    return float(eps.min())


def epsilon_for(q: float, sigma: float, delta: float, steps: int,
                orders=DEFAULT_ORDERS) -> float:
    """Tight epsilon for `steps` compositions at rate q and noise sigma."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if steps == 0:
        return 0.0
    _check_q_sigma(q, sigma)
    if q == 0.0:
        return 0.0  # never touches the data; the grid minimum would not reach 0
    _warn_if_q_large(q, sigma)
    orders = _check_orders(orders)
    rdp = rdp_subsampled_gaussian(q, sigma, orders)
    return _epsilon_from_total_rdp(steps * rdp, orders, delta)


def amplified_epsilon(epsilon: float, q: float) -> float:
    """Subsampling amplification of a single release: ln(1 + q (e^eps - 1))."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    if not 0.0 <= q <= 1.0:
        raise ValueError("sampling rate must lie in [0, 1]")
    return math.log1p(q * math.expm1(epsilon))


def amplified_delta(delta: float, q: float) -> float:
    if not 0 <= delta < 1:
        raise ValueError("delta must lie in [0, 1)")
    if not 0.0 <= q <= 1.0:
        raise ValueError("sampling rate must lie in [0, 1]")
    return q * delta


def naive_composition(pairs) -> tuple[float, float]:
    """Sum (epsilon, delta) pairs componentwise; the loose baseline."""
    eps = delta = 0.0
    for e, d in pairs:
        if e < 0 or d < 0:
            raise ValueError("epsilon and delta must be >= 0")
        eps += e
        delta += d
    return eps, delta


@dataclass(frozen=True)
class PrivacyLedger:
    """Append-only record of subsampled-Gaussian releases.

    Each entry is (sampling rate, step count) at the ledger's single
    noise multiplier.  `scope` names the privacy unit the entries are
    accounted at: "instance" when each step touches a random batch of
    examples, "client" when each step touches a random client subset.
    """

    sigma: float
    delta: float
    scope: str
    entries: tuple[tuple[float, int], ...] = ()

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}, got {self.scope!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        for q, steps in self.entries:
            if not 0.0 <= q <= 1.0:
                raise ValueError(f"sampling rate must lie in [0, 1], got {q}")
            if steps < 0:
                raise ValueError("steps must be >= 0")

    def extended(self, q: float, steps: int, sigma: float | None = None) -> "PrivacyLedger":
        """New ledger with (q, steps) appended.

        A differing sigma is rejected: mixing noise multipliers in one
        ledger would silently misprice the earlier entries.
        """
        if sigma is not None and sigma != self.sigma:
            raise ValueError(f"ledger holds sigma={self.sigma}, cannot append sigma={sigma}")
        return replace(self, entries=self.entries + ((q, steps),))

    @property
    def total_steps(self) -> int:
        return sum(steps for _, steps in self.entries)


def ledger_query(ledger: PrivacyLedger, scope: str | None = None,
                 orders=DEFAULT_ORDERS) -> float:
    """Epsilon spent so far, at the requested scope.

    An instance-scoped ledger answers client-scope queries with the same
    value: the per-example guarantee holds jointly over everything the
    server releases, so it covers any one client's records as well.  A
    client-scoped ledger cannot answer instance-scope queries (clients
    were never subsampled at the example level), so that is an error.
    """
    requested = ledger.scope if scope is None else scope
    if requested not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {requested!r}")
    if requested == "instance" and ledger.scope == "client":
        raise ValueError("client-scoped ledger cannot answer instance-scope queries")

    live = [(q, steps) for q, steps in ledger.entries if steps > 0 and q > 0]
    if not live:
        return 0.0
    if ledger.sigma == 0.0:
        return math.inf
    orders = _check_orders(orders)
    total = np.zeros(len(orders))
    for q, steps in live:
        _warn_if_q_large(q, ledger.sigma)
        total += steps * rdp_subsampled_gaussian(q, ledger.sigma, orders)
    return _epsilon_from_total_rdp(total, orders, ledger.delta)
