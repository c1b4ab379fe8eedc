"""Gradient sanitization: norm clipping and Gaussian noise.

Two placements are supported.  Per-example: every example's gradient is
clipped layer-wise to the bound and noised before the batch average, so
the privacy unit is a single training example.  Per-client: clients
train in the clear and the server clips and noises each whole client
update once per round, so the unit is a client.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import GradientUpdate, LayerGrad, grad_mean
from .streams import RandomStream

PLACEMENTS = ("none", "per-example", "per-client")


@dataclass(frozen=True)
class DpConfig:
    """Privacy placement plus the clip/noise knobs.

    clip_end, when set, turns the clip bound into a linear decay from
    `clip` at round 0 down to `clip_end` at the final round; otherwise
    the bound is constant.  sigma is the noise multiplier: noise std is
    sigma * bound per coordinate.  sigma = 0 disables noise exactly (no
    zero-width draws), which keeps noiseless runs bit-identical to
    non-private ones.
    """

    placement: str = "none"
    clip: float = 4.0
    sigma: float = 6.0
    delta: float = 1e-5
    clip_end: float | None = None

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")
        if self.clip <= 0:
            raise ValueError("clip bound must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.clip_end is not None and not 0 < self.clip_end:
            raise ValueError("clip_end must be positive")


def clip_bound_at(dp: DpConfig, round_index: int, total_rounds: int) -> float:
    """Clip bound in effect at a round, honoring the decay schedule."""
    if not 0 <= round_index < total_rounds:
        raise ValueError(f"round {round_index} outside [0, {total_rounds})")
    if dp.clip_end is None or total_rounds == 1:
        return dp.clip
    frac = round_index / (total_rounds - 1)
    return dp.clip + (dp.clip_end - dp.clip) * frac


def clip_per_layer(grad: GradientUpdate, bound: float) -> GradientUpdate:
    """Scale each layer by 1 / max(1, norm / bound).

    Layers already inside the bound are passed through untouched (the
    very same arrays), so clipping with a slack bound is a no-op.
    """
    if bound <= 0:
        raise ValueError("clip bound must be positive")
    if all(n <= bound for n in grad.layer_norms):
        return grad
    layers = []
    for g, n in zip(grad.layers, grad.layer_norms):
        if n <= bound:
            layers.append(g)
        else:
            s = bound / n
            layers.append(LayerGrad(g.w * s, g.b * s))
    return GradientUpdate(tuple(layers))


def _add_layer_noise(grad: GradientUpdate, std: float, stream: RandomStream) -> GradientUpdate:
    layers = []
    for m, g in enumerate(grad.layers):
        gen = stream.child(m).generator()
        flat = gen.normal(0.0, std, size=g.w.size + g.b.size)
        layers.append(LayerGrad(
            g.w + flat[: g.w.size].reshape(g.w.shape),
            g.b + flat[g.w.size :],
        ))
    return GradientUpdate(tuple(layers))


def sanitize_per_example_batch(clipped, bound: float, sigma: float,
                               stream: RandomStream) -> GradientUpdate:
    """Noise each clipped per-example gradient, then average the batch.

    Expects gradients already clipped to `bound`.  Noise is addressed
    per (example, layer) under the given stream, so the draw for one
    example never depends on batch composition or iteration order.
    """
    clipped = list(clipped)
    if not clipped:
        raise ValueError("empty batch")
    if sigma == 0.0:
        return grad_mean(clipped)
    std = sigma * bound
    return grad_mean(_add_layer_noise(g, std, stream.child(j)) for j, g in enumerate(clipped))


def sanitize_client_update(update: GradientUpdate, bound: float, sigma: float,
                           stream: RandomStream) -> GradientUpdate:
    """Clip one client update per layer and add a single Gaussian draw."""
    clipped = clip_per_layer(update, bound)
    if sigma == 0.0:
        return clipped
    return _add_layer_noise(clipped, sigma * bound, stream)


def median_clip_bound(norms) -> float:
    """Median of observed update norms, a data-driven choice of bound.

    Note the median itself is not computed privately; treat it as a
    tuning aid, not part of the privacy guarantee.
    """
    norms = np.asarray(list(norms), dtype=np.float64)
    if norms.size == 0:
        raise ValueError("no norms given")
    if (norms < 0).any():
        raise ValueError("norms must be non-negative")
    return float(np.median(norms))


def calibrate_sigma(epsilon: float, delta: float) -> float:
    """Gaussian-mechanism noise multiplier for one (epsilon, delta) release.

    Valid only for 0 < epsilon < 1: sigma = sqrt(2 ln(1.25/delta)) / epsilon
    for sensitivity-1 queries.
    """
    if not 0 < epsilon < 1:
        raise ValueError("this calibration is only valid for 0 < epsilon < 1")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    return math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon
