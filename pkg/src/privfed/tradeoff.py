"""Utility-side analysis: margins, perturbation tolerance, pruning.

The classification margin of an example is the score gap between its
true class and the best other class.  How fast that margin can move
under a parameter perturbation is bounded by the norm of its parameter
gradient; the smallest margin over a probe set divided by the largest
such norm gives a radius of parameter noise that provably cannot flip
any probe prediction (to first order).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .streams import RandomStream


@dataclass(frozen=True)
class MarginBoundReport:
    margins: tuple[float, ...]
    lipschitz: float  # largest margin-gradient norm over the probes
    bound: float  # min margin / lipschitz; 0 when any probe is misclassified


def margin(model: nn.ModelParams, x: np.ndarray, y: int) -> float:
    """Score of the true class minus the best competing class."""
    if model.num_classes < 2:
        raise ValueError("margins need at least 2 classes")
    scores = nn.forward_scores(model, x)
    if scores.ndim != 1:
        raise ValueError("margin takes a single example")
    if not 0 <= y < model.num_classes:
        raise ValueError(f"label {y} out of range")
    rival = np.max(np.delete(scores, y))
    return float(scores[y] - rival)


def _rival_class(scores: np.ndarray, y: int) -> int:
    masked = scores.copy()
    masked[y] = -np.inf
    return int(np.argmax(masked))


def margin_gradient(model: nn.ModelParams, x: np.ndarray, y: int) -> nn.GradientUpdate:
    """Parameter gradient of the margin, holding the rival class fixed."""
    if model.num_classes < 2:
        raise ValueError("margins need at least 2 classes")
    scores = nn.forward_scores(model, x)
    seed = np.zeros(model.num_classes)
    seed[y] = 1.0
    seed[_rival_class(scores, y)] -= 1.0
    return nn.score_seed_gradient(model, x, seed)


def margin_lipschitz(model: nn.ModelParams, x: np.ndarray, y: int) -> float:
    """Norm of the margin's parameter gradient at one example."""
    return nn.update_norm(margin_gradient(model, x, y))


def noise_bound(model: nn.ModelParams, xs: np.ndarray, ys) -> MarginBoundReport:
    """Largest parameter-noise norm that keeps every probe's margin positive.

    First-order estimate: a perturbation of norm r moves any margin by
    at most lipschitz * r, so r = min margin / max gradient norm.  A
    misclassified probe (margin <= 0) makes the bound 0: some prediction
    is already on the wrong side.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64).reshape(-1)
    if xs.shape[0] == 0:
        raise ValueError("need at least one probe")
    if xs.shape[0] != len(ys):
        raise ValueError(f"{xs.shape[0]} probes but {len(ys)} labels")
    margins = tuple(margin(model, xs[i], int(ys[i])) for i in range(len(ys)))
    lipschitz = max(margin_lipschitz(model, xs[i], int(ys[i])) for i in range(len(ys)))
    if min(margins) <= 0 or lipschitz == 0.0:
        bound = 0.0
    else:
        bound = min(margins) / lipschitz
    return MarginBoundReport(margins=margins, lipschitz=lipschitz, bound=bound)


def perturb_model(model: nn.ModelParams, norm: float, stream: RandomStream) -> nn.ModelParams:
    """Add an isotropic random parameter perturbation of exactly this norm."""
    if norm < 0:
        raise ValueError("perturbation norm must be >= 0")
    if norm == 0:
        return model
    flat = stream.normal(nn.parameter_count(model))
    flat *= norm / np.linalg.norm(flat)
    return nn.apply_update(model, nn.update_like(model, flat))


def prediction_flip_rate(model: nn.ModelParams, xs: np.ndarray, ys, norm: float,
                         trials: int, stream: RandomStream) -> float:
    """Fraction of random perturbations of the given norm that flip any probe."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    xs = np.asarray(xs, dtype=np.float64)
    before = nn.forward_scores(model, xs).argmax(axis=1)
    flips = 0
    for trial in range(trials):
        shaken = perturb_model(model, norm, stream.child("trial", trial))
        after = nn.forward_scores(shaken, xs).argmax(axis=1)
        if not np.array_equal(before, after):
            flips += 1
    return flips / trials


def prune_update(update: nn.GradientUpdate, ratio: float) -> nn.GradientUpdate:
    """Zero out the smallest-magnitude fraction of coordinates, globally.

    Exactly floor(ratio * count) entries are dropped, chosen by absolute
    value with a stable order so ties resolve deterministically.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    flat = nn.flatten_update(update)
    drop = int(ratio * flat.size)
    if drop == 0:
        return update
    order = np.argsort(np.abs(flat), kind="stable")
    flat = flat.copy()
    flat[order[:drop]] = 0.0
    grads = []
    pos = 0
    for g in update.layers:
        w = flat[pos : pos + g.w.size].reshape(g.w.shape)
        pos += g.w.size
        b = flat[pos : pos + g.b.size].reshape(g.b.shape)
        pos += g.b.size
        grads.append(nn.LayerGrad(w, b))
    return nn.GradientUpdate(tuple(grads))
