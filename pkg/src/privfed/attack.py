"""Gradient inversion: reconstruct training inputs from leaked gradients.

The attacker observes either a per-example gradient (leaked during
local training), a client's accumulated update, or the update as it
reaches the server, and optimizes a dummy input until its gradient
matches the observation.  The model is treated as a black box: the
matching loss is minimized with finite-difference gradients over the
dummy pixels, projected to [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from . import nn
from .mechanism import DpConfig, clip_per_layer, sanitize_client_update, \
    sanitize_per_example_batch
from .streams import RandomStream
from .tradeoff import prune_update

LEAK_TYPES = ("type0", "type1", "type2")  # server ingress / client egress / per-example
SEED_MODES = ("patterned", "uniform", "zeros")
OPTIMIZERS = ("hybrid", "gd", "adam")
LABEL_MODES = ("known", "infer")

_PROBE_CHUNK = 512
_RESCUE_RADII = (0.2, 0.05, 0.0125, 0.003)


@dataclass(frozen=True)
class AttackConfig:
    """Knobs for the reconstruction optimizer.

    step_size is the first-order rate: the initial backtracking step for
    "gd", the adam rate for "adam" and the exploration phase of "hybrid".
    """

    max_iterations: int = 300
    success_threshold: float = 1e-4
    seed_mode: str = "patterned"
    optimizer: str = "hybrid"
    step_size: float = 0.3
    fd_step: float = 1e-3
    label_mode: str = "known"

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.success_threshold <= 0:
            raise ValueError("success_threshold must be positive")
        if self.seed_mode not in SEED_MODES:
            raise ValueError(f"seed_mode must be one of {SEED_MODES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.step_size <= 0 or self.fd_step <= 0:
            raise ValueError("step_size and fd_step must be positive")
        if self.label_mode not in LABEL_MODES:
            raise ValueError(f"label_mode must be one of {LABEL_MODES}")


@dataclass(frozen=True, eq=False)
class AttackReport:
    success: bool
    iterations_used: int
    final_gradient_loss: float
    reconstruction_distance: float
    loss_trajectory: tuple[float, ...]
    reconstructed: np.ndarray
    labels: tuple[int, ...]
    update_rescale: float | None = None


def make_seed(mode: str, shape: tuple[int, ...], stream: RandomStream) -> np.ndarray:
    """Starting dummy input in [0, 1].

    "patterned" tiles a small random patch across the input, which gives
    the optimizer structure to deform instead of white noise.
    """
    if mode == "zeros":
        return np.zeros(shape)
    if mode == "uniform":
        return stream.uniform(shape)
    if mode != "patterned":
        raise ValueError(f"unknown seed mode {mode!r}")
    if len(shape) >= 2:
        h, w = shape[0], shape[1]
        patch = stream.uniform((4, 4) + shape[2:])
        reps = (math.ceil(h / 4), math.ceil(w / 4)) + (1,) * (len(shape) - 2)
        return np.tile(patch, reps)[:h, :w, ...]
    patch = stream.uniform((min(4, shape[0]),))
    return np.tile(patch, math.ceil(shape[0] / patch.shape[0]))[: shape[0]]


def reconstruction_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Root mean squared coordinate difference between two input arrays."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def infer_label(model: nn.ModelParams, target: nn.GradientUpdate) -> int:
    """Recover a single example's label from the last-layer bias gradient.

    The cross-entropy score seed is probs - onehot, so only the true
    class has a negative bias gradient in the output layer.
    """
    return int(np.argmin(target.layers[-1].b))


def gradient_match_loss(model: nn.ModelParams, xs: np.ndarray, ys,
                        target: nn.GradientUpdate) -> float:
    """Squared L2 distance between the mean dummy gradient and the target."""
    flat = nn.per_example_flat_gradients(model, xs, ys).mean(axis=0)
    diff = flat - nn.flatten_update(target)
    return float(diff @ diff)


def _loss_from_grads(grads: np.ndarray, target_flat: np.ndarray) -> float:
    diff = grads.mean(axis=0) - target_flat
    return float(diff @ diff)


def _chunked_per_example(model, xs, ys) -> np.ndarray:
    out = []
    for lo in range(0, xs.shape[0], _PROBE_CHUNK):
        out.append(nn.per_example_flat_gradients(model, xs[lo : lo + _PROBE_CHUNK],
                                                 ys[lo : lo + _PROBE_CHUNK]))
    return np.concatenate(out, axis=0)


def _fd_input_gradient(model, flat_x: np.ndarray, labels: np.ndarray,
                       base_grads: np.ndarray, target_flat: np.ndarray,
                       h: float, input_shape: tuple[int, ...]) -> np.ndarray:
    """Central-difference gradient of the match loss over every dummy pixel.

    Perturbing one pixel of example e only changes row e of the
    per-example gradient matrix, so each probe loss is the base mean
    with one row swapped; everything evaluates in a few vectorized
    passes.
    """
    n, d = flat_x.shape
    probes = np.repeat(flat_x, 2 * d, axis=0)
    rows = np.arange(n * 2 * d)
    coords = np.tile(np.repeat(np.arange(d), 2), n)
    signs = np.tile(np.array([1.0, -1.0]), n * d)
    probes[rows, coords] += signs * h
    probe_grads = _chunked_per_example(model, probes.reshape(-1, *input_shape),
                                       np.repeat(labels, 2 * d))
    base_diff = base_grads.mean(axis=0) - target_flat
    swapped = base_diff[None, :] + (probe_grads - np.repeat(base_grads, 2 * d, axis=0)) / n
    losses = np.einsum("ij,ij->i", swapped, swapped).reshape(n, d, 2)
    base_loss = float(base_diff @ base_diff)
    d_plus = (losses[:, :, 0] - base_loss) / h
    d_minus = (base_loss - losses[:, :, 1]) / h
    # the match loss jumps where a probe flips a hidden unit's activation;
    # where the two one-sided slopes disagree, trust the smaller one
    agree = np.abs(d_plus - d_minus) <= 0.25 * (np.abs(d_plus) + np.abs(d_minus)) + 1e-12
    one_sided = np.where(np.abs(d_plus) <= np.abs(d_minus), d_plus, d_minus)
    return np.where(agree, 0.5 * (d_plus + d_minus), one_sided)


def run_attack(model: nn.ModelParams, target: nn.GradientUpdate, true_xs: np.ndarray,
               true_ys, config: AttackConfig, stream: RandomStream,
               update_rescale: float | None = None,
               initial: np.ndarray | None = None) -> AttackReport:
    """Optimize a dummy batch until its gradient matches the target.

    update_rescale, when given, is applied to the target first; pass
    -1/(lr * local_iterations) to treat an accumulated parameter delta
    as an average gradient.  initial overrides the seeded starting dummy.
    Success means the match loss fell below the threshold within the
    iteration budget.
    """
    true_xs = np.asarray(true_xs, dtype=np.float64)
    if true_xs.shape[1:] != model.input_shape:
        raise ValueError(f"targets of shape {true_xs.shape} do not match model input "
                         f"{model.input_shape}")
    n = true_xs.shape[0]
    if update_rescale is not None:
        target = nn.grad_scale(target, update_rescale)
    target_flat = nn.flatten_update(target)

    if config.label_mode == "known":
        labels = np.asarray(true_ys, dtype=np.int64).reshape(-1)
        if len(labels) != n:
            raise ValueError(f"{n} examples but {len(labels)} labels")
    else:
        if n != 1:
            raise ValueError("label inference only supports a single example")
        labels = np.asarray([infer_label(model, target)], dtype=np.int64)

    shape = model.input_shape
    d = int(np.prod(shape))
    if initial is not None:
        initial = np.asarray(initial, dtype=np.float64)
        if initial.shape != true_xs.shape:
            raise ValueError(f"initial dummy shape {initial.shape} does not match "
                             f"targets {true_xs.shape}")
        x = initial.reshape(n, d).copy()
    else:
        x = np.stack([make_seed(config.seed_mode, shape, stream.child("seed", e))
                      for e in range(n)]).reshape(n, d)

    def grads_at(flat: np.ndarray) -> np.ndarray:
        return nn.per_example_flat_gradients(model, flat.reshape(-1, *shape), labels)

    base = grads_at(x)
    loss = _loss_from_grads(base, target_flat)
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite match loss at the starting dummy")
    best_x, best_grads, best_loss = x, base, loss
    trajectory = [loss]
    iterations = 0
    rescue = stream.child("rescue")

    def note(cand_x, cand_grads, cand_loss):
        nonlocal best_x, best_grads, best_loss
        if not math.isfinite(cand_loss):
            raise FloatingPointError(f"non-finite match loss at iteration {iterations}")
        if cand_loss < best_loss:
            best_x, best_grads, best_loss = cand_x, cand_grads, cand_loss

    def fd_grad(at_x, at_grads):
        return _fd_input_gradient(model, at_x, labels, at_grads, target_flat,
                                  config.fd_step, shape)

    def rescue_jump(at_x, current_loss, it):
        """Probe seeded random directions around a stalled point.

        Stalls come from activation boundaries the local slope cannot see
        across; a modest jump often lands on the descending side.
        """
        found = None
        trial = rescue.child(it)
        for k in range(12):
            direction = trial.child(k).normal(at_x.shape)
            direction /= np.linalg.norm(direction)
            for radius in _RESCUE_RADII:
                cand = np.clip(at_x + radius * direction, 0.0, 1.0)
                cand_grads = grads_at(cand)
                cand_loss = _loss_from_grads(cand_grads, target_flat)
                if cand_loss < current_loss and (found is None or cand_loss < found[2]):
                    found = (cand, cand_grads, cand_loss)
        return found

    def adam_phase(budget):
        nonlocal x, base, loss, iterations
        m = np.zeros_like(x)
        v = np.zeros_like(x)
        for it in range(1, budget + 1):
            if best_loss < config.success_threshold:
                return
            g = fd_grad(x, base)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1.0 - 0.9**it)
            vh = v / (1.0 - 0.999**it)
            x = np.clip(x - config.step_size * mh / (np.sqrt(vh) + 1e-8), 0.0, 1.0)
            base = grads_at(x)
            loss = _loss_from_grads(base, target_flat)
            iterations = it
            note(x, base, loss)
            trajectory.append(loss)

    if config.optimizer == "gd":
        # monotone descent: persistent step grows on accept, halves on
        # reject; acceptance is strict so an underflowed no-op step counts
        # as a stall instead of spinning forever
        step = config.step_size
        for it in range(1, config.max_iterations + 1):
            if loss < config.success_threshold:
                break
            g = fd_grad(x, base)
            accepted = False
            for _ in range(11):
                cand = np.clip(x - step * g, 0.0, 1.0)
                cand_grads = grads_at(cand)
                cand_loss = _loss_from_grads(cand_grads, target_flat)
                if cand_loss < loss:
                    x, base, loss = cand, cand_grads, cand_loss
                    step *= 2.0
                    accepted = True
                    break
                step /= 2.0
            if not accepted:
                found = rescue_jump(x, loss, it)
                if found is not None:
                    x, base, loss = found
                    step = config.step_size
            iterations = it
            note(x, base, loss)
            trajectory.append(loss)
    elif config.optimizer == "adam":
        adam_phase(config.max_iterations)
    else:  # hybrid: adam exploration, then L-BFGS-B polish with rescue restarts
        adam_phase(config.max_iterations // 2)
        x, base, loss = best_x, best_grads, best_loss
        cache: dict = {}

        def fun(z):
            grads = grads_at(z.reshape(n, -1))
            value = _loss_from_grads(grads, target_flat)
            cache["z"], cache["grads"], cache["value"] = z.copy(), grads, value
            return value

        def jac(z):
            if cache.get("z") is not None and np.array_equal(cache["z"], z):
                grads = cache["grads"]
            else:
                grads = grads_at(z.reshape(n, -1))
            return fd_grad(z.reshape(n, -1), grads).ravel()

        bounds = [(0.0, 1.0)] * x.size
        while iterations < config.max_iterations and best_loss >= config.success_threshold:
            # budget the polish by function evaluations: one fun+jac pair
            # costs about as much as one exploration iteration
            remaining = config.max_iterations - iterations
            res = minimize(fun, x.ravel(), jac=jac, method="L-BFGS-B", bounds=bounds,
                           callback=lambda zk: trajectory.append(cache["value"]),
                           options={"maxiter": remaining, "maxfun": remaining,
                                    "ftol": 0.0, "gtol": 1e-14})
            iterations += min(max(int(res.nit), int(res.nfev), 1), remaining)
            if int(res.nit) == 0:
                trajectory.append(float(res.fun))
            x = res.x.reshape(n, -1)
            base = grads_at(x)
            loss = _loss_from_grads(base, target_flat)
            note(x, base, loss)
            if iterations >= config.max_iterations or best_loss < config.success_threshold:
                break
            # the polish converged short of the budget (typically pinned on
            # an activation boundary); jump and resume
            iterations += 1
            found = rescue_jump(x, loss, iterations)
            if found is not None:
                x, base, loss = found
                note(x, base, loss)
            trajectory.append(loss)

    reconstructed = best_x.reshape(-1, *shape)
    return AttackReport(
        success=bool(best_loss < config.success_threshold),
        iterations_used=iterations,
        final_gradient_loss=float(best_loss),
        reconstruction_distance=reconstruction_distance(reconstructed, true_xs),
        loss_trajectory=tuple(float(v) for v in trajectory),
        reconstructed=reconstructed,
        labels=tuple(int(v) for v in labels),
        update_rescale=update_rescale,
    )


# --- leak simulation ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ClientLeak:
    """What each interception point sees for one client round."""

    first_example_gradient: nn.GradientUpdate  # leaked mid-iteration (type2)
    update_at_client: nn.GradientUpdate  # before upload (type1)
    update_at_server: nn.GradientUpdate  # as received (type0)


def simulate_client_leak(model: nn.ModelParams, xs: np.ndarray, ys, dp: DpConfig,
                         lr: float, iterations: int, stream: RandomStream,
                         bound: float | None = None,
                         noise_at_client: bool = False) -> ClientLeak:
    """Run one client's local pass over a fixed batch and capture the leaks.

    The batch is used in full at every local iteration (no resampling),
    so the observed update is exactly -lr * sum of iteration gradients.
    Under per-example placement the leaked gradient and the update are
    already sanitized; under per-client placement local training is in
    the clear and sanitization happens at upload (client or server side
    per noise_at_client).
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64).reshape(-1)
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if bound is None:
        bound = dp.clip
    n = xs.shape[0]
    current = model
    first_example_gradient = None
    for step in range(iterations):
        grads = [nn.example_loss_gradient(current, xs[j], int(ys[j]))[1] for j in range(n)]
        if dp.placement == "per-example":
            clipped = [clip_per_layer(g, bound) for g in grads]
            noise_stream = stream.child("noise", step)
            if step == 0:
                first_example_gradient = sanitize_per_example_batch(
                    clipped[:1], bound, dp.sigma, noise_stream)
            mean = sanitize_per_example_batch(clipped, bound, dp.sigma, noise_stream)
        else:
            if step == 0:
                first_example_gradient = grads[0]
            mean = nn.grad_mean(grads)
        current = nn.sgd_step(current, mean, lr)

    update = nn.model_delta(current, model)
    at_client = update
    at_server = update
    if dp.placement == "per-client":
        if noise_at_client:
            at_client = sanitize_client_update(update, bound, dp.sigma, stream.child("sdp-noise"))
            at_server = at_client
        else:
            at_server = sanitize_client_update(update, bound, dp.sigma, stream.child("sdp-noise"))
    return ClientLeak(first_example_gradient, at_client, at_server)


def pruned_gradient_attack(model: nn.ModelParams, xs: np.ndarray, ys, dp: DpConfig,
                           ratio: float, config: AttackConfig, stream: RandomStream,
                           bound: float | None = None) -> AttackReport:
    """Type-2 attack against a magnitude-pruned leaked gradient.

    Models communication-compressed sharing: the smallest `ratio`
    fraction of the leaked per-example gradient's coordinates are zeroed
    before the attacker sees it.
    """
    leak = simulate_client_leak(model, np.asarray(xs)[:1], np.asarray(ys)[:1], dp,
                                lr=0.1, iterations=1, stream=stream.child("train"),
                                bound=bound)
    target = prune_update(leak.first_example_gradient, ratio)
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64).reshape(-1)
    return run_attack(model, target, xs[:1], ys[:1], config, stream.child("attack"))


def defense_label(dp: DpConfig) -> str:
    if dp.placement == "none":
        return "none"
    return dp.placement + ("-decay" if dp.clip_end is not None else "")


def attack_leak(model: nn.ModelParams, xs: np.ndarray, ys, leak_type: str, dp: DpConfig,
                config: AttackConfig, lr: float, iterations: int, stream: RandomStream,
                bound: float | None = None, noise_at_client: bool = False) -> AttackReport:
    """Simulate one client round, intercept at the given point, and attack it."""
    if leak_type not in LEAK_TYPES:
        raise ValueError(f"leak_type must be one of {LEAK_TYPES}")
    leak = simulate_client_leak(model, xs, ys, dp, lr, iterations, stream.child("train"),
                                bound=bound, noise_at_client=noise_at_client)
    attack_stream = stream.child("attack")
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64).reshape(-1)
    if leak_type == "type2":
        return run_attack(model, leak.first_example_gradient, xs[:1], ys[:1],
                          config, attack_stream)
    target = leak.update_at_client if leak_type == "type1" else leak.update_at_server
    return run_attack(model, target, xs, ys, config, attack_stream,
                      update_rescale=-1.0 / (lr * iterations))
