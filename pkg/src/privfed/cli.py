"""Command line front end.

Subcommands: train (write metrics.csv and model.bin), attack (intercept
a gradient in a configured run and try to invert it), account (print
epsilon for an accounting pipeline), sweep (repeat training or attacks
along one axis).  Exit codes: 0 success, 1 configuration problems,
2 numeric failures at run time.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .accountant import epsilon_for
from .attack import attack_leak, defense_label, pruned_gradient_attack
from .config import Config, ConfigError, build_arch, build_attack_config, build_dataset, \
    build_federation, build_shards, load_preset, parse_config_text
from .data import DataFormatError
from .federation import run_training
from .mechanism import clip_bound_at
from .modelio import save_model
from .nn import build_model
from .streams import RandomStream

METRICS_NAME = "metrics.csv"
MODEL_NAME = "model.bin"
ATTACKS_NAME = "attacks.csv"
REPORT_NAME = "attack_report.txt"
SWEEP_NAME = "sweep.csv"


def _add_common(sub: argparse.ArgumentParser, needs_out: bool):
    sub.add_argument("--config", help="key=value config file")
    sub.add_argument("--preset", help="named built-in config")
    sub.add_argument("--seed", type=int, help="override the config seed")
    sub.add_argument("--threads", type=int, default=1, help="worker threads (results identical)")
    if needs_out:
        sub.add_argument("--out", required=True, help="output directory")


def _load_config(args) -> Config:
    values: dict[str, str] = {}
    if args.preset:
        values.update(load_preset(args.preset))
    if args.config:
        text = Path(args.config).read_text()
        values.update(parse_config_text(text, source=args.config))
    if not values:
        raise ConfigError("provide --preset and/or --config")
    if args.seed is not None:
        values["seed"] = str(args.seed)
    return Config(values)


def _prepare_run(cfg: Config):
    seed = cfg.get_int("seed", 0)
    train, validation = build_dataset(cfg, seed)
    shards = build_shards(cfg, train, seed)
    fed = build_federation(cfg, seed)
    model = build_model(build_arch(cfg, train), seed)
    return seed, train, validation, shards, fed, model


def _write_metrics(path: Path, records, layer_count: int):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        norm_cols = [f"mean_grad_norm_layer_{m + 1}" for m in range(layer_count)]
        writer.writerow(["round", "epsilon", "accuracy", *norm_cols, "clip_bound", "wall_ms"])
        for r in records:
            writer.writerow([
                r.round_index, repr(r.epsilon), repr(r.accuracy),
                *[repr(v) for v in r.update_norms], repr(r.clip_bound), repr(r.wall_ms),
            ])


def cmd_train(args) -> int:
    cfg = _load_config(args)
    _, _, validation, shards, fed, model = _prepare_run(cfg)
    result = run_training(fed, model, shards, validation, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_metrics(out / METRICS_NAME, result.records, len(result.records[0].update_norms))
    save_model(result.model, str(out / MODEL_NAME))
    last = result.records[-1]
    print(f"trained {fed.rounds} rounds: accuracy={last.accuracy:.4f} epsilon={last.epsilon:.6g}")
    return 0


def _write_report(path: Path, leak_type: str, defense: str, report, threshold: float):
    lines = [
        f"type={leak_type}",
        f"defense={defense}",
        f"success={'true' if report.success else 'false'}",
        f"iterations_used={report.iterations_used}",
        f"final_gradient_loss={report.final_gradient_loss!r}",
        f"reconstruction_distance={report.reconstruction_distance!r}",
        f"success_threshold={threshold!r}",
        f"update_rescale={'none' if report.update_rescale is None else repr(report.update_rescale)}",
        "labels=" + ",".join(str(v) for v in report.labels),
        "loss_trajectory=" + ",".join(repr(v) for v in report.loss_trajectory),
        "reconstructed=" + ",".join(repr(float(v)) for v in report.reconstructed.ravel()),
    ]
    path.write_text("\n".join(lines) + "\n")


def _append_attack_row(path: Path, leak_type: str, defense: str, report):
    new = not path.exists()
    with open(path, "a", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        if new:
            writer.writerow(["type", "defense", "success", "iterations", "distance"])
        writer.writerow([leak_type, defense, "true" if report.success else "false",
                         report.iterations_used, repr(report.reconstruction_distance)])


def cmd_attack(args) -> int:
    cfg = _load_config(args)
    seed, _, validation, shards, fed, model = _prepare_run(cfg)
    leak_round = cfg.get_int("attack.round", 0)
    if not 0 <= leak_round < fed.rounds + 1:
        raise ConfigError(f"attack.round must lie in [0, {fed.rounds}]")
    if leak_round > 0:
        model = run_training(replace(fed, rounds=leak_round), model, shards, validation,
                             threads=args.threads).model

    client = cfg.get_int("attack.client", 0)
    example = cfg.get_int("attack.example", 0)
    if not 0 <= client < len(shards):
        raise ConfigError(f"attack.client must lie in [0, {len(shards)})")
    shard = shards[client]
    if not 0 <= example or example + fed.batch_size > len(shard):
        raise ConfigError(
            f"attack.example + batch_size must fit in client {client}'s {len(shard)} examples")
    xs = shard.features[example : example + fed.batch_size]
    ys = shard.labels[example : example + fed.batch_size]

    leak_type = args.type or cfg.get_str("attack.type", "type2",
                                         choices=("type0", "type1", "type2"))
    acfg = build_attack_config(cfg)
    bound = clip_bound_at(fed.dp, leak_round, max(fed.rounds, leak_round + 1)) \
        if fed.dp.placement != "none" else None
    stream = RandomStream(seed).child("leak", leak_round, client, example)
    report = attack_leak(model, xs, ys, leak_type, fed.dp, acfg, fed.learning_rate,
                         fed.local_iterations, stream, bound=bound,
                         noise_at_client=fed.noise_at_client)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    defense = defense_label(fed.dp)
    _write_report(out / REPORT_NAME, leak_type, defense, report, acfg.success_threshold)
    _append_attack_row(out / ATTACKS_NAME, leak_type, defense, report)
    print(f"{leak_type} vs {defense}: success={report.success} "
          f"iterations={report.iterations_used} distance={report.reconstruction_distance:.4f}")
    return 0


def cmd_account(args) -> int:
    values: dict[str, str] = {}
    if args.preset:
        values.update(load_preset(args.preset))
    cfg = Config(values)
    q = args.q if args.q is not None else cfg.get_float("account.q")
    sigma = args.sigma if args.sigma is not None else cfg.get_float("account.sigma")
    delta = args.delta if args.delta is not None else cfg.get_float("account.delta")
    steps = args.steps if args.steps is not None else cfg.get_int("account.steps")
    try:
        eps = epsilon_for(q, sigma, delta, steps)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(f"epsilon={eps!r}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    raw = [v.strip() for v in args.values.split(",") if v.strip()]
    if not raw:
        raise ConfigError("--values is empty")
    try:
        values = [float(v) for v in raw]
    except ValueError:
        raise ConfigError(f"sweep values must be numbers, got {args.values!r}") from None
    if len(set(values)) != len(values):
        raise ConfigError("duplicate sweep values")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        if args.axis in ("sigma", "clip"):
            key = "dp.sigma" if args.axis == "sigma" else "dp.clip"
            sub = cfg.merged_with({key: repr(value)})
            _, _, validation, shards, fed, model = _prepare_run(sub)
            result = run_training(fed, model, shards, validation, threads=args.threads)
            last = result.records[-1]
            rows.append([args.axis, repr(value), repr(last.accuracy), repr(last.epsilon), "", ""])
        else:  # compression: prune the leaked gradient, then attack it
            if not 0.0 <= value <= 1.0:
                raise ConfigError("compression ratios must lie in [0, 1]")
            seed, _, _, shards, fed, model = _prepare_run(cfg)
            acfg = build_attack_config(cfg)
            targets = cfg.get_int("sweep.attack_targets", 5)
            successes, distances = 0, []
            for t in range(targets):
                shard = shards[t % len(shards)]
                stream = RandomStream(seed).child("sweep", "compression", t)
                report = pruned_gradient_attack(
                    model, shard.features[:1], shard.labels[:1], fed.dp, value, acfg, stream)
                successes += int(report.success)
                distances.append(report.reconstruction_distance)
            rows.append([args.axis, repr(value), "", "",
                         repr(successes / targets), repr(float(np.mean(distances)))])

    with open(out / SWEEP_NAME, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["axis", "value", "accuracy", "epsilon", "attack_success_rate",
                         "mean_distance"])
        writer.writerows(rows)
    print(f"swept {args.axis} over {len(values)} values -> {out / SWEEP_NAME}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="privfed",
        description="Federated training with differential privacy, plus attack and "
                    "accounting tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run federated training")
    _add_common(p_train, needs_out=True)
    p_train.set_defaults(func=cmd_train)

    p_attack = sub.add_parser("attack", help="gradient inversion against a configured run")
    _add_common(p_attack, needs_out=True)
    p_attack.add_argument("--type", choices=("type0", "type1", "type2"),
                          help="interception point (default from config)")
    p_attack.set_defaults(func=cmd_attack)

    p_account = sub.add_parser("account", help="print epsilon for an accounting pipeline")
    p_account.add_argument("--preset", help="named accounting preset")
    p_account.add_argument("--q", type=float, help="sampling rate per step")
    p_account.add_argument("--sigma", type=float, help="noise multiplier")
    p_account.add_argument("--delta", type=float, help="target delta")
    p_account.add_argument("--steps", type=int, help="number of composed steps")
    p_account.set_defaults(func=cmd_account)

    p_sweep = sub.add_parser("sweep", help="repeat runs along one axis")
    _add_common(p_sweep, needs_out=True)
    p_sweep.add_argument("--axis", required=True, choices=("sigma", "clip", "compression"))
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
