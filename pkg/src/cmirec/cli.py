"""Command-line entry point: ``cmirec {train,eval,recommend,synth}``.

Exit codes: 0 success, 1 partial failure, 2 usage or configuration error,
3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, evaluation, model, training
from .config import ConfigError, RunConfig, load_config
from .losses import DivergenceError

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("cmirec")


def _global_flags(parser, suppress=False):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="key = value config file")
    parser.add_argument("--set", dest="overrides", action="append",
                        default=argparse.SUPPRESS if suppress else [], metavar="KEY=VALUE",
                        help="override a config value (repeatable)")
    parser.add_argument("--seed", type=int, default=default)
    parser.add_argument("--threads", type=int, default=default)


def build_parser():
    parser = argparse.ArgumentParser(prog="cmirec", description=__doc__.splitlines()[0])
    _global_flags(parser)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write the best checkpoint")
    _global_flags(p, suppress=True)
    p.add_argument("--interactions")
    p.add_argument("--output-dir")

    p = sub.add_parser("eval", help="Recall@K / HitRate@K of a checkpoint")
    _global_flags(p, suppress=True)
    p.add_argument("--checkpoint")
    p.add_argument("--interactions")
    p.add_argument("--output-dir")
    p.add_argument("--split", choices=("test", "validation"), default="test")

    p = sub.add_parser("recommend", help="top-K recommendations for given users")
    _global_flags(p, suppress=True)
    p.add_argument("--checkpoint")
    p.add_argument("--interactions")
    p.add_argument("--users", required=True, help="comma-separated raw user IDs")
    p.add_argument("-k", "--k", type=int, default=50)
    p.add_argument("--output", help="write lines here instead of stdout")

    p = sub.add_parser("synth", help="write a planted-category synthetic dataset")
    _global_flags(p, suppress=True)
    defaults = data.SyntheticSpec()
    for name in ("num_users", "num_items", "num_planted_categories", "interests_per_user",
                 "interactions_per_user", "span_days"):
        p.add_argument("--" + name.replace("_", "-"), type=int, default=getattr(defaults, name))
    p.add_argument("--noise-rate", type=float, default=defaults.noise_rate)
    p.add_argument("--interest-width", type=float, default=defaults.interest_width)
    p.add_argument("--window-share", type=float, default=defaults.window_share)
    p.add_argument("--output", required=True, help="output directory")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = list(getattr(args, "overrides", []) or [])
    for flag in ("seed", "threads"):
        if getattr(args, flag, None) is not None:
            overrides.append(f"{flag}={getattr(args, flag)}")
    for flag, key in (("interactions", "interactions"), ("output_dir", "output_dir"),
                      ("checkpoint", "checkpoint")):
        if getattr(args, flag, None):
            overrides.append(f"{key}={getattr(args, flag)}")
    return load_config(getattr(args, "config", None), overrides)


def load_split(config: RunConfig):
    try:
        log_ = data.parse_interactions(config.interactions, config.delimiter)
        return log_, data.chronological_split(log_, config.span_days, config.day_length)
    except (data.ParseError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def cmd_train(config: RunConfig) -> int:
    config.validate(need_interactions=True)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, split = load_split(config)
    if len(split.train) == 0:
        raise ConfigError("training split is empty")
    (out / "config.txt").write_text(config.to_text(), encoding="utf-8")
    log_path = out / "epoch_log.tsv"
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(training.EPOCH_LOG_HEADER + "\n")

        def on_epoch(record):
            fh.write(record.tsv(config.log_elapsed) + "\n")
            fh.flush()
            print(record.tsv(config.log_elapsed), file=sys.stderr)

        result = training.fit(split, config.train_config(), on_epoch=on_epoch)
    model.save_checkpoint(result.params, config.checkpoint_path)
    if config.plots:
        from .plotting import plot_training_curves
        plot_training_curves(result.history, out / "training_curves.png")
    report = _metrics(result.params, config, split, split.validation)
    print(f"best epoch {result.best_epoch}; validation metrics")
    print(report.tsv(), end="")
    return EXIT_OK


def _metrics(params, config, split, truth_log):
    histories = data.build_sequences(split.train, config.hyper.max_len)
    seen = {s.user_id: set(s.items) for s in data.build_sequences(split.train, len(split.train))}
    return evaluation.evaluate_split(params, config.hyper, histories, truth_log,
                                     mode=evaluation.RankMode(config.rank_mode), exclude=seen)


def _load_model(config: RunConfig, num_items):
    try:
        params = model.load_checkpoint(config.checkpoint_path)
    except model.CheckpointError as exc:
        raise ConfigError(str(exc)) from None
    n, d, m = params.dims
    if n != num_items:
        raise ConfigError(f"checkpoint has {n} items but the interaction log has {num_items}")
    config.hyper = model.hyper_with(config.hyper, dim=d, num_interests=m)
    return params


def cmd_eval(config: RunConfig, split_name="test") -> int:
    config.validate(need_interactions=True, need_checkpoint=True)
    log_, split = load_split(config)
    params = _load_model(config, log_.num_items)
    truth_log = split.test if split_name == "test" else split.validation
    report = _metrics(params, config, split, truth_log)
    print(report.tsv(), end="")
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"metrics_{split_name}.tsv").write_text(report.tsv(), encoding="utf-8")
    (out / f"metrics_{split_name}.txt").write_text(report.keyvalue(), encoding="utf-8")
    if config.plots:
        from .plotting import plot_metrics
        seen = {s.user_id: set(s.items) for s in data.build_sequences(split.train, len(split.train))}
        baseline = evaluation.popularity_baseline(split.train, truth_log, exclude=seen)
        plot_metrics(report, out / f"metrics_{split_name}.png", baseline=baseline)
    return EXIT_OK


def format_recommendation(raw_user, rec: evaluation.Recommendation, item_ids) -> str:
    pairs = ",".join(f"{item_ids[i]}:{s:.6f}" for i, s in zip(rec.items, rec.scores))
    return f"{raw_user}\t{pairs}"


def cmd_recommend(config: RunConfig, users: str, k: int, output=None) -> int:
    config.validate(need_interactions=True, need_checkpoint=True)
    try:
        log_ = data.parse_interactions(config.interactions, config.delimiter)
    except (data.ParseError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    params = _load_model(config, log_.num_items)
    if k < 1:
        raise ConfigError("k must be >= 1")
    index = log_.user_index()
    sequences = {s.user_id: s for s in data.build_sequences(log_, config.hyper.max_len)}
    full = {s.user_id: set(s.items) for s in data.build_sequences(log_, len(log_))}
    lines, wanted = [], [u.strip() for u in users.split(",") if u.strip()]
    for raw in wanted:
        try:
            uid = index[int(raw)]
        except (ValueError, KeyError):
            print(f"warning: unknown user {raw}", file=sys.stderr)
            continue
        rec = evaluation.recall_for_user(sequences[uid], params, config.hyper, k,
                                         evaluation.RankMode(config.rank_mode), full[uid])
        if rec.truncated:
            print(f"warning: only {len(rec.items)} items available for user {raw}", file=sys.stderr)
        lines.append(format_recommendation(raw, rec, log_.item_ids))
    text = "".join(line + "\n" for line in lines)
    if output:
        Path(output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK if lines else EXIT_PARTIAL


def cmd_synth(config: RunConfig, args) -> int:
    spec = data.SyntheticSpec(
        num_users=args.num_users, num_items=args.num_items,
        num_planted_categories=args.num_planted_categories,
        interests_per_user=args.interests_per_user,
        interactions_per_user=args.interactions_per_user, noise_rate=args.noise_rate,
        seed=config.seed, span_days=args.span_days, interest_width=args.interest_width,
        window_share=args.window_share)
    try:
        dataset = data.generate_synthetic(spec)
    except ValueError as exc:
        raise ConfigError(f"invalid synthetic spec: {exc}") from None
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    data.write_interactions(dataset.log, out / "interactions.csv")
    data.write_ground_truth(dataset, out / "item_categories.tsv", out / "user_categories.tsv")
    print(f"wrote {len(dataset.log)} interactions for {spec.num_users} users to {out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        config.validate()
        if args.command == "train":
            return cmd_train(config)
        if args.command == "eval":
            return cmd_eval(config, args.split)
        if args.command == "recommend":
            return cmd_recommend(config, args.users, args.k, args.output)
        return cmd_synth(config, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, FloatingPointError) as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
