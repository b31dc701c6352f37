"""``stgnpp`` command line: simulate, train, eval, predict, selftest."""
from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DATA = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _load_config(args, **overrides):
    from .config import RunConfig
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        overrides["seed"] = args.seed
    return cfg.replace(**overrides) if overrides else cfg


def cmd_simulate(args) -> int:
    from . import datasets
    if args.links < 1:
        raise UsageError(f"--links must be >= 1, got {args.links}")
    if args.days <= 0:
        raise UsageError(f"--days must be positive, got {args.days}")
    seed = args.seed if args.seed is not None else 0
    ds = datasets.simulate_dataset(args.links, args.days, seed, args.scenario)
    datasets.write_dataset(ds, args.out)
    print(f"wrote {ds.n_events()} events on {ds.n_links} links to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from . import datasets, train
    ds = datasets.read_dataset(args.data)
    out = Path(args.out)
    if args.resume:
        state, cfg = train.resume_state(args.resume, ds)
        if args.epochs is not None:
            cfg = cfg.replace(epochs=args.epochs)
    else:
        overrides = {"epochs": args.epochs} if args.epochs is not None else {}
        cfg = _load_config(args, **overrides)
        state = None
    st = train.train(ds, cfg, out, state, echo=lambda s: print(s, flush=True))
    if not st.log:
        out.mkdir(parents=True, exist_ok=True)
        train.write_log(out / "train_log.csv", st.log)
        train.save_checkpoint(out / "checkpoint.bin", st, cfg)
    print(f"best epoch {st.best_epoch}; checkpoint {out / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import datasets, predict, train
    if not Path(args.checkpoint).is_file():
        raise OSError(f"checkpoint not found: {args.checkpoint}")
    ds = datasets.read_dataset(args.data)
    model, cfg, _ = train.load_model(args.checkpoint, ds.graph.adjacency)
    report, preds = predict.evaluate(model, ds, args.split, cfg.fractions)
    ha, _ = predict.baseline_ha(ds, args.split, cfg.fractions, cfg.window_slots)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics_model.txt").write_text(report.to_text(), encoding="ascii")
    (out / "metrics_ha.txt").write_text(ha.to_text(), encoding="ascii")
    with open(out / "pairs.csv", "w", newline="", encoding="ascii") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["window_end_min", "link", "t_true_min", "t_pred_min", "d_true_min", "d_pred_min"])
        for row in zip(preds.window_end_min, preds.link, preds.t_true, preds.t_pred, preds.d_true, preds.d_pred):
            w.writerow([repr(float(row[0])), int(row[1]), *(repr(float(x)) for x in row[2:])])
    sys.stdout.write("model\n" + report.to_text() + "ha\n" + ha.to_text())
    return EXIT_OK


def cmd_predict(args) -> int:
    from . import datasets, predict, train
    if not Path(args.checkpoint).is_file():
        raise OSError(f"checkpoint not found: {args.checkpoint}")
    model, cfg, _ = train.load_model(args.checkpoint)
    n_links = model.encoder.adjacency.shape[0]
    sample = datasets.window_file_sample(args.window, cfg.window_slots, args.start_min, args.events, n_links)
    if sample.history_lengths().sum() == 0:
        raise datasets.DataValidationError("window holds no congestion events")
    preds = predict.predict_samples(model, [sample], targets_only=False)
    out = open(args.out, "w", newline="", encoding="ascii") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["link", "t_next_min", "d_next_min"])
        for n, t, d in zip(preds.link, preds.t_pred, preds.d_pred):
            w.writerow([int(n), repr(float(t)), repr(float(d))])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run
    return EXIT_OK if run(seed=args.seed or 0) else EXIT_DATA


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stgnpp", description="Congestion event prediction on road networks.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="key=value run configuration file")
        sp.add_argument("--seed", type=int, help="random seed")
        return sp

    sp = common(sub.add_parser("simulate", help="generate a synthetic dataset"), config=False)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--links", type=int, default=30)
    sp.add_argument("--days", type=float, default=14.0)
    sp.add_argument("--scenario", choices=("benchmark", "homogeneous"), default="benchmark")
    sp.set_defaults(func=cmd_simulate)

    sp = common(sub.add_parser("train", help="train a model on a dataset"))
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--out", required=True, help="directory for the checkpoint and log")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--resume", help="continue from a checkpoint")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("eval", help="evaluate a checkpoint and the HA baseline"), config=False)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True, help="directory for the metrics files")
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("predict", help="predict the next event per link from one window"), config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--window", required=True, help="speeds CSV of one history window (relative slots)")
    sp.add_argument("--events", help="events CSV for the window; default: derived from the labels")
    sp.add_argument("--start-min", type=float, default=0.0, help="absolute minute of the window start")
    sp.add_argument("--out", help="output CSV (default stdout)")
    sp.set_defaults(func=cmd_predict)

    sp = common(sub.add_parser("selftest", help="run the quick property checks"), config=False)
    sp.set_defaults(func=cmd_selftest)
    return p


def _apply_thread_cap():
    raw = os.environ.get("STGNPP_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"STGNPP_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    from .checkpoint import CheckpointError
    from .config import ConfigError
    from .datasets import DataValidationError
    from .intensity import EmptyBatchError
    from .predict import EmptySplitError
    from .synthgen import ParameterError
    try:
        limiter = _apply_thread_cap()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (UsageError, ConfigError, ParameterError) as err:
        print(f"stgnpp: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataValidationError, CheckpointError, EmptyBatchError, EmptySplitError) as err:
        print(f"stgnpp: invalid data: {err}", file=sys.stderr)
        return EXIT_DATA
    except OSError as err:
        print(f"stgnpp: I/O error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
