"""Command-line front end.

Subcommands:
  train  fit a network from a JSON config, writing checkpoint + log + manifest
  eval   Monte-Carlo NMSE comparison of recovery algorithms, writing a CSV
  se     per-layer NMSE predicted by the scalar recursion for the matched case
  gen    dump a dataset (matrix, signals, observations) for external use

Exit codes: 0 success, 2 bad usage or config, 3 divergence, 4 I/O failure.

Heavy imports happen inside the command handlers so --threads can pin the
BLAS thread pools before numpy loads.
"""

import argparse
import json
import os
import sys

from .errors import DivergenceError


def build_parser():
    p = argparse.ArgumentParser(
        prog="gmamp",
        description="Sparse-signal recovery with mixture denoisers: classical "
        "iterations, a trainable unfolded network, and evaluation tools.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed-override", type=int, default=None, help="replace the config seed")
        sp.add_argument("--threads", type=int, default=None, help="pin BLAS/OpenMP thread count")
        sp.add_argument("--depth", type=int, default=None, help="limit the number of layers")

    t = sub.add_parser("train", help="train a network from a config")
    t.add_argument("--config", required=True, help="JSON experiment config")
    common(t)

    e = sub.add_parser("eval", help="Monte-Carlo NMSE evaluation")
    e.add_argument("--config", help="JSON experiment config")
    e.add_argument("--checkpoint", help="trained model produced by `gmamp train`")
    e.add_argument(
        "--algorithms",
        default="amp_gm",
        help="comma list from {amp_gm, amp_l1, net}; net needs --checkpoint",
    )
    e.add_argument("--trials", type=int, default=1000, help="Monte-Carlo trials")
    common(e)

    s = sub.add_parser("se", help="per-layer NMSE predicted by the scalar recursion")
    s.add_argument("--config", required=True)
    common(s, out_required=False)

    g = sub.add_parser("gen", help="write a dataset as .npz")
    g.add_argument("--config", required=True)
    g.add_argument("--trials", type=int, default=100, help="number of signal columns")
    common(g)

    return p


def _pin_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ[var] = str(n)


def _apply_overrides(config, args):
    import dataclasses

    if args.seed_override is not None:
        config = config.with_seed(args.seed_override)
    if getattr(args, "depth", None) is not None:
        if args.depth < 1:
            raise ValueError("--depth must be positive")
        config = dataclasses.replace(config, T_max=args.depth)
    return config


def cmd_train(args):
    from . import network, serialize

    config = _apply_overrides(serialize.load_config(args.config), args)
    os.makedirs(args.out, exist_ok=True)
    result = network.train(config)
    ckpt = os.path.join(args.out, "checkpoint.json")
    log = os.path.join(args.out, "training_log.csv")
    serialize.save_checkpoint(ckpt, result.model, config, stages=result.stages)
    serialize.write_training_log(log, result.log_rows)
    final_db = result.stages[-1]["val_nmse_db_best"] if result.stages else float("nan")
    serialize.write_manifest(
        os.path.join(args.out, "manifest.json"),
        {
            "command": "train",
            "config_hash": serialize.config_hash(config),
            "seed": config.seed,
            "n_layers": result.model.n_layers,
            "final_val_nmse_db": final_db,
            "stages": len(result.stages),
            "outputs": ["checkpoint.json", "training_log.csv"],
        },
    )
    print("trained %d layers; validation NMSE %.2f dB; checkpoint at %s"
          % (result.model.n_layers, final_db, ckpt))
    if any(rec["stopped"] == "diverged" for rec in result.stages):
        print("warning: at least one training stage hit divergence", file=sys.stderr)
        return 3
    return 0


def cmd_eval(args):
    import math

    from . import serialize, simulate

    model = None
    ckpt_config = None
    if args.checkpoint:
        model, ckpt_config, _ = serialize.load_checkpoint(args.checkpoint)
    if args.config:
        config = serialize.load_config(args.config)
        if ckpt_config is not None and serialize.config_hash(config) != serialize.config_hash(ckpt_config):
            raise ValueError("--config does not match the checkpoint's config")
    elif ckpt_config is not None:
        config = ckpt_config
    else:
        raise ValueError("eval needs --config or --checkpoint")
    config = _apply_overrides(config, args)
    if model is not None and args.depth is not None:
        model = model.truncated(min(args.depth, model.n_layers))

    algorithms = [a.strip() for a in args.algorithms.split(",") if a.strip()]
    if not algorithms:
        raise ValueError("no algorithms requested")
    result = simulate.monte_carlo(config, algorithms, args.trials, model=model)

    os.makedirs(args.out, exist_ok=True)
    out_csv = os.path.join(args.out, "results.csv")
    serialize.write_results_csv(out_csv, result.rows)
    serialize.write_manifest(
        os.path.join(args.out, "manifest.json"),
        {
            "command": "eval",
            "config_hash": serialize.config_hash(config),
            "seed": config.seed,
            "trials": args.trials,
            "algorithms": algorithms,
            "l1_threshold": result.lam_l1,
            "diverged": result.diverged,
            "outputs": ["results.csv"],
        },
    )
    finals = {}
    for row in result.rows:
        finals[row["algorithm"]] = row  # rows are layer-ordered; last wins
    for name, row in sorted(finals.items()):
        print("%-12s layer %2d: %8.2f dB (stderr %.3f, diverged %d/%d)"
              % (name, row["layer"], row["nmse_db_mean"], row["nmse_db_stderr"],
                 row["diverged_count"], row["trials"]))
    print("results at %s" % out_csv)
    all_dead = any(
        all(math.isnan(r["nmse_db_mean"]) for r in result.rows if r["algorithm"] == name)
        for name in {r["algorithm"] for r in result.rows}
    )
    return 3 if all_dead else 0


def cmd_se(args):
    from . import serialize, simulate

    config = _apply_overrides(serialize.load_config(args.config), args)
    curve = simulate.se_prediction(config)
    for t, db in enumerate(curve, start=1):
        print("layer %2d: %8.2f dB" % (t, db))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        import csv

        path = os.path.join(args.out, "se.csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "nmse_db"])
            for t, db in enumerate(curve, start=1):
                writer.writerow([t, repr(float(db))])
        serialize.write_manifest(
            os.path.join(args.out, "manifest.json"),
            {
                "command": "se",
                "config_hash": serialize.config_hash(config),
                "layers": len(curve),
                "outputs": ["se.csv"],
            },
        )
        print("curve at %s" % path)
    return 0


def cmd_gen(args):
    import numpy as np

    from . import serialize, simulate

    config = _apply_overrides(serialize.load_config(args.config), args)
    if args.trials < 1:
        raise ValueError("--trials must be positive")
    A = simulate.design_matrix(config)
    X, Y = simulate.sample_batch(config, args.trials, role="eval", A=A)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "dataset.npz")
    np.savez(path, A=A, X=X, Y=Y, noise_var=config.noise_var())
    serialize.write_manifest(
        os.path.join(args.out, "manifest.json"),
        {
            "command": "gen",
            "config_hash": serialize.config_hash(config),
            "seed": config.seed,
            "trials": args.trials,
            "outputs": ["dataset.npz"],
        },
    )
    print("dataset at %s" % path)
    return 0


_HANDLERS = {"train": cmd_train, "eval": cmd_eval, "se": cmd_se, "gen": cmd_gen}


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be positive", file=sys.stderr)
            return 2
        _pin_threads(args.threads)
    try:
        return _HANDLERS[args.command](args)
    except DivergenceError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 3
    except (ValueError, TypeError, KeyError, json.JSONDecodeError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    except OSError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
