"""Command-line interface: ``rnp synth | train | eval | gradcheck``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
3 failed check.  Run directories live under ``$RNP_RUN_DIR`` (default
``./runs``) unless ``--run-dir`` / ``--out-dir`` is given.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .baselines import LstmBaselineConfig, train_lstm_baseline
from .checkpoint import CheckpointError, load_checkpoint, restore_model
from .data import (
    CsvSchema,
    DataError,
    NormStats,
    TimeSeries,
    apply_norm,
    denormalize,
    fit_norm,
    load_csv,
    synth_drives,
    synth_sine_drift,
    synth_two_scale,
    write_csv,
)
from .evaluation import evaluate_one_step, write_predictions_csv
from .metrics import MetricsReport, fingerprint, mse, normalized_mse
from .model import RnpConfig, RnpModel, Subsequence
from .training import TrainConfig, TrainingAborted, elbo_loss, train

log = logging.getLogger("rnp")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3
SYNTH_KINDS = ("sine-drift", "two-scale", "drives")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _pick_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    return int(np.random.SeedSequence().entropy % (2**31))


def _run_root() -> Path:
    return Path(os.environ.get("RNP_RUN_DIR", "runs"))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _dataset_fingerprint(path: Path, ts: TimeSeries) -> dict:
    return {
        "path": str(path),
        "length": len(ts),
        "sha256": hashlib.sha256(path.read_bytes()).hexdigest(),
    }


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- data loading -------------------------------------------------------------


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="CSV file")
    p.add_argument("--target-column", default="y")
    p.add_argument("--input-columns", default="x", help="comma-separated; empty for the row index")
    p.add_argument("--no-header", action="store_true")
    p.add_argument("--delimiter", default=",")
    p.add_argument("--max-rows", type=int)
    p.add_argument("--sum-inputs", action="store_true", help="collapse input columns into their sum")


def _load(args) -> tuple[Path, TimeSeries]:
    path = Path(args.data)
    if not path.is_file():
        raise UsageError(f"dataset not found: {path}")
    cols = [c for c in args.input_columns.split(",") if c]
    target = args.target_column
    if args.no_header:
        cols = [int(c) for c in cols]
        target = int(target)
    schema = CsvSchema(target, cols, not args.no_header, args.delimiter, args.max_rows,
                       "sum" if args.sum_inputs else None)
    return path, load_csv(path, schema)


# --- synth ----------------------------------------------------------------------


def cmd_synth(args) -> int:
    seed = _pick_seed(args.seed)
    if args.kind == "sine-drift":
        ts = synth_sine_drift(args.steps, noise_std=args.noise_std if args.noise_std is not None else 0.05, seed=seed)
    elif args.kind == "two-scale":
        ts = synth_two_scale(args.steps, noise_std=args.noise_std if args.noise_std is not None else 0.05, seed=seed)
    else:
        ts = synth_drives(args.steps, noise_std=args.noise_std if args.noise_std is not None else 0.02, seed=seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(ts, out)
    meta = {"generator": ts.meta, "steps": len(ts), "seed": seed, "columns": ["step", "x", "y"]}
    _write_json(out.with_suffix(".json"), meta)
    print(f"wrote {len(ts)} rows to {out}")
    return EXIT_OK


# --- train -------------------------------------------------------------------------


def _model_config(args, ts: TimeSeries) -> RnpConfig:
    return RnpConfig(
        input_dim=ts.input_dim,
        target_dim=ts.target_dim,
        hidden_size=args.hidden,
        latent_dim=args.latent,
        encoder_layers=args.layers,
        bidirectional=args.bidirectional,
        decoder_kind=args.decoder,
        use_deterministic_path=args.deterministic_path,
        condition_on_time=args.condition_on_time,
    )


def _train_config(args, seed: int) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=seed,
        context_count_range=(args.min_contexts, args.max_contexts),
        context_len=args.context_len,
        target_len=args.target_len,
        kl_weight=args.kl_weight,
        grad_clip_norm=args.grad_clip,
        batches_per_epoch=args.batches_per_epoch,
        checkpoint_every=args.checkpoint_every,
    )


def cmd_train(args) -> int:
    seed = _pick_seed(args.seed)
    path, ts = _load(args)
    if not 0 < args.train_fraction <= 1:
        raise UsageError("--train-fraction must lie in (0, 1]")
    train_end = int(round(args.train_fraction * len(ts)))
    try:
        model_cfg = _model_config(args, ts)
        train_cfg = _train_config(args, seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.decoder != "recurrent":
        raise UsageError("training on sequences needs --decoder recurrent")
    stats = fit_norm(ts, train_end)
    normed = apply_norm(ts, stats).segment(0, train_end)

    config = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "train_end": train_end}
    name = args.run_name or f"train-{fingerprint(config)}-s{seed}"
    run_dir = Path(args.run_dir) if args.run_dir else _run_root() / name
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": ["rnp", *args.argv],
        "config": config,
        "seed": seed,
        "dataset": _dataset_fingerprint(path, ts),
        "version": __version__,
        "started_at": _now(),
    }
    _write_json(run_dir / "manifest.json", manifest)

    extra = {"norm": stats.to_dict(), "train_end": train_end, "seed": seed,
             "context_len": args.context_len}
    model = RnpModel.create(model_cfg, seed)

    def report(rec):
        log.info("epoch %d loss %.4f val_nll %.4f", rec["epoch"], rec["train_loss"], rec["val_nll"])

    try:
        train(model, normed, train_cfg, run_dir, on_epoch=report,
              record_wall_time=args.record_wall_time, extra_meta=extra)
    except TrainingAborted as exc:
        print(f"training aborted: {exc}; last checkpoint {exc.last_checkpoint}", file=sys.stderr)
        return EXIT_RUNTIME
    print(str(run_dir))
    return EXIT_OK


# --- eval --------------------------------------------------------------------------------


def _lstm_baseline_mse(normed: TimeSeries, stats: NormStats, test_start: int, args, seed: int) -> float:
    cfg = LstmBaselineConfig(hidden_size=args.lstm_hidden, steps=args.lstm_steps, seed=seed,
                             window=min(50, test_start))
    model, _ = train_lstm_baseline(normed, cfg, test_start)
    preds = model.predict(normed.x[test_start:], normed.y[test_start:])
    return mse(denormalize(preds, stats), denormalize(normed.y[test_start:], stats))


def cmd_eval(args) -> int:
    seed = _pick_seed(args.seed)
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.is_file():
        raise UsageError(f"checkpoint not found: {ckpt_path}")
    path, ts = _load(args)
    try:
        ck = load_checkpoint(ckpt_path)
        model = restore_model(ck)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc
    cfg = ck.config
    if (ts.input_dim, ts.target_dim) != (cfg.input_dim, cfg.target_dim):
        raise UsageError(
            f"dataset has ({ts.input_dim}, {ts.target_dim}) features, checkpoint expects "
            f"({cfg.input_dim}, {cfg.target_dim})"
        )
    if "norm" in ck.extra:
        stats = NormStats.from_dict(ck.extra["norm"])
    else:
        stats = fit_norm(ts, ck.extra.get("train_end"))
    test_start = args.test_start if args.test_start is not None else int(ck.extra.get("train_end", len(ts) // 2))
    if not 1 <= test_start < len(ts):
        raise UsageError(f"test start {test_start} outside series of length {len(ts)}")
    context_len = args.context_len or int(ck.extra.get("context_len", 20))
    normed = apply_norm(ts, stats)
    result = evaluate_one_step(model, normed, stats, test_start, n_contexts=args.n_contexts,
                               context_len=context_len, n_samples=args.samples, level=args.level, seed=seed)

    base_mse = None
    if args.baseline == "persistence":
        base_mse = mse(ts.y[test_start - 1 : -1], ts.y[test_start:])
    elif args.baseline == "lstm":
        base_mse = _lstm_baseline_mse(normed, stats, test_start, args, seed)
    eval_cfg = {"checkpoint": str(ckpt_path), "model": cfg.to_dict(), "samples": args.samples,
                "level": args.level, "n_contexts": args.n_contexts, "context_len": context_len,
                "test_start": test_start, "baseline": args.baseline, "seed": seed}
    report = MetricsReport(
        mse=result.mse,
        normalized_mse=normalized_mse(result.mse, base_mse) if base_mse else None,
        baseline=args.baseline,
        baseline_mse=base_mse,
        picp=result.picp,
        level=args.level,
        n_steps=len(result.mean),
        config_fingerprint=fingerprint(eval_cfg),
    )
    out_dir = Path(args.out_dir) if args.out_dir else ckpt_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "eval_manifest.json", {
        "command": ["rnp", *args.argv], "config": eval_cfg, "seed": seed,
        "dataset": _dataset_fingerprint(path, ts), "version": __version__, "started_at": _now(),
    })
    (out_dir / "metrics.json").write_text(report.to_json() + "\n")
    write_predictions_csv(out_dir / "predictions.csv", result)
    print(report.to_json())
    return EXIT_OK


# --- gradcheck ----------------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    seed = _pick_seed(args.seed)
    rng = np.random.default_rng(seed)
    model = RnpModel.create(RnpConfig(hidden_size=8, latent_dim=4, bidirectional=args.bidirectional), seed)
    context = [Subsequence(4 * i, rng.normal(size=(4, 1)), rng.normal(size=(4, 1))) for i in range(3)]
    target = Subsequence(12, rng.normal(size=(3, 1)), rng.normal(size=(3, 1)))
    noise = rng.standard_normal(4)
    report = ad.grad_check(
        lambda: elbo_loss(model, context, target, noise=noise)[0],
        model.param_dict(),
        eps=args.eps,
        rel_tol=args.tol,
        grad_offset=1.0 if args.inject_grad_fault else 0.0,
    )
    print(report.summary())
    if args.verbose:
        for name, err in report.errors.items():
            print(f"  {name}: {err:.3e}")
    return EXIT_OK if report.passed else EXIT_CHECK


# --- entry point ------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rnp", description="Recurrent Neural Processes for one-step forecasting.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic series")
    p.add_argument("--kind", required=True, choices=SYNTH_KINDS)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train an RNP and write a run directory")
    _add_data_flags(p)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--latent", type=int, default=32)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--bidirectional", type=_bool, default=False)
    p.add_argument("--decoder", choices=("recurrent", "feedforward"), default="recurrent")
    p.add_argument("--deterministic-path", type=_bool, default=True)
    p.add_argument("--condition-on-time", type=_bool, default=False)
    p.add_argument("--context-len", type=int, default=20)
    p.add_argument("--target-len", type=int, default=20)
    p.add_argument("--min-contexts", type=int, default=1)
    p.add_argument("--max-contexts", type=int, default=3)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batches-per-epoch", type=int, default=1)
    p.add_argument("--kl-weight", type=float, default=1.0)
    p.add_argument("--grad-clip", type=float, default=5.0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--train-fraction", type=float, default=0.5,
                   help="leading share of the series used for training and normalisation")
    p.add_argument("--record-wall-time", action="store_true",
                   help="log wall_ms per epoch (makes metrics.jsonl non-reproducible)")
    p.add_argument("--seed", type=int)
    p.add_argument("--run-dir")
    p.add_argument("--run-name")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="one-step evaluation of a checkpoint")
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--level", type=float, default=0.9)
    p.add_argument("--baseline", choices=("persistence", "lstm"))
    p.add_argument("--lstm-hidden", type=int, default=50)
    p.add_argument("--lstm-steps", type=int, default=2000)
    p.add_argument("--n-contexts", type=int, default=3)
    p.add_argument("--context-len", type=int)
    p.add_argument("--test-start", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full ELBO gradient")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--bidirectional", type=_bool, default=False)
    p.add_argument("--inject-grad-fault", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, DataError) as exc:
        print(f"rnp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"rnp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, FloatingPointError, RuntimeError) as exc:
        print(f"rnp {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
