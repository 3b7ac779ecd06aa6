"""Command-line frontend.

Subcommands: synth | featurize | train | eval | finetune | ablate | report.
Every command writes its outputs plus the fully resolved config.json under
``--out``.  Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric
failure.  Errors print one line ``error: <kind>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .agc import waveform_gain_fn
from .config import RunConfig, merge_cli_config
from .errors import DataError, HydrorangeError, NumericError, UsageError
from . import experiments, learn, net, plots, report as report_mod, signal_io, synthgen
from .features import featurize_clip, read_cache, write_cache


def _add_common(p: argparse.ArgumentParser, needs_out=True):
    if needs_out:
        p.add_argument("--out", required=True, help="output directory (created if missing)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set net.base_filters=8")
    p.add_argument("--config", default=None, help="load a resolved config.json")
    p.add_argument("--seed", type=int, default=None,
                   help="master seed applied to scenario, net and training")
    p.add_argument("--deterministic", action="store_true",
                   help="serialize BLAS reductions for bit-reproducible runs")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hydrorange",
                                 description="underwater acoustic range estimation pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic tow-path recording")
    p.add_argument("--minutes", type=int, default=None, help="override scenario duration")
    _add_common(p)

    p = sub.add_parser("featurize", help="extract branch features into a cache")
    p.add_argument("--clip", required=True, help="input clip (.f32 with sidecar, or WAV)")
    p.add_argument("--labels", required=True, help="label CSV (minute,range_km)")
    p.add_argument("--cache", default=None, help="cache path (default <out>/cache.acaf)")
    _add_common(p)

    p = sub.add_parser("train", help="6-fold training run on a feature cache")
    p.add_argument("--features", required=True, help="feature cache (.acaf)")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a feature cache")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--fold", default="all", choices=["all", "test"],
                   help="evaluate the whole cache or only its test fold")
    _add_common(p)

    p = sub.add_parser("finetune", help="adapt a pretrained checkpoint to a target cache")
    p.add_argument("--checkpoint", required=True, help="source-domain checkpoint")
    p.add_argument("--features", required=True, help="target-domain cache")
    p.add_argument("--fraction", type=float, required=True, help="target fraction: 0, 0.15 or 0.30")
    p.add_argument("--any-fraction", action="store_true", help="allow other fractions")
    p.add_argument("--scratch", action="store_true",
                   help="train from scratch on the sampled fraction instead of fine-tuning")
    _add_common(p)

    p = sub.add_parser("ablate", help="four-variant component study")
    p.add_argument("--features", required=True)
    p.add_argument("--train-subsample", type=int, default=None,
                   help="cap training-fold size for faster comparisons")
    _add_common(p)

    p = sub.add_parser("report", help="re-emit CSVs and figures from a metrics.json")
    p.add_argument("--metrics", required=True)
    _add_common(p)

    return ap


def _prepare(args) -> RunConfig:
    cfg = merge_cli_config(args.config, args.set, args.seed, args.deterministic)
    if getattr(args, "out", None):
        os.makedirs(args.out, exist_ok=True)
    return cfg


def _figures(args) -> bool:
    return not args.no_figures


def cmd_synth(args) -> int:
    cfg = _prepare(args)
    if args.minutes is not None:
        cfg.data["scenario"]["duration_min"] = args.minutes
    scenario = cfg.scenario()
    clip, table = synthgen.synth_towpath(scenario)
    signal_io.write_raw_clip(clip, os.path.join(args.out, "clip"))
    signal_io.write_label_csv(table, os.path.join(args.out, "labels.csv"))
    cfg.write(args.out)
    print(f"wrote {clip.channels}-channel clip of {scenario.duration_min} min to {args.out}")
    return 0


def cmd_featurize(args) -> int:
    cfg = _prepare(args)
    clip = signal_io.load_multichannel_audio(args.clip)
    table = signal_io.read_label_csv(args.labels)
    gain = None
    wf_agc = cfg.waveform_agc()
    if wf_agc is not None:
        gain = waveform_gain_fn(wf_agc)
    fs = featurize_clip(clip, table, cfg.stft_cfg(), cfg.mel_cfg(), cfg.lags(), waveform_gain=gain)
    cache = args.cache or os.path.join(args.out, "cache.acaf")
    write_cache(fs, cache)
    cfg.write(args.out)
    lm, gc = fs.shapes
    print(f"featurized {len(fs)} segments: logmel {lm}, gcc {gc} -> {cache}")
    return 0


def cmd_train(args) -> int:
    cfg = _prepare(args)
    master = read_cache(args.features)
    model, history, rep, baseline = experiments.train_in_domain(master, cfg)
    net.save_checkpoint(model, os.path.join(args.out, "checkpoint.acan"))
    learn.history_to_csv(history, os.path.join(args.out, "history.csv"))
    report_mod.emit_report(rep, args.out, figures=_figures(args))
    if _figures(args):
        plots.save_history_figure(history, os.path.join(args.out, "history.png"))
    cfg.write(args.out)
    print(
        f"test MAE {rep.mae_km:.4f} km, MSE {rep.mse_km2:.5f} km^2, "
        f"credible {rep.pcl5_percent:.2f}% (mean-baseline MAE {baseline:.4f} km)"
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _prepare(args)
    model = net.load_checkpoint(args.checkpoint)
    master = read_cache(args.features)
    if args.fold == "test":
        _, _, subset = learn.split(master, *cfg.folds())
    else:
        subset = master
    rep = learn.evaluate(model, subset, cfg.feature_agc())
    report_mod.emit_report(rep, args.out, figures=_figures(args))
    cfg.write(args.out)
    print(f"MAE {rep.mae_km:.4f} km, MSE {rep.mse_km2:.5f} km^2, credible {rep.pcl5_percent:.2f}%")
    return 0


def cmd_finetune(args) -> int:
    cfg = _prepare(args)
    pretrained = net.load_checkpoint(args.checkpoint)
    target = read_cache(args.features)
    agc = cfg.feature_agc()
    hyper = cfg.hyper()
    seed = cfg.data["train"]["seed"]
    if args.scratch:
        if args.fraction <= 0:
            raise UsageError("--scratch needs a positive fraction to train on")
        _, eval_set = learn.finetune(
            net.clone_model(pretrained), target, args.fraction, hyper, seed, agc,
            allow_any_fraction=args.any_fraction,
        )
        tune = target.subset(~np.isin(target.indices, eval_set.indices))
        model = net.build_model(pretrained.cfg)
        model, history = learn.train(model, tune, tune, hyper, agc)
    else:
        model, eval_set = learn.finetune(
            pretrained, target, args.fraction, hyper, seed, agc,
            allow_any_fraction=args.any_fraction,
        )
        history = []
    rep = learn.evaluate(model, eval_set, agc)
    net.save_checkpoint(model, os.path.join(args.out, "checkpoint.acan"))
    if history:
        learn.history_to_csv(history, os.path.join(args.out, "history.csv"))
    report_mod.emit_report(rep, args.out, figures=_figures(args))
    cfg.write(args.out)
    mode = "scratch" if args.scratch else "finetune"
    print(f"{mode} fraction {args.fraction:g}: MAE {rep.mae_km:.4f} km on {len(eval_set)} held-out segments")
    return 0


def cmd_ablate(args) -> int:
    cfg = _prepare(args)
    master = read_cache(args.features)
    rows = experiments.run_ablation(master, cfg, train_subsample=args.train_subsample)
    experiments.ablation_rows_to_csv(rows, os.path.join(args.out, "ablation.csv"))
    if _figures(args):
        plots.save_ablation_figure(rows, os.path.join(args.out, "ablation.png"))
    cfg.write(args.out)
    for row in rows:
        print(f"{row['label']:>13}: MAE {row['mae_km']:.4f} km, credible {row['pcl5_percent']:.2f}%")
    return 0


def cmd_report(args) -> int:
    cfg = _prepare(args)
    if not os.path.exists(args.metrics):
        raise DataError(f"metrics file not found: {args.metrics}")
    with open(args.metrics) as fh:
        rep = learn.MetricsReport.from_json(fh.read())
    report_mod.emit_report(rep, args.out, figures=_figures(args))
    cfg.write(args.out)
    print(f"re-emitted report for {len(rep.predictions)} predictions to {args.out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "eval": cmd_eval,
    "finetune": cmd_finetune,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.deterministic:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=1):
                return COMMANDS[args.command](args)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return 4
    except HydrorangeError as exc:
        print(f"error: internal: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
