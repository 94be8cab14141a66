"""Command-line entry point: ``dartser <command> ...`` (also ``python3 -m dartser``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .cell import genotype_to_dot, import_genotype
from .config import load_config
from .data import FeatureConfig, prepare_records, save_container, synth_dataset
from .experiment import FoldError, evaluate_checkpoint, run_search_experiment, run_train_experiment
from .models import BASELINES
from .report import summarize
from .tensor import make_rng

log = logging.getLogger("dartser")


def _write_atomically(records, out: Path) -> None:
    tmp = out.with_name(out.name + ".partial")
    try:
        save_container(records, tmp)
        tmp.replace(out)
    finally:
        tmp.unlink(missing_ok=True)


def cmd_dataset_synth(args) -> int:
    records = synth_dataset(args.n, make_rng(args.seed), classes=4, speakers=args.speakers,
                            snr_db=args.snr_db, noise=not args.noiseless)
    _write_atomically(records, Path(args.out))
    print(f"wrote {len(records)} records ({args.speakers} speakers) to {args.out}")
    return 0


def cmd_dataset_prepare(args) -> int:
    features = load_config(args.config).features if args.config else FeatureConfig()
    records = prepare_records(args.wav_dir, args.labels_csv, features)
    _write_atomically(records, Path(args.out))
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def _config(args):
    cfg = load_config(args.config)
    overrides = {}
    if getattr(args, "epochs", None) is not None:
        overrides["search_epochs" if args.command == "search" else "train_epochs"] = args.epochs
    if getattr(args, "folds", None):
        overrides["folds"] = args.folds
    return cfg.replace(**overrides) if overrides else cfg


def cmd_search(args) -> int:
    header = run_search_experiment(_config(args), args.data, args.out_dir, jobs=args.jobs)
    for row in header["results"]:
        print(f"fold {row['fold']}: {json.dumps(row['genotype'], sort_keys=True, separators=(',', ':'))}")
    print(f"reduction cells at {header['reduction_indices']}; run written to {args.out_dir}")
    return 0


def cmd_train(args) -> int:
    report = run_train_experiment(_config(args), args.data, args.out_dir, genotype_source=args.genotype,
                                  baseline=args.baseline, jobs=args.jobs)
    print("fold,test_loss,test_wa,test_ua")
    for row in report["folds"]:
        print(f"{row['fold']},{row['loss']:.6f},{row['wa']:.6f},{row['ua']:.6f}")
    m, s = report["mean"], report["std"]
    print(f"mean,{m['loss']:.6f},{m['wa']:.6f},{m['ua']:.6f}")
    print(f"std,{s['loss']:.6f},{s['wa']:.6f},{s['ua']:.6f}")
    return 0


def cmd_eval(args) -> int:
    res = evaluate_checkpoint(args.checkpoint, args.data)
    m, st = res["metrics"], res["stored"]
    print("fold,source,loss,wa,ua")
    print(f"{res['fold']},recomputed,{m['loss']:.9f},{m['wa']:.9f},{m['ua']:.9f}")
    print(f"{res['fold']},stored,{st['loss']:.9f},{st['wa']:.9f},{st['ua']:.9f}")
    if not res["match"]:
        print(f"error: recomputed metrics differ from the stored report by {res['max_abs_diff']:.3g}",
              file=sys.stderr)
        return 3
    return 0


def cmd_genotype_export_dot(args) -> int:
    dot = genotype_to_dot(import_genotype(Path(args.genotype).read_bytes()))
    if args.out:
        Path(args.out).write_text(dot)
    else:
        sys.stdout.write(dot)
    return 0


def cmd_report(args) -> int:
    out = summarize(args.run_dir, figures=not args.no_figures)
    sys.stdout.write(out.read_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dartser", description="Cell search, training and evaluation for 4-class SER.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="build SERC1 containers").add_subparsers(dest="dataset_command", required=True)
    synth = ds.add_parser("synth", help="synthetic class-conditional spectrograms")
    synth.add_argument("--n", type=int, required=True)
    synth.add_argument("--speakers", type=int, default=8)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--snr-db", type=float, default=10.0)
    synth.add_argument("--noiseless", action="store_true", help="patterns without additive noise")
    synth.add_argument("--out", required=True)
    synth.set_defaults(func=cmd_dataset_synth)
    prep = ds.add_parser("prepare", help="MFCC features from 16-bit PCM mono WAV files")
    prep.add_argument("--wav-dir", required=True)
    prep.add_argument("--labels-csv", required=True, help="rows: filename,label,speaker")
    prep.add_argument("--config", help="JSON config supplying sample_rate, seconds, n_fft, hop_length")
    prep.add_argument("--out", required=True)
    prep.set_defaults(func=cmd_dataset_prepare)

    for name, func, helptext in (("search", cmd_search, "search one cell genotype per fold"),
                                 ("train", cmd_train, "train and test a model per fold")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", help="JSON run config; omitted keys take their defaults")
        sp.add_argument("--data", required=True, help="SERC1 container")
        sp.add_argument("--out-dir", required=True)
        sp.add_argument("--epochs", type=int, help="override the configured epoch count")
        sp.add_argument("--folds", type=int, nargs="+", help="run only these fold ids")
        sp.add_argument("--jobs", type=int, default=1, help="folds run in parallel processes")
        sp.set_defaults(func=func)
        if name == "train":
            which = sp.add_mutually_exclusive_group(required=True)
            which.add_argument("--genotype", help="genotype JSON file or a search run directory")
            which.add_argument("--baseline", choices=BASELINES)

    ev = sub.add_parser("eval", help="recompute a checkpoint's test metrics")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.set_defaults(func=cmd_eval)

    gt = sub.add_parser("genotype", help="genotype utilities").add_subparsers(dest="genotype_command", required=True)
    dot = gt.add_parser("export-dot", help="Graphviz rendering of a genotype")
    dot.add_argument("--genotype", required=True)
    dot.add_argument("--out")
    dot.set_defaults(func=cmd_genotype_export_dot)

    rp = sub.add_parser("report", help="rewrite summary.csv and figures for a run directory")
    rp.add_argument("run_dir")
    rp.add_argument("--no-figures", action="store_true")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except FoldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TypeError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
