"""Command line entry point ``motion-atlas``.

Exit codes: 0 success, 2 configuration error, 3 stage failure, 4 QC
rejected every subject.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import pipeline as pl
from .io import FormatError, read_curves, write_jsonl

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_QC = 0, 2, 3, 4


def _common(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="K=V",
                   help="override one config key (repeatable)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    p.add_argument("--output", help="output directory (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    ap = argparse.ArgumentParser(prog="motion-atlas", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the whole pipeline (cached per stage)")
    _common(p)
    p.add_argument("--stage", choices=pl.STAGES, help="stop after this stage")
    p.add_argument("--only", action="store_true", help="run just --stage")
    p.add_argument("--force", action="store_true", help="ignore the stage cache")

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    _common(p)

    p = sub.add_parser("qc", help="screen volume curves; JSON lines on stdout")
    _common(p)
    p.add_argument("--curves", help="curves JSON-lines file")

    p = sub.add_parser("atlas", help="build the atlas and local displacements")
    _common(p)
    p.add_argument("--meshes", help="directory of .lvseq files")
    p.add_argument("--qc", help="QC JSON lines; failed subjects are dropped")

    p = sub.add_parser("features", help="regional feature matrix")
    _common(p)
    p.add_argument("--atlas", help="atlas bundle")
    p.add_argument("--local", help="local displacement archive")

    p = sub.add_parser("embed", help="PCA / LLE / SDA descriptors")
    _common(p)
    p.add_argument("--features", help="feature CSV")
    p.add_argument("--method", action="append", choices=("pca", "lle", "sda"))

    p = sub.add_parser("associate", help="association tests and report")
    _common(p)
    p.add_argument("--embedding", action="append", help="embedding bundle (repeatable)")
    p.add_argument("--covariates", help="covariate CSV")
    p.add_argument("--curves", help="curves file for the EF baseline")
    p.add_argument("--qc", help="QC JSON lines carrying EF")

    p = sub.add_parser("report", help="compare the manifests of several runs")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--output", help="write the table here instead of stdout")
    return ap


def _config(args):
    cfg = pl.PipelineConfig.from_file(args.config) if args.config else pl.PipelineConfig()
    cfg.override(args.set)
    if args.output:
        cfg.output = args.output
    if args.jobs < 1:
        raise pl.ConfigError("--jobs must be at least 1")
    return cfg


def _run(args):
    if args.command == "report":
        text = pl.compare_manifests(args.runs)
        if args.output:
            with open(args.output, "w") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)
        return EXIT_OK

    cfg = _config(args)
    out = cfg.output
    os.makedirs(out, exist_ok=True)
    jobs = args.jobs
    if args.command == "run":
        only = args.stage if args.only else None
        if args.only and not args.stage:
            raise pl.ConfigError("--only needs --stage")
        man = pl.run_pipeline(cfg, jobs, until=None if only else args.stage, only=only,
                              force=args.force)
        summary = os.path.join(out, pl.FILES["summary"])
        if os.path.exists(summary) and (args.stage in (None, "associate")):
            with open(summary) as fh:
                sys.stdout.write(fh.read())
        else:
            sys.stdout.write(f"stages: {', '.join(man.stages)}\n")
        return EXIT_OK
    if args.command == "synth":
        pl.stage_synth(cfg, out, jobs)
    elif args.command == "qc":
        curves = read_curves(args.curves or os.path.join(out, pl.FILES["curves"]))
        recs = pl.run_qc(cfg, curves)
        write_jsonl(recs, os.path.join(out, pl.FILES["qc"]))
        for r in recs:
            sys.stdout.write(json.dumps(r, sort_keys=True) + "\n")
        if any("malformed-curve" in r["reasons"] for r in recs):
            return EXIT_STAGE
        if recs and not any(r["pass"] for r in recs):
            return EXIT_QC
    elif args.command == "atlas":
        pl.stage_atlas(cfg, out, args.meshes, args.qc, jobs)
    elif args.command == "features":
        pl.stage_features(cfg, out, args.atlas, args.local)
    elif args.command == "embed":
        pl.stage_embed(cfg, out, args.features, jobs, args.method)
    elif args.command == "associate":
        pl.stage_associate(cfg, out, args.embedding, args.covariates, args.curves, args.qc)
        with open(os.path.join(out, pl.FILES["association_text"])) as fh:
            sys.stdout.write(fh.read())
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return _run(args)
    except pl.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pl.QcRejectedAll as exc:
        print(f"qc: {exc}", file=sys.stderr)
        return EXIT_QC
    except (pl.StageError, FormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
