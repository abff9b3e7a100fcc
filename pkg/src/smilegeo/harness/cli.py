"""Command line: ``smilegeo {synth,eval,train,report}``.

Exit status is 0 on success, 1 for bad input (usage, validation, missing
files) and 2 for runtime faults such as a failed pipeline or a numerical
blow-up.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..errors import (AgentUnavailable, IngestError, MissingImage, NotGeocodable, NumericalFault, PipelineFailed,
                      ValidationError)
from ..learn import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import ingest, split, synth_world
from .evaluate import RunReport, evaluate, fit


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, type=Path, help="TOML run configuration")
    p.add_argument("--dataset", type=Path, help="dataset JSONL; overrides the config's dataset and split")
    p.add_argument("--k", type=int, help="answer agents")
    p.add_argument("--r", type=int, help="reviewers per answer agent")
    p.add_argument("--z", type=int, help="maximum discussion rounds")
    p.add_argument("--th", type=float, help="correctness threshold in km")
    p.add_argument("--retrieval", type=_on_off, metavar="on|off", help="enable the retrieval stub")
    p.add_argument("--seed", type=int, help="run seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="smilegeo", description="Geo-localization by a swarm of reviewing agents.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a seeded synthetic world (roster, dataset, gazetteer)")
    p.add_argument("--agents", type=int, required=True)
    p.add_argument("--regions", type=int, required=True)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--th", type=float, default=50.0)
    p.add_argument("--home-accuracy", type=float, default=0.9)
    p.add_argument("--away-accuracy", type=float, default=0.2)
    p.add_argument("--persuadability", type=float, default=0.6)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("eval", help="evaluate a roster on a dataset and write a report")
    _run_flags(p)
    p.add_argument("--model", type=Path, help="selection model checkpoint")
    p.add_argument("--baseline", choices=["pipeline", "debate"], default="pipeline")
    p.add_argument("--out", type=Path, help="report path (default: stdout)")

    p = sub.add_parser("train", help="estimate targets on the training split and fit a selection model")
    _run_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")

    p = sub.add_parser("report", help="pretty-print a report")
    p.add_argument("path", type=Path)
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(k=args.k, r=args.r, z=args.z, th=args.th, retrieval_enabled=args.retrieval,
                              seed=args.seed, epochs=getattr(args, "epochs", None), lr=getattr(args, "lr", None))


def _records(args, cfg: RunConfig, gazetteer):
    """(train, test) records: an explicit dataset is used whole, otherwise the config's dataset is split."""
    if args.dataset is not None:
        records = ingest(args.dataset, gazetteer)
        return records, records, False
    if cfg.dataset is None:
        raise ValidationError("no dataset: pass --dataset or set 'dataset' in the config")
    train_recs, test_recs = split(ingest(cfg.dataset, gazetteer), cfg.train_fraction, cfg.seed)
    return train_recs, test_recs, True


def _synth(args) -> int:
    world = synth_world(args.agents, args.regions, args.samples, args.seed, th=args.th,
                        home_accuracy=args.home_accuracy, away_accuracy=args.away_accuracy,
                        persuadability=args.persuadability)
    for path in world.save(args.out):
        print(path)
    return 0


def _eval(args) -> int:
    cfg = _config(args)
    roster, gaz = cfg.build()
    train_recs, test_recs, was_split = _records(args, cfg, gaz)
    model = load_checkpoint(args.model) if args.model else None
    echo = cfg.echo() | {"model": str(args.model) if args.model else None}
    report = evaluate(cfg.discussion, roster, test_recs, gazetteer=gaz, seed=cfg.seed, model=model,
                      mode=args.baseline, train_records=train_recs if was_split else None, config_echo=echo)
    text = report.to_json()
    if args.out:
        args.out.write_text(text, encoding="utf-8")
        print(f"accuracy {report.accuracy:.4f} over {report.n_samples} samples -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _train(args) -> int:
    cfg = _config(args)
    roster, gaz = cfg.build()
    train_recs, _, _ = _records(args, cfg, gaz)
    logger = logging.getLogger("smilegeo.train")
    result = fit(train_recs, roster, cfg.train, cfg.discussion, gazetteer=gaz, seed=cfg.seed,
                 on_epoch=lambda row: logger.info("epoch %(epoch)d loss %(loss_total).6f", row))
    save_checkpoint(result.model, args.out)
    history = args.out.with_name(args.out.name + ".history.json")
    history.write_text(json.dumps({"report": result.report, "history": result.history}, indent=2) + "\n",
                       encoding="utf-8")
    print(json.dumps(result.report, sort_keys=True))
    return 0


def _report(args) -> int:
    r = RunReport.load(args.path)
    print(f"mode          {r.mode}")
    print(f"samples       {r.n_samples} ({r.n_failed} failed)")
    print(f"accuracy      {r.accuracy:.4f}")
    print(f"avg tokens    {r.avg_tokens:.1f}")
    print(f"avg calls     {r.avg_calls:.2f}")
    print(f"rt avg / med  {r.rt_avg_ms:.2f} / {r.rt_med_ms:.2f} ms")
    if r.coverage is not None:
        print(f"coverage      {r.coverage:.2f}%  consistency {r.consistency:.2f}%")
    for note in r.notes:
        print(f"note: {note}")
    return 0


_COMMANDS = {"synth": _synth, "eval": _eval, "train": _train, "report": _report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (ValidationError, IngestError, NotGeocodable, MissingImage, FileNotFoundError,
            json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (PipelineFailed, NumericalFault, AgentUnavailable, RuntimeError, OSError) as exc:
        print(f"fault: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
