"""Command line front end.

Every subcommand reads an optional JSON config (keys mirror
:class:`~crossdistill.trainer.ExperimentConfig`, with generator settings under
``"gen"``); flags given on the command line override file values.  All
outputs land in ``--out-dir`` under names derived from the config alone.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import losses as L
from .curves import export_curves
from .data import save_dataset
from .estimators import CTCTeacher, StudentRecognizer
from .exceptions import ConfigError, ContractError
from .models import load_model
from .trainer import (
    SPLITS,
    ExperimentConfig,
    SigmaPhaseResult,
    learn_uncertainty_weights,
    load_splits,
    pretrain_teacher,
    train_student,
)

TEACHER_CKPT = "teacher.ckpt"

# flag dest -> ExperimentConfig field
_OVERRIDES = ("strategy", "temperature", "alpha", "balance_coef", "seed", "data_seed", "epochs",
              "lr", "batch_size", "patience", "optimizer", "teacher_epochs", "teacher_lr",
              "log_every", "max_log_records", "data_dir", "out_dir")


def _common(p):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--data-dir", dest="data_dir",
                   help="directory written by gen-data (default: generate in memory)")
    p.add_argument("--seed", type=int)
    p.add_argument("--data-seed", dest="data_seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("-v", "--verbose", action="store_true")


def _student_flags(p, teacher_required=False):
    p.add_argument("--strategy", choices=L.STRATEGIES)
    p.add_argument("--temperature", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--balance-coef", dest="balance_coef", type=float)
    p.add_argument("--sigmas", help="learn-sigmas output; supplies the rounded balance coefficient")
    p.add_argument("--teacher", required=teacher_required, help="teacher checkpoint")
    p.add_argument("--log-every", dest="log_every", type=int)
    p.add_argument("--max-log-records", dest="max_log_records", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="crossdistill",
                                     description="Cross-modal teacher-student phoneme recognition")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the four synthetic splits as JSON lines")
    _common(p)

    p = sub.add_parser("pretrain-teacher", help="train the CTC teacher")
    _common(p)
    p.add_argument("--teacher-epochs", dest="teacher_epochs", type=int)
    p.add_argument("--teacher-lr", dest="teacher_lr", type=float)

    p = sub.add_parser("train", help="train a student under one strategy")
    _common(p)
    _student_flags(p)

    p = sub.add_parser("learn-sigmas", help="learn the uncertainty scales and balance coefficient")
    _common(p)
    _student_flags(p, teacher_required=True)

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    _common(p)
    p.add_argument("--model", required=True, help="teacher or student checkpoint")
    p.add_argument("--split", choices=SPLITS, default="test")

    p = sub.add_parser("export-curves", help="train and write only the loss/gradient curves")
    _common(p)
    _student_flags(p)
    p.add_argument("--output", help="CSV path (default: <out-dir>/<run>-curves.csv)")
    return parser


def config_from_args(args):
    overrides = {k: getattr(args, k) for k in _OVERRIDES
                 if getattr(args, k, None) is not None}
    if getattr(args, "sigmas", None):
        if "balance_coef" in overrides:
            raise ConfigError("give either --balance-coef or --sigmas, not both")
        sig = SigmaPhaseResult.from_text(Path(args.sigmas).read_text())
        overrides["balance_coef"] = sig.a_rounded
    if args.config:
        return ExperimentConfig.from_file(args.config, **overrides)
    return ExperimentConfig(**overrides)


def _out(cfg):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path, text):
    Path(path).write_text(text)
    print(f"wrote {path}")


def _write_config(path, cfg):
    _write(path, json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def cmd_gen_data(cfg, args):
    data_dir = _out(cfg) / "data"
    data_dir.mkdir(exist_ok=True)
    vocab = cfg.gen.vocab()
    splits = load_splits(cfg.replace(data_dir=None))
    for split, samples in splits.items():
        save_dataset(samples, data_dir / f"{split}.jsonl", vocab)
        print(f"wrote {data_dir / f'{split}.jsonl'} ({len(samples)} samples)")


def cmd_pretrain_teacher(cfg, args):
    out = _out(cfg)
    res = pretrain_teacher(cfg)
    res.model.save(out / TEACHER_CKPT)
    print(f"wrote {out / TEACHER_CKPT}")
    _write(out / "teacher-report.txt", res.report.to_text())
    _write_config(out / "teacher-config.json", cfg)
    sys.stdout.write(res.report.to_text())


def _run_student(cfg, args):
    return train_student(cfg, teacher=args.teacher,
                         splits=load_splits(cfg))


def cmd_train(cfg, args):
    out = _out(cfg)
    res = _run_student(cfg, args)
    name = cfg.run_name()
    res.model.save(out / f"{name}.ckpt")
    print(f"wrote {out / f'{name}.ckpt'}")
    _write(out / f"{name}-report.txt", res.report.to_text())
    if res.curves:
        export_curves(res.curves, out / f"{name}-curves.csv")
        print(f"wrote {out / f'{name}-curves.csv'}")
    _write_config(out / f"{name}-config.json", cfg)
    sys.stdout.write(res.report.to_text())


def cmd_learn_sigmas(cfg, args):
    out = _out(cfg)
    res = learn_uncertainty_weights(cfg, args.teacher)
    _write(out / f"sigmas-s{cfg.seed}.txt", res.to_text())
    print(res.summary())


def cmd_eval(cfg, args):
    out = _out(cfg)
    config, _, _ = load_model(args.model)
    cls = StudentRecognizer if hasattr(config, "stream_dims") else CTCTeacher
    model = cls.from_checkpoint(args.model)
    report = model.evaluate(load_splits(cfg)[args.split])
    _write(out / f"eval-{Path(args.model).stem}-{args.split}.txt", report.to_text())
    sys.stdout.write(report.to_text())


def cmd_export_curves(cfg, args):
    res = _run_student(cfg, args)
    path = Path(args.output) if args.output else _out(cfg) / f"{cfg.run_name()}-curves.csv"
    export_curves(res.curves, path)
    print(f"wrote {path} ({len(res.curves)} records)")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-teacher": cmd_pretrain_teacher,
    "train": cmd_train,
    "learn-sigmas": cmd_learn_sigmas,
    "eval": cmd_eval,
    "export-curves": cmd_export_curves,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        COMMANDS[args.command](cfg, args)
    except (ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
