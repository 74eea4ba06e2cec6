"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 data error, 4 check failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import data as dmod
from . import ib
from . import trainer as tmod
from .flops import model_flops
from .transformer import ModelSpec

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write(text: str, path: str | None):
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="") as f:
            f.write(text)


def _read_text(path: str) -> str:
    try:
        with open(path) as f:
            return f.read()
    except OSError as e:
        raise UsageError(f"cannot read {path}: {e.strerror}") from None


def _dataset(args, cfg: tmod.TrainConfig | None, split: str) -> dmod.Dataset:
    if getattr(args, "images", None) or getattr(args, "labels", None):
        if not (args.images and args.labels):
            raise UsageError("--images and --labels go together")
        return dmod.load_idx(args.images, args.labels)
    if cfg is None:
        raise UsageError("no dataset given")
    train, test = cfg.load_data()
    return train if split == "train" else test


def cmd_gen_data(args) -> int:
    if args.classes < 2:
        raise UsageError("--classes must be at least 2")
    try:
        paths = dmod.gen_data(args.out, args.image_size, args.classes, args.train_per_class,
                              args.test_per_class, args.noise, args.seed)
    except OSError as e:
        raise dmod.DataError(f"cannot write to {args.out}: {e.strerror}") from None
    for split in ("train", "test"):
        print(f"{split}: {paths[split][0]} {paths[split][1]}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = tmod.TrainConfig.from_json(_read_text(args.config))
    train_set, _ = cfg.load_data()
    resume = tmod.load_checkpoint(args.resume) if args.resume else None
    log = None if args.quiet else (
        lambda h: print(f"epoch {h['epoch']} loss {h['loss']:.6f} acc {h['train_acc']:.4f}"
                        f"{' merging' if h['merging'] else ''}", flush=True))
    res = tmod.train(cfg, train_set, resume=resume, on_epoch=log)
    tmod.save_checkpoint(res.checkpoint, args.checkpoint or cfg.checkpoint_path)
    _write(res.report.to_csv(), args.report or cfg.report_path)
    return EXIT_OK


def _evaluate(args):
    ck = tmod.load_checkpoint(args.checkpoint)
    ds = _dataset(args, ck.config, args.split)
    return ck, tmod.evaluate(ck, ds)


def cmd_eval(args) -> int:
    _, ev = _evaluate(args)
    print(json.dumps({"accuracy": ev.accuracy, "loss": ev.loss}, sort_keys=True))
    return EXIT_OK


def cmd_ib_report(args) -> int:
    _, ev = _evaluate(args)
    _write(ev.report.to_csv(), args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be positive")
    res = ib.gradcheck(args.trials, args.seed)
    status = "ok" if res.ok else "FAILED"
    print(f"gradcheck {status}: trials={res.trials} failures={res.failures} "
          f"max_rel_err={res.max_rel_err:.3e}")
    return EXIT_OK if res.ok else EXIT_CHECK


def cmd_flops(args) -> int:
    if args.spec:
        try:
            spec = ModelSpec.from_dict(json.loads(_read_text(args.spec)))
        except (json.JSONDecodeError, TypeError, ValueError) as e:
            raise UsageError(f"bad spec: {e}") from None
    else:
        spec = ModelSpec()
    rep = model_flops(spec, merge=not args.no_merge)
    _write(rep.to_csv() if args.csv else rep.to_text(), args.out)
    return EXIT_OK


def cmd_export_mask(args) -> int:
    ck = tmod.load_checkpoint(args.checkpoint)
    ds = _dataset(args, ck.config, args.split)
    try:
        samples = [int(s) for s in args.samples.split(",") if s.strip()]
        text = tmod.export_masks(ck, ds, args.block, samples)
    except ValueError as e:
        raise UsageError(str(e)) from None
    _write(text, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ltmerge", description="Token-merging toolkit: data, training, evaluation, reports.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    g = sub.add_parser("gen-data", help="write synthetic blob images as IDX files")
    g.add_argument("--out", required=True)
    g.add_argument("--image-size", type=int, default=16)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--train-per-class", type=int, default=100)
    g.add_argument("--test-per-class", type=int, default=50)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--checkpoint", help="override checkpoint_path")
    t.add_argument("--report", help="override report_path")
    t.add_argument("--resume", help="continue from a checkpoint")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "accuracy and loss of a checkpoint"),
                                 ("ib-report", cmd_ib_report, "per-layer IB statistics CSV")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--split", choices=("train", "test"), default="test")
        e.add_argument("--images")
        e.add_argument("--labels")
        if name == "ib-report":
            e.add_argument("--out")
        e.set_defaults(func=func)

    c = sub.add_parser("gradcheck", help="analytic vs finite-difference mask gradients")
    c.add_argument("--trials", type=int, default=50)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    f = sub.add_parser("flops", help="analytic FLOPs of a model spec")
    f.add_argument("--spec", help="JSON model spec (default: toy spec)")
    f.add_argument("--csv", action="store_true")
    f.add_argument("--no-merge", action="store_true")
    f.add_argument("--out")
    f.set_defaults(func=cmd_flops)

    x = sub.add_parser("export-mask", help="dump one block's merge mask as CSV")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--block", type=int, required=True)
    x.add_argument("--samples", default="0")
    x.add_argument("--split", choices=("train", "test"), default="test")
    x.add_argument("--images")
    x.add_argument("--labels")
    x.add_argument("--out")
    x.set_defaults(func=cmd_export_mask)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except tmod.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except (dmod.DataError, tmod.CheckpointError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except tmod.TrainingError as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
