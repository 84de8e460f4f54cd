"""``ctxseg`` command line: gen-data, train, eval, ablate, infer, plot."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, load_config
from .synth import generate_dataset, load_split

log = logging.getLogger("ctxseg")


class CLIError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


def _u64(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed out of range: {v}")
    return v


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _splits(cfg: TrainConfig, args):
    root = Path(args.data) if args.data else Path(cfg.data.root)
    return load_split(root / cfg.data.train), load_split(root / cfg.data.val)


def cmd_gen_data(args) -> None:
    cfg = _config(args)
    out = _out(args)
    generate_dataset(cfg.scene, cfg.data.train_count, cfg.seed, out / cfg.data.train)
    generate_dataset(cfg.scene, cfg.data.val_count, cfg.seed + 1, out / cfg.data.val)
    print(f"wrote {cfg.data.train_count} train and {cfg.data.val_count} val scenes to {out}")


def cmd_train(args) -> None:
    from .train import train

    cfg = _config(args)
    tr, va = _splits(cfg, args)
    out = _out(args)
    res = train(cfg, tr, va, progress=lambda r: log.info("epoch %d loss %.4f", r["epoch"], r["loss"]))
    save_checkpoint(out / "checkpoint.cseg", res.checkpoint)
    (out / "metrics.csv").write_text(res.metrics_csv())
    (out / "config.json").write_text(cfg.to_json())
    print(f"wrote {out / 'checkpoint.cseg'}")


def cmd_eval(args) -> None:
    from .train import evaluate, model_from_checkpoint

    ck = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ck)
    if args.split:
        split = load_split(args.split)
    else:
        cfg = _config(args) if args.config else model.cfg
        split = _splits(cfg, args)[1]
    rep = evaluate(model, split, oracle=args.oracle)
    out = _out(args)
    (out / "report.json").write_text(rep.to_json())
    (out / "report.csv").write_text(rep.to_csv())
    print(f"mIoU {100 * rep.miou:.2f}  mAP {100 * rep.map:.2f}")


def cmd_ablate(args) -> None:
    from .train import ablate, ablation_csv, ablation_table

    cfg = _config(args)
    tr, va = _splits(cfg, args)
    out = _out(args)
    rows, reports = ablate(cfg, tr, va, progress=lambda r: log.info("%s mIoU %.4f", r.variant, r.miou))
    (out / "ablation.csv").write_text(ablation_csv(rows))
    table = ablation_table(rows)
    (out / "ablation.txt").write_text(table)
    (out / "reports.json").write_text(json.dumps({k: v.to_dict() for k, v in reports.items()},
                                                 indent=2, sort_keys=True) + "\n")
    print(table, end="")


def cmd_infer(args) -> None:
    from .infer import infer

    ck = load_checkpoint(args.checkpoint)
    infer(ck, args.image, _out(args), dump_graph=args.graph, dump_attention=args.attention)
    print(f"wrote outputs for {args.image} to {args.out}")


def cmd_plot(args) -> None:
    from .plotting import plot

    out = _out(args)
    plot(args.metrics, out / "metrics.svg")
    print(f"wrote {out / 'metrics.svg'}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ctxseg", description="Context-aware segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=_u64, help="overrides the config seed")
        sp.add_argument("--out", required=True, help="output directory")
        sp.set_defaults(fn=fn)
        return sp

    add("gen-data", cmd_gen_data, "generate the synthetic train/val splits")
    for name, fn, help_ in (("train", cmd_train, "train one variant"),
                            ("ablate", cmd_ablate, "train and evaluate all four variants")):
        sp = add(name, fn, help_)
        sp.add_argument("--data", help="dataset root (overrides data.root)")
    sp = add("eval", cmd_eval, "evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", help="split directory (default: the configured val split)")
    sp.add_argument("--data", help="dataset root (overrides data.root)")
    sp.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    sp = add("infer", cmd_infer, "segment one image")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--graph", action="store_true", help="also dump the scene graph as JSON")
    sp.add_argument("--attention", action="store_true", help="also dump cross-attention weights as CSV")
    sp = add("plot", cmd_plot, "render metrics.csv as SVG")
    sp.add_argument("--metrics", required=True)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.fn(args)
    except (ValueError, KeyError, OSError, RuntimeError) as e:
        msg = str(e.args[0]) if isinstance(e, KeyError) and e.args else str(e)
        print(f"error: {type(e).__name__}: {' '.join(msg.split())}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
