"""Command-line entry point: ``herbs {train,eval,visualize,gradcheck,sweep}``.

Every verb writes ``config.resolved.txt`` into ``--out`` and refuses to
reuse a non-empty output directory unless ``--overwrite`` is given. Failures
exit nonzero with one ``E_<CODE>: message`` line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Sequence

import torch

from .errors import ConfigError, HerbsError

RESOLVED = "config.resolved.txt"
SWEEP_GRIDS = {
    "lambda_d": [float(v) for v in range(10)],
    "temperature": [0.5 * 2**i for i in range(10)],
}
SWEEP_ALIASES = {"lambda_d": "lambda_d", "λ_d": "lambda_d", "temperature": "temperature", "T": "temperature"}


class CliError(HerbsError):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("--overwrite", action="store_true", help="replace an existing output directory")

    p = argparse.ArgumentParser(prog="herbs", description="Background-suppression / refinement FGVC toolkit")
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("train", parents=[common], help="train a model, write checkpoint and logs")
    for verb, text in (("eval", "write a prediction dump and reports"), ("visualize", "write heat-map PNGs")):
        sp = sub.add_parser(verb, parents=[common], help=text)
        sp.add_argument("--checkpoint", help="checkpoint written by 'train'")
        if verb == "eval":
            sp.add_argument("--min-categories", type=int, default=6,
                            help="list generic classes with more fine classes than this")
        else:
            sp.add_argument("--source", choices=("max_score", "target_class"), default="max_score")
            sp.add_argument("--limit", type=int, default=8, help="number of test images")
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check on a tiny net")
    g.add_argument("--num-params", type=int, default=24)
    g.add_argument("--tolerance", type=float, default=1e-4)
    s = sub.add_parser("sweep", parents=[common], help="train+eval over a grid of one parameter")
    s.add_argument("--param", required=True, help="lambda_d or temperature")
    s.add_argument("--values", help="'0..9' or a comma list; defaults to the standard grid")
    return p


def parse_values(text: str | None, param: str) -> list[float]:
    if not text:
        return list(SWEEP_GRIDS[param])
    try:
        if ".." in text:
            lo, hi = (int(v) for v in text.split("..", 1))
            if hi < lo:
                raise ValueError(text)
            return [float(v) for v in range(lo, hi + 1)]
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse sweep values {text!r}") from None


def resolve_config(args):
    from .training import TrainConfig

    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise CliError("E_NO_CONFIG", f"config file {path} not found")
        cfg = TrainConfig.from_file(path)
    else:
        cfg = TrainConfig()
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return cfg.with_overrides(overrides)


def prepare_out(path: str | Path, overwrite: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise CliError("E_EXISTS", f"{out} is not empty; pass --overwrite to replace it")
        if not (out / RESOLVED).is_file():
            raise CliError("E_EXISTS", f"{out} was not written by this tool; refusing to delete it")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, cfg) -> None:
    (out / RESOLVED).write_text(cfg.to_text())


def _checkpoint_path(args, cfg) -> Path:
    path = args.checkpoint or cfg.checkpoint
    if not path:
        raise CliError("E_NO_CKPT", "no checkpoint given (use --checkpoint or set checkpoint=...)")
    if not Path(path).is_file():
        raise CliError("E_NO_CKPT", f"checkpoint {path} not found")
    return Path(path)


# verbs --------------------------------------------------------------------


def cmd_train(args, cfg, out: Path) -> dict:
    from .training import build_model, load_datasets, train

    torch.manual_seed(cfg.seed)
    train_set, _, _ = load_datasets(cfg)
    net = build_model(cfg, train_set.num_classes)
    result = train(net, train_set, cfg, log_path=out / "train_log.jsonl",
                   checkpoint_path=out / "checkpoint.pt", num_classes=train_set.num_classes)
    last = result.history[-1] if result.history else {}
    print(f"trained {result.epoch} epochs, {result.step} steps, final train acc {last.get('train_acc', float('nan')):.2f}")
    return {"checkpoint": str(out / "checkpoint.pt")}


def _load_for_eval(args, cfg):
    from .training import load_checkpoint

    net, ckpt_cfg, _ = load_checkpoint(_checkpoint_path(args, cfg))
    # data and evaluation keys may be overridden; the model comes from the checkpoint
    return net, ckpt_cfg.with_overrides(args.overrides + ([f"seed={args.seed}"] if args.seed is not None else []))


def evaluate_model(net, cfg, out: Path, min_categories: int = 6) -> dict:
    from .evaluation import evaluate_dump, format_report, generic_class_report, predict_dump, write_dump
    from .training import epoch_batches, load_datasets

    _, test_set, fine_to_generic = load_datasets(cfg)
    dump = predict_dump(net, epoch_batches(test_set, cfg, 0, "test"), test_set.ids)
    write_dump(dump, out / "predictions.jsonl")
    summary = evaluate_dump(dump, fine_to_generic, min_categories)
    rows, avg = generic_class_report(dump, fine_to_generic, min_categories)
    header = {k: v for k, v in summary.items() if isinstance(v, float)}
    (out / "report.txt").write_text(format_report(rows, avg, header))
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def cmd_eval(args, cfg, out: Path) -> dict:
    net, cfg = _load_for_eval(args, cfg)
    _write_resolved(out, cfg)
    summary = evaluate_model(net, cfg, out, args.min_categories)
    print((out / "report.txt").read_text(), end="")
    return summary


def cmd_visualize(args, cfg, out: Path) -> dict:
    from .heatmap import render_heatmap, save_heatmap_pngs
    from .training import EpochView, load_datasets

    net, cfg = _load_for_eval(args, cfg)
    _write_resolved(out, cfg)
    _, test_set, _ = load_datasets(cfg)
    view = EpochView(test_set, cfg, 0, "test")
    mean, std = (torch.tensor(v, dtype=cfg.torch_dtype).view(3, 1, 1) for v in cfg.norm_stats)
    written = []
    for i in range(min(args.limit, len(test_set))):
        pixels, _ = view[i]
        pixels = pixels.to(cfg.torch_dtype)
        heat = render_heatmap(net, pixels, args.source)
        written += save_heatmap_pngs(heat, (pixels * std + mean).clamp(0, 1), out, test_set.ids[i])
    print(f"wrote {len(written)} images to {out}")
    return {"images": [str(p) for p in written]}


def cmd_gradcheck(args, cfg, out: Path) -> dict:
    from .gradcheck import run_tiny_gradcheck

    report = run_tiny_gradcheck(num_params=args.num_params, seed=cfg.seed)
    text = report.format()
    (out / "gradcheck.txt").write_text(text + "\n")
    (out / "gradcheck.json").write_text(json.dumps(
        {"max_rel_error": report.max_rel_error, "per_module": report.per_module()}, indent=2) + "\n")
    print(text)
    if not report.max_rel_error < args.tolerance:
        raise CliError("E_GRADCHECK", f"max relative error {report.max_rel_error:.3e} >= {args.tolerance:g}")
    return {"max_rel_error": report.max_rel_error}


def cmd_sweep(args, cfg, out: Path) -> dict:
    from .training import build_model, load_datasets, train

    param = SWEEP_ALIASES.get(args.param)
    if param is None:
        raise ConfigError(f"cannot sweep {args.param!r}; choose from {sorted(SWEEP_ALIASES)}")
    values = parse_values(args.values, param)
    rows = []
    for v in values:
        point = cfg.with_overrides([f"{param}={v!r}"])
        run_dir = out / f"{param}_{v:g}"
        run_dir.mkdir()
        _write_resolved(run_dir, point)
        train_set, _, _ = load_datasets(point)
        net = build_model(point, train_set.num_classes)
        train(net, train_set, point, log_path=run_dir / "train_log.jsonl", num_classes=train_set.num_classes)
        summary = evaluate_model(net, point, run_dir)
        rows.append((v, summary["top1"]))
        print(f"{param}={v:g} top1={summary['top1']:.2f}", flush=True)
    rows.sort()
    table = [f"{param}\ttop1"] + [f"{v:g}\t{acc:.2f}" for v, acc in rows]
    (out / "sweep.tsv").write_text("\n".join(table) + "\n")
    _plot_sweep(rows, param, out / "sweep.png")
    return {"rows": rows}


def _plot_sweep(rows, param: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    xs, ys = zip(*rows)
    ax.plot(xs, ys, marker="o")
    if param == "temperature":
        ax.set_xscale("log", base=2)
    ax.set_xlabel(param)
    ax.set_ylabel("top-1 accuracy (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "visualize": cmd_visualize,
            "gradcheck": cmd_gradcheck, "sweep": cmd_sweep}


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    args = _parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = prepare_out(args.out, args.overwrite)
        _write_resolved(out, cfg)
        print(cfg.to_text(), end="")
        COMMANDS[args.verb](args, cfg, out)
    except HerbsError as e:
        print(f"{e.code}: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - every failure must map to one parsable line
        print(f"E_INTERNAL: {type(e).__name__}: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
