"""``wavetune`` command-line entry point.

Exit codes: 0 success, 1 failed check or run, 2 usage or configuration error.
Relative output paths are placed under ``$WAVETUNE_OUTPUT_ROOT`` when set.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from wavetune import config as config_mod
from wavetune.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from wavetune.objectives import ALGOS, canonical_algo

OUTPUT_ROOT_ENV = "WAVETUNE_OUTPUT_ROOT"
log = logging.getLogger("wavetune")


class UsageError(Exception):
    pass


def output_path(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) / p if root and not p.is_absolute() else p


def _effective_config(args, extra: list[str] = ()) -> dict:
    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    try:
        cfg = config_mod.load(args.config)
        overrides = list(extra) + list(args.set or [])
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg, provenance = config_mod.apply_overrides(cfg, overrides)
    except config_mod.ConfigError as err:
        raise UsageError(str(err)) from None
    for line in provenance:
        print(f"# {line}")
    print("# effective config")
    print(config_mod.dumps(cfg), end="")
    return cfg


def _expected_meta(cfg: dict) -> dict:
    return {"fine_steps": cfg["fine.steps"], "coarse_steps": cfg["coarse.steps"]}


def _load(path: str, cfg: dict):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    model = load_checkpoint(path, _expected_meta(cfg))
    for w in model.checkpoint_meta["warnings"]:
        print(f"warning: {path}: {w}", file=sys.stderr)
    return model


def cmd_defaults(args) -> int:
    print(config_mod.dumps(config_mod.DEFAULTS), end="")
    return 0


def cmd_pretrain(args) -> int:
    from wavetune.trainer import Setup, pretrain_from_config, rows_to_csv, schedule_meta

    cfg = _effective_config(args)
    setup = Setup.from_config(cfg)
    history: list = []
    model = pretrain_from_config(cfg, setup, history)
    out = output_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out, {"seed": cfg["seed"], "episode": 0, "pretrain_steps": cfg["pretrain.steps"],
                                 **schedule_meta(setup)})
    metrics = out.with_name(out.stem + ".pretrain.csv")
    metrics.write_text(rows_to_csv([{"step": s, "loss": loss} for s, loss in history], ["step", "loss"]))
    print(f"wrote {out} and {metrics}")
    return 0


def cmd_finetune(args) -> int:
    from wavetune.trainer import Setup, TrainConfig, finetune

    try:
        algo = canonical_algo(args.algo)
    except ValueError:
        raise UsageError(f"unknown algo {args.algo!r}; valid: {', '.join(a.lower() for a in ALGOS)}") from None
    cfg = _effective_config(args, [f"algo={algo.lower()}"])
    setup = Setup.from_config(cfg)
    pretrained = _load(args.pretrained, cfg)
    run = finetune(pretrained, setup, TrainConfig.from_config(cfg), config_mod.dumps(cfg))
    out = run.write(output_path(args.out))
    for w in run.warnings:
        print(f"warning: {w}", file=sys.stderr)
    last = run.metrics[-20:]
    if last:
        mean = sum(r["mean_reward"] for r in last) / len(last)
        print(f"{algo}: {len(run.metrics)} episodes, mean proxy_mos over last {len(last)} = {mean:.4f}")
    print(f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    from wavetune.plotting import plot_report
    from wavetune.trainer import Setup, evaluate_checkpoints

    cfg = _effective_config(args)
    setup = Setup.from_config(cfg)
    if not setup.corpus.split(args.split):
        raise UsageError(f"split {args.split!r} is empty")
    models = {}
    if args.baseline:
        models["baseline"] = _load(args.baseline, cfg)
    models[args.name] = _load(args.checkpoint, cfg)
    report = evaluate_checkpoints(models, setup, args.split, cfg["eval.samples_per_condition"], cfg["seed"])
    out = output_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    text = report.to_csv()
    out.write_text(text)
    plot_report(report.rows, out.with_suffix(".png"))
    print(text, end="")
    print(f"wrote {out} and {out.with_suffix('.png')}")
    return 0


def cmd_verify(args) -> int:
    from wavetune.verify import SUITES, run_suite

    suites = SUITES if args.suite == "all" else (args.suite,)
    fault = args.inject_fault or os.environ.get("WAVETUNE_INJECT_FAULT") == "1"
    log_path = output_path(args.log) if args.log else None
    ok = True
    for name in suites:
        results, seconds = run_suite(name, fault, log_path)
        for r in results:
            print(r.line())
        passed = all(r.passed for r in results)
        ok &= passed
        print(f"suite {name}: {'PASS' if passed else 'FAIL'} ({len(results)} checks, {seconds:.1f}s)")
    return 0 if ok else 1


def cmd_plotdata(args) -> int:
    from wavetune.plotting import plot_curves, tidy_csv, tidy_rows

    src = Path(args.run_dir)
    try:
        rows = tidy_rows(src)
    except (FileNotFoundError, ValueError) as err:
        raise UsageError(str(err)) from None
    out = output_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(tidy_csv(rows))
    plot_curves(rows, out.with_suffix(".png"))
    print(f"wrote {out} ({len(rows)} rows) and {out.with_suffix('.png')}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wavetune", description="Diffusion RL fine-tuning lab on a toy waveform task.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="flat key = value config file (defaults when omitted)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        return sp

    sub.add_parser("defaults", help="print every config key with its default").set_defaults(func=cmd_defaults)
    sp = with_config(sub.add_parser("pretrain", help="pretrain the reference denoiser"))
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.set_defaults(func=cmd_pretrain)
    sp = with_config(sub.add_parser("finetune", help="RL fine-tuning run"))
    sp.add_argument("--algo", required=True, help=f"one of {', '.join(a.lower() for a in ALGOS)}")
    sp.add_argument("--pretrained", required=True, help="pretrained checkpoint")
    sp.add_argument("--out", required=True, help="run directory")
    sp.set_defaults(func=cmd_finetune)
    sp = with_config(sub.add_parser("eval", help="score a checkpoint on a corpus split"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--baseline", help="optional second checkpoint reported as 'baseline'")
    sp.add_argument("--name", default="model", help="row label for --checkpoint")
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.add_argument("--out", required=True, help="report CSV; a PNG is written alongside")
    sp.set_defaults(func=cmd_eval)
    sp = sub.add_parser("verify", help="run an invariant suite")
    sp.add_argument("--suite", required=True, choices=("grad", "bias", "reduction", "schedule", "all"))
    sp.add_argument("--log", help="append bias reports to this file")
    sp.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_verify)
    sp = sub.add_parser("plotdata", help="tidy CSV and PNG of training curves")
    sp.add_argument("run_dir", help="run directory, directory of runs, or a tidy CSV")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plotdata)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except CheckpointError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # any module failure surfaces as a clean non-zero exit
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
