"""Command-line entry point: ``usskit <subcommand> --workdir DIR [options]``.

On failure every subcommand prints one ``error: <Type>: <message>`` line on
stderr, removes files it created, and exits non-zero.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import torch

from . import gradchecks, stages
from .config import ConfigError, RunConfig

logger = logging.getLogger("usskit")

# inputs each subcommand needs before it starts, with the stage that makes them
REQUIREMENTS = {
    "synth": [],
    "pretrain-mae": [("corpus/train/manifest.jsonl", "synth")],
    "train-tagger": [("corpus/train/manifest.jsonl", "synth")],
    "mine-anchors": [(f"corpus/{s}/manifest.jsonl", "synth") for s in stages.SPLITS],
    "build-store": [("tagger.ckpt", "train-tagger"), ("anchors/store.jsonl", "mine-anchors")],
    "train": [("tagger.ckpt", "train-tagger"), ("anchors/train.jsonl", "mine-anchors")],
    "separate": [],
    "evaluate": [("tagger.ckpt", "train-tagger"), ("anchors/eval.jsonl", "mine-anchors"),
                 ("store.ckpt", "build-store")],
    "gradcheck": [],
}


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="usskit", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", type=Path, default=Path("."), help="artifact root")
    common.add_argument("--config", type=Path, help="JSON config file (flat prefixed keys)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in REQUIREMENTS:
        p = sub.add_parser(name, parents=[common])
        if name == "train":
            p.add_argument("--fusion", choices=("on", "off"),
                           help="override train.fusion for this run")
            p.add_argument("--name", default="separator", help="checkpoint stem")
        if name == "separate":
            p.add_argument("--mixture", type=Path, required=True)
            p.add_argument("--out", type=Path, required=True)
            q = p.add_mutually_exclusive_group(required=True)
            q.add_argument("--query-class", help="class name or id (average embedding)")
            q.add_argument("--query-wav", type=Path, help="reference recording (oracle-style)")
            p.add_argument("--checkpoint", default="separator.ckpt")
        if name == "evaluate":
            p.add_argument("--checkpoint", default="separator.ckpt")
            p.add_argument("--report-name", default="eval")
    return parser


def load_config(args) -> RunConfig:
    overrides = _parse_set(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "fusion", None) is not None:
        overrides["train.fusion"] = args.fusion == "on"
    config = args.config
    if config is not None and not config.is_absolute():
        config = args.workdir / config
    return RunConfig.load(config, overrides)


def preflight(args, cfg: RunConfig) -> None:
    """Reject missing inputs and inconsistent combinations before any work."""
    wd = args.workdir
    needs = list(REQUIREMENTS[args.command])
    if args.command == "train" and cfg["train.fusion"]:
        needs.append(("mae.ckpt", "pretrain-mae"))
    if args.command == "separate":
        needs.append((args.checkpoint, "train"))
        if args.query_class is not None:
            needs += [("store.ckpt", "build-store"), ("store.json", "build-store")]
        else:
            needs.append(("tagger.ckpt", "train-tagger"))
    if args.command == "evaluate":
        needs.append((args.checkpoint, "train"))
    for rel, producer in needs:
        if not (wd / rel).exists():
            raise stages.MissingInput(f"{wd / rel} not found; run '{producer}' first")
    if args.command == "separate":
        for path in (args.mixture, args.query_wav):
            if path is not None and not path.exists():
                raise FileNotFoundError(f"{path} not found")


def run(args, cfg: RunConfig) -> dict:
    wd = args.workdir
    cmd = args.command
    if cmd == "synth":
        out = stages.stage_synth(wd, cfg)
        return {split: len(m) for split, m in out.items()}
    if cmd == "pretrain-mae":
        return {"checkpoint": str(stages.stage_pretrain_mae(wd, cfg))}
    if cmd == "train-tagger":
        path, acc = stages.stage_train_tagger(wd, cfg)
        return {"checkpoint": str(path), "heldout_accuracy": acc}
    if cmd == "mine-anchors":
        return {k: str(v) for k, v in stages.stage_mine_anchors(wd, cfg).items()}
    if cmd == "build-store":
        store = stages.stage_build_store(wd, cfg)
        return {"classes": len(store.average), "oracle_entries": len(store.oracle)}
    if cmd == "train":
        trainer = stages.stage_train(wd, cfg, args.name)
        return {"checkpoint": str(wd / f"{args.name}.ckpt"), "steps": trainer.step_count,
                "final_loss": trainer.losses[-1] if trainer.losses else None}
    if cmd == "separate":
        out = stages.stage_separate(wd, cfg, args.mixture, args.out, args.query_class,
                                    args.query_wav, args.checkpoint)
        return {"output": str(out)}
    if cmd == "evaluate":
        report = stages.stage_evaluate(wd, cfg, args.checkpoint, args.report_name)
        return report.summary()
    if cmd == "gradcheck":
        reports, seconds = gradchecks.run_all(cfg["seed"])
        print(gradchecks.format_table(reports))
        if not all(r.passed for r in reports):
            raise RuntimeError("gradient check failed: "
                               + ", ".join(r.name for r in reports if not r.passed))
        return {"seconds": round(seconds, 3)}
    raise ValueError(f"unknown command {cmd!r}")


def _snapshot(root: Path) -> set[Path]:
    return set(root.rglob("*")) if root.exists() else set()


def _remove_new(root: Path, before: set[Path], extra: list[Path]) -> None:
    new = sorted(_snapshot(root) - before, key=lambda p: len(p.parts), reverse=True)
    for p in new + [e for e in extra if e not in before]:
        if p.is_dir():
            shutil.rmtree(p, ignore_errors=True)
        elif p.exists():
            p.unlink()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    torch.set_num_threads(max(1, args.threads))
    wd_existed = args.workdir.exists()
    before = _snapshot(args.workdir)
    extra = [args.out] if getattr(args, "out", None) is not None else []
    if extra and extra[0].exists():
        before.add(extra[0])
    try:
        cfg = load_config(args)
        preflight(args, cfg)
        args.workdir.mkdir(parents=True, exist_ok=True)
        (args.workdir / "run_config.json").write_text(cfg.to_json())
        result = run(args, cfg)
    except KeyboardInterrupt:
        _cleanup(args.workdir, wd_existed, before, extra)
        print("error: Interrupted: cancelled by user", file=sys.stderr)
        return 130
    except Exception as exc:  # noqa: BLE001 - converted into the one-line contract
        _cleanup(args.workdir, wd_existed, before, extra)
        message = " ".join(str(exc).split()) or repr(exc)
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        if args.verbose:
            logger.exception("traceback")
        return 1
    print(json.dumps({"command": args.command, "status": "ok", **result}, sort_keys=True,
                     default=str))
    return 0


def _cleanup(workdir: Path, existed: bool, before: set[Path], extra: list[Path]) -> None:
    if not existed:
        shutil.rmtree(workdir, ignore_errors=True)
        for e in extra:
            if e.exists() and e not in before:
                e.unlink()
    else:
        _remove_new(workdir, before, extra)


if __name__ == "__main__":
    sys.exit(main())
