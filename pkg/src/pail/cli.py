"""Command-line entry point: ``pail <command> --run-dir DIR [options] [--section.key value ...]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import pipeline
from .config import ConfigError, RunConfig
from .simulator import CriterionNotReached
from .trainer import ABLATIONS

log = logging.getLogger("pail")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _split_overrides(extra: list[str]) -> list[tuple[str, str]]:
    """``["--train.lam", "0.3", "--seed=4"]`` → ``[("train.lam", "0.3"), ("seed", "4")]``."""
    pairs, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) <= 2:
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for {tok}")
            value = extra[i + 1]
            i += 2
        pairs.append((key.replace("-", "_") if "." not in key else key, value))
    return pairs


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--run-dir", required=True, type=Path, help="directory holding every artifact of a run")
    common.add_argument("--config", type=Path, help="JSON config file (sections: plant, split, simulator, "
                                                    "value, train, eval, bc; plus top-level seed)")
    common.add_argument("--data-dir", type=Path, help="dataset directory (default: <run-dir>/data)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pail", description="Offline trajectory improvement by adversarial "
                                "imitation with learned credit assignment.",
                                epilog="Any config field can be overridden with --<section>.<key> VALUE.")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name: str, text: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, parents=[common], help=text, allow_abbrev=False)

    g = command("gen-data", "simulate the synthetic plant and write the dataset")
    g.add_argument("--n-traj", type=int, help="number of trajectories (plant.n_traj)")
    g.add_argument("--workers", type=int, default=1, help="parallel processes for trajectory generation")

    pt = command("pretrain", "train and freeze the simulator or the value net")
    pt.add_argument("which", choices=["sim", "value"])
    pt.add_argument("--force", action="store_true", help="overwrite an existing checkpoint")

    t = command("train", "adversarial policy training")
    t.add_argument("--ablation", choices=sorted(ABLATIONS))
    t.add_argument("--epochs", type=int, help="train until this many epochs in total")
    t.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    t.add_argument("--out", help="training directory name inside the run (default train[-<ablation>])")

    e = command("evaluate", "evaluate a policy and append the report")
    e.add_argument("--policy", default="train", help="training directory name, 'bc' or 'untrained'")
    e.add_argument("--heatmap", metavar="TRAJ_ID", help="also write the importance heatmap for this test id")

    h = command("heatmap", "time-step importance heatmap for one test trajectory")
    h.add_argument("traj_id")
    h.add_argument("--policy", default="train")
    h.add_argument("--out", type=Path, help="output TSV (default <run-dir>/heatmaps/<policy>-<id>.tsv)")
    return p


def resolve_config(args, overrides: list[tuple[str, str]]) -> RunConfig:
    """Stored run config, then the --config file, then --key overrides, then PAIL_SEED."""
    stored = args.run_dir / "config.json"
    cfg = RunConfig.load(stored) if stored.exists() else RunConfig()
    if args.config is not None:
        if not args.config.exists():
            raise ConfigError(f"config file not found: {args.config}")
        cfg.update(json.loads(args.config.read_text(encoding="utf-8")))
    if getattr(args, "n_traj", None) is not None:
        cfg.set("plant.n_traj", args.n_traj)
    cfg.apply_overrides(overrides)
    cfg.apply_env()
    cfg.validate()
    return cfg


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True), flush=True)


def _heatmap_path(args, policy: str, traj_id: str) -> Path:
    return args.run_dir / "heatmaps" / f"{policy}-{traj_id}.tsv"


def run(args, cfg: RunConfig) -> int:
    run_dir: Path = args.run_dir
    data_dir: Path = args.data_dir or run_dir / "data"
    data = None if args.command == "gen-data" else pipeline.load_data(data_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.json")

    if args.command == "gen-data":
        summary = pipeline.generate(cfg, data_dir, workers=args.workers)
        _emit({"command": "gen-data", **summary})
        return EXIT_OK

    if args.command == "pretrain":
        target = run_dir / ("sim.ckpt" if args.which == "sim" else "value.ckpt")
        if target.exists() and not args.force:
            print(f"error: {target} exists and is frozen; pass --force to retrain", file=sys.stderr)
            return EXIT_FAILURE
        if args.which == "sim":
            res = pipeline.pretrain_simulator(cfg, data, target)
        else:
            res = pipeline.pretrain_value(cfg, data, target)
        _emit({"command": f"pretrain-{args.which}", **res})
        return EXIT_OK

    if args.command == "train":
        out = run_dir / (args.out or pipeline.train_dir_name(args.ablation))
        trainer = pipeline.train(cfg, run_dir, data, ablation=args.ablation, epochs=args.epochs,
                                 resume=args.resume, out_dir=out)
        _emit({"command": "train", "out": str(out), "epoch": trainer.epoch})
        return EXIT_OK

    if args.command == "evaluate":
        record = pipeline.evaluate(cfg, run_dir, data, args.policy)
        if args.heatmap:
            path = _heatmap_path(args, args.policy, args.heatmap)
            pipeline.heatmap(cfg, run_dir, data_dir, data, args.policy, args.heatmap, path)
            record["heatmap"] = str(path)
        pipeline.append_result(run_dir, record)
        _emit(record)
        return EXIT_OK

    if args.command == "heatmap":
        path = args.out or _heatmap_path(args, args.policy, args.traj_id)
        pipeline.heatmap(cfg, run_dir, data_dir, data, args.policy, args.traj_id, path)
        _emit({"command": "heatmap", "out": str(path)})
        return EXIT_OK
    raise UsageError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = resolve_config(args, _split_overrides(extra))
    except (UsageError, ConfigError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return run(args, cfg)
    except pipeline.MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CriterionNotReached as exc:
        print(f"error: simulator did not reach its criterion ({exc})", file=sys.stderr)
        return EXIT_FAILURE
    except KeyboardInterrupt:
        print("interrupted; the last completed epoch is checkpointed", file=sys.stderr)
        return EXIT_FAILURE
    except (RuntimeError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
