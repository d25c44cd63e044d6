"""Command-line entry point: ``clipstop {synth,train,eval,inspect}``.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 capability error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .data import load_dataset, dataset_stats, generate_synthetic, write_dataset
from .env import RewardConfig
from .errors import ClipStopError, ConfigError
from .evaluation import (
    FIG2_COLUMNS,
    FIG3_COLUMNS,
    POLICIES,
    RL_MODES,
    evaluate,
    fig2_rows,
    fig3_rows,
    format_table,
    write_rows_csv,
    write_summary_csv,
    write_table_csv,
    write_traces_csv,
)
from .nets import MODES
from .ppo import Trainer, TrainedAgent, write_log_csv

log = logging.getLogger("clipstop")

STATE_FILE = "trainer_state.pkl"


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML run configuration; flags override its values")
    p.add_argument("--run-dir", help="output directory for this run")
    p.add_argument("--seed", type=int, help="master seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clipstop", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset file")
    _add_common(p)
    p.add_argument("--D", dest="D", type=int, help="embedding dimension (required)")
    p.add_argument("--n-studies", type=int)
    p.add_argument("--disease-fraction", type=float)
    p.add_argument("--world-seed", type=int)
    p.add_argument("--id-prefix")
    p.add_argument("--identical-clips", action="store_const", const=True, default=None)
    p.add_argument("--out", help="dataset path (default: <run-dir>/dataset.jsonl)")

    p = sub.add_parser("train", help="train an agent with PPO")
    _add_common(p)
    p.add_argument("--train", dest="train_path", help="training dataset file")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--timesteps", type=int)
    p.add_argument("--n-envs", type=int)
    p.add_argument("--rollout-length", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--lambda-cost", type=float)
    p.add_argument("--max-iterations", type=int, help="stop after this many iterations (resume later)")
    p.add_argument("--resume", action="store_true", help=f"continue from <run-dir>/{STATE_FILE}")

    p = sub.add_parser("eval", help="evaluate policies and write report files")
    _add_common(p)
    p.add_argument("--test", dest="test_path", help="evaluation dataset file")
    p.add_argument("--checkpoint", help="full-mode checkpoint (default: <run-dir>/checkpoint.bin if present)")
    p.add_argument("--checkpoint-ab1")
    p.add_argument("--checkpoint-ab2")
    p.add_argument("--policies", help=f"comma list from {','.join(POLICIES)}")
    p.add_argument("--n-seeds", type=int)
    p.add_argument("--quantile", type=float)
    p.add_argument("--greedy", action="store_const", const=True, default=None)
    p.add_argument("--export-fig2", action="store_const", const=True, default=None)
    p.add_argument("--no-figures", dest="figures", action="store_const", const=False, default=None)

    p = sub.add_parser("inspect", help="print dataset statistics")
    p.add_argument("dataset")
    return parser


def _resolve(args, inherit: bool = False) -> cfgmod.RunConfig:
    """Load ``--config``; with ``inherit``, fall back to the run directory's snapshot."""
    path = args.config
    if path is None and inherit:
        snap = Path(args.run_dir or cfgmod.RunSection().run_dir) / "config.snapshot"
        if snap.exists():
            path = snap
    cfg = cfgmod.load_config(path)
    cfgmod.update_section(cfg, "run", {"command": args.command, "run_dir": args.run_dir})
    return cfg


def _run_dir(cfg: cfgmod.RunConfig) -> Path:
    d = Path(cfg.run.run_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_synth(args) -> int:
    cfg = _resolve(args)
    cfgmod.update_section(
        cfg,
        "synth",
        {
            "D": args.D,
            "seed": args.seed,
            "n_studies": args.n_studies,
            "disease_fraction": args.disease_fraction,
            "world_seed": args.world_seed,
            "id_prefix": args.id_prefix,
            "identical_clips": args.identical_clips,
        },
    )
    if cfg.synth.D is None:
        raise ConfigError("synth: the embedding dimension D is required (--D or [synth] D)")
    run_dir = _run_dir(cfg)
    out = Path(args.out) if args.out else run_dir / "dataset.jsonl"
    manifest = generate_synthetic(cfg.synth)
    write_dataset(manifest, out)
    cfgmod.write_snapshot(cfg, run_dir / "config.snapshot")
    print(f"wrote {len(manifest.studies)} studies ({manifest.n_clips} clips) to {out}")
    return 0


def cmd_train(args) -> int:
    if args.resume:
        run_dir = Path(args.run_dir or cfgmod.load_config(args.config).run.run_dir)
        state = run_dir / STATE_FILE
        if not state.exists():
            raise ConfigError(f"--resume: no trainer state at {state}")
        trainer = Trainer.load_state(state)
        cfg = cfgmod.load_config(run_dir / "config.snapshot")
    else:
        cfg = _resolve(args)
        cfgmod.update_section(cfg, "run", {"seed": args.seed})
        cfgmod.update_section(cfg, "data", {"train": args.train_path})
        cfgmod.update_section(cfg, "train", {"mode": args.mode})
        cfgmod.update_section(
            cfg,
            "ppo",
            {
                "total_timesteps": args.timesteps,
                "n_envs": args.n_envs,
                "rollout_length": args.rollout_length,
                "lr": args.lr,
                "hidden": args.hidden,
            },
        )
        cfgmod.update_section(cfg, "reward", {"lambda_cost": args.lambda_cost})
        if not cfg.data.train:
            raise ConfigError("train: a training dataset is required (--train or [data] train)")
        if cfg.train.mode not in MODES:
            raise ConfigError(f"[train] mode must be one of {MODES}")
        try:
            cfg.ppo.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        run_dir = _run_dir(cfg)
        manifest = load_dataset(cfg.data.train)
        reward = RewardConfig(cfg.reward.lambda_cost, cfg.reward.clip_cost, manifest.class_prior)
        trainer = Trainer(manifest, cfg.ppo, cfg.run.seed, cfg.train.mode, reward)
        cfgmod.write_snapshot(cfg, run_dir / "config.snapshot")

    trainer.train(max_iterations=args.max_iterations)
    write_log_csv(trainer.log, run_dir / "train_log.csv")
    trainer.save_checkpoint(run_dir / "checkpoint.bin")
    trainer.save_state(run_dir / STATE_FILE)
    if trainer.log:
        from .plotting import render_training_log

        render_training_log(trainer.log, run_dir / "train_log.png")
    status = "complete" if trainer.done else "paused"
    print(
        f"training {status}: iteration {trainer.iteration}/{trainer.cfg.n_iterations}, "
        f"{trainer.timesteps} timesteps, mode {trainer.mode}; outputs in {run_dir}"
    )
    return 0


def cmd_eval(args) -> int:
    # keep the training sections so the run directory's snapshot stays complete
    cfg = _resolve(args, inherit=True)
    cfgmod.update_section(cfg, "run", {"seed": args.seed})
    cfgmod.update_section(cfg, "data", {"test": args.test_path})
    cfgmod.update_section(
        cfg,
        "eval",
        {
            "checkpoint": args.checkpoint,
            "checkpoint_ab1": args.checkpoint_ab1,
            "checkpoint_ab2": args.checkpoint_ab2,
            "policies": args.policies.split(",") if args.policies else None,
            "n_seeds": args.n_seeds,
            "quantile": args.quantile,
            "greedy": args.greedy,
            "export_fig2": args.export_fig2,
            "figures": args.figures,
        },
    )
    ev = cfg.eval
    if not cfg.data.test:
        raise ConfigError("eval: an evaluation dataset is required (--test or [data] test)")
    run_dir = _run_dir(cfg)
    if not ev.checkpoint and (run_dir / "checkpoint.bin").exists():
        ev.checkpoint = str(run_dir / "checkpoint.bin")

    paths = {"rl": ev.checkpoint, "ab1": ev.checkpoint_ab1, "ab2": ev.checkpoint_ab2}
    explicit = bool(ev.policies)
    policies = list(ev.policies) if explicit else [
        p for p in POLICIES if (p not in RL_MODES or paths[p]) and (p != "random_sample" or paths["rl"])
    ]
    unknown = set(policies) - set(POLICIES)
    if unknown:
        raise ConfigError(f"unknown policies {sorted(unknown)}")
    agents = {}
    for p in policies:
        if p in RL_MODES:
            if not paths[p]:
                raise ConfigError(f"policy {p} needs a checkpoint (--checkpoint{'' if p == 'rl' else '-' + p})")
            agents[p] = TrainedAgent.load(paths[p], expect_mode=RL_MODES[p])
    if "random_sample" in policies and "rl" not in agents:
        if not paths["rl"]:
            raise ConfigError("random_sample matches the full agent's clip budget; pass --checkpoint")
        agents["rl"] = TrainedAgent.load(paths["rl"], expect_mode="full")

    manifest = load_dataset(cfg.data.test)
    reports = evaluate(
        manifest,
        policies,
        agents,
        n_seeds=ev.n_seeds,
        master_seed=cfg.run.seed,
        quantile=ev.quantile,
        std_threshold=ev.std_threshold,
        weight=ev.weight,
        greedy=ev.greedy,
    )
    cfgmod.write_snapshot(cfg, run_dir / "config.snapshot")
    write_summary_csv(reports, run_dir / "eval_summary.csv")
    write_table_csv(reports, run_dir / "eval_table.csv")
    write_traces_csv(reports, run_dir / "traces.csv")
    if "rl" in reports:
        first = reports["rl"].results[0].outcomes
        f3 = fig3_rows(first)
        write_rows_csv(f3, FIG3_COLUMNS, run_dir / "fig3.csv")
        f2 = fig2_rows(first, manifest, cfg.run.seed) if (ev.export_fig2 or ev.figures) else None
        if ev.export_fig2:
            write_rows_csv(f2, FIG2_COLUMNS, run_dir / "fig2.csv")
        if ev.figures:
            from .plotting import render_fig2, render_fig3

            render_fig2(f2, run_dir / "fig2.png")
            render_fig3(f3, run_dir / "fig3.png")
    print(format_table(reports))
    return 0


def cmd_inspect(args) -> int:
    print(json.dumps(dataset_stats(load_dataset(args.dataset)), indent=2))
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ClipStopError as exc:
        print(f"clipstop {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
