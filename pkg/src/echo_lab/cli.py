"""Command-line entry point.

    echo-lab [run] --mode echo --steps 300 --seed 1 --out runs/echo-1
    echo-lab ablate --seeds 5 --steps 300 --out runs/ablation

``run`` writes ``manifest.txt``, ``world.txt``, ``metrics.jsonl``,
``scatter.tsv``, ``drift.jsonl``, ``summary.json`` and the final parameter
dumps under ``--out`` (default: ``$ECHO_LAB_OUT/<mode>-seed<seed>``).
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import sys
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from echo_lab import harness
from echo_lab.grpo import GrpoConfig
from echo_lab.models import dumps_params
from echo_lab.shaping import ShapingParams
from echo_lab.toyworld import WorldSpec, load_world, make_world, save_world
from echo_lab.trainer import (
    DEFAULT_LR_SCALE,
    MODES,
    PAPER_LR,
    StepResult,
    TrainConfig,
    evaluate,
    train_run,
)

DEFAULT_OUT_ROOT = "echo_lab_runs"
EVAL_EPISODES = 4096


def _mode(text: str) -> str:
    mode = text.replace("-", "_")
    if mode not in MODES:
        raise argparse.ArgumentTypeError(
            f"invalid mode {text!r} (choose from {', '.join(m.replace('_', '-') for m in MODES)})"
        )
    return mode


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", type=_mode, default="echo",
                   help="echo | frozen-critic | linear-reward | grpo-only")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--batch", type=int, default=8, help="queries per step")
    p.add_argument("--group-size", type=int, default=8, help="critiques/refinements per query (N)")
    p.add_argument("--eta", type=float, default=0.1, help="barrier smoothing")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0, help="weight on negative gains")
    p.add_argument("--clip-eps", type=float, default=0.2)
    p.add_argument("--kl-beta", type=float, default=0.01)
    p.add_argument("--lr", type=float, default=PAPER_LR, help="base learning rate (both tracks)")
    p.add_argument("--lr-scale", type=float, default=DEFAULT_LR_SCALE,
                   help="multiplier applied to --lr for the toy models")
    p.add_argument("--inner-epochs", type=int, default=2)
    p.add_argument("--vocab", type=int, default=4)
    p.add_argument("--length", type=int, default=6)
    p.add_argument("--queries", type=int, default=8)
    p.add_argument("--critic-init", type=float, default=0.0, help="initial flag logit")
    p.add_argument("--window", type=int, default=10, help="steps per export window")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--world", type=Path, default=None, help="reuse a saved world file")
    p.add_argument("--dump-rollouts", action="store_true", help="also write rollouts.jsonl")


def build_config(args: argparse.Namespace, seed: Optional[int] = None, mode: Optional[str] = None) -> TrainConfig:
    return TrainConfig(
        mode=mode or args.mode,
        steps=args.steps,
        batch_queries=args.batch,
        group_size=args.group_size,
        shaping=ShapingParams(eta=args.eta, lam=args.lam),
        grpo=GrpoConfig(
            clip_eps=args.clip_eps,
            kl_beta=args.kl_beta,
            learning_rate=args.lr * args.lr_scale,
            inner_epochs=args.inner_epochs,
        ),
        seed=args.seed if seed is None else seed,
        vocab_size=args.vocab,
        seq_len=args.length,
        num_queries=args.queries,
        critic_init_logit=args.critic_init,
        workers=args.workers,
    )


@dataclass
class RunSummary:
    final_eval: float
    scatter: harness.ScatterWindow
    drift: dict
    steps: int


def execute_run(
    cfg: TrainConfig,
    out: Path,
    world: Optional[WorldSpec] = None,
    window: int = 10,
    dump_rollouts: bool = False,
    world_source: Optional[Path] = None,
) -> RunSummary:
    """Train, streaming metrics, then write scatter/drift exports and a summary."""
    out.mkdir(parents=True, exist_ok=True)
    if world is None:
        world = make_world(cfg.vocab_size, cfg.seq_len, cfg.num_queries, cfg.seed)
    world_path = out / "world.txt"
    save_world(world, world_path)

    manifest = {"artifact_version": harness.__version__}
    manifest.update({f"config.{k}": v for k, v in cfg.flat().items()})
    manifest["world_file"] = world_path.name
    manifest["world_source"] = str(world_source) if world_source else "generated"
    manifest["window"] = window
    manifest["start_time"] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    outputs = ["metrics.jsonl", "scatter.tsv", "drift.jsonl", "summary.json",
               "policy.params", "critic.params"]
    if dump_rollouts:
        outputs.append("rollouts.jsonl")
    manifest["outputs"] = " ".join(outputs)
    harness.write_manifest(out / "manifest.txt", manifest)

    scatter_buf: deque = deque(maxlen=window)
    wanted = set()
    for lo, hi in harness.phase_windows(cfg.steps, window).values():
        wanted.update(range(lo, hi))
    proposals: dict[int, list] = {}
    last: dict = {}

    rollout_fh = open(out / "rollouts.jsonl", "w", encoding="utf-8") if dump_rollouts else None
    try:
        with open(out / "metrics.jsonl", "w", encoding="utf-8") as sink:

            def on_step(r: StepResult) -> None:
                step = r.record.step
                harness.emit_metrics(r.record, sink)
                if cfg.mode != "grpo_only":
                    scatter_buf.append((step, r.groups))
                    if rollout_fh is not None:
                        from echo_lab.rollout import dump_rollouts as _dump
                        _dump(r.groups, rollout_fh, step)
                if step in wanted:
                    proposals[step] = harness.failed_proposals(r.groups)
                last["state"] = r.state

            train_run(cfg, world=world, callback=on_step)
    finally:
        if rollout_fh is not None:
            rollout_fh.close()

    if scatter_buf:
        win = harness.export_scatter(list(scatter_buf), out / "scatter.tsv")
    else:
        lo = max(0, cfg.steps - window)
        win = harness.ScatterWindow(lo, max(lo, cfg.steps - 1))
        with open(out / "scatter.tsv", "w", encoding="utf-8") as fh:
            harness.write_scatter(win, fh)

    hists, divs = harness.drift_report(world, proposals, cfg.steps, window)
    with open(out / "drift.jsonl", "w", encoding="utf-8") as fh:
        harness.write_drift(hists, divs, fh)

    if "state" in last:
        theta, psi = last["state"].theta, last["state"].psi
    else:
        from echo_lab.trainer import init_state
        st = init_state(world, cfg)
        theta, psi = st.theta, st.psi
    (out / "policy.params").write_text(dumps_params(theta, cfg.seed, cfg.steps), encoding="utf-8")
    (out / "critic.params").write_text(dumps_params(psi, cfg.seed, cfg.steps), encoding="utf-8")

    eval_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4]))
    final_eval = evaluate(world, theta, EVAL_EPISODES, eval_rng)
    summary = {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "steps": cfg.steps,
        "final_eval": float(harness.format_number(final_eval)),
        "scatter_rows": len(win.rows),
        "scatter_improvement_mass": _num(win.improvement_mass()),
        "scatter_high_improvement_mass": _num(win.improvement_mass(0.8)),
        "drift": {f"{a}|{b}": d for (a, b), d in divs.items()},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return RunSummary(final_eval, win, divs, cfg.steps)


def _num(x: float):
    return None if x != x else float(harness.format_number(x))


def cmd_run(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    world = load_world(args.world) if args.world else None
    if world is not None:
        cfg = replace(cfg, vocab_size=world.vocab_size, seq_len=world.seq_len,
                      num_queries=world.num_queries)
    out = args.out or Path(os.environ.get("ECHO_LAB_OUT", DEFAULT_OUT_ROOT)) / f"{cfg.mode}-seed{cfg.seed}"
    s = execute_run(cfg, Path(out), world, args.window, args.dump_rollouts, args.world)
    print(f"{cfg.mode} seed={cfg.seed} steps={cfg.steps} final_eval={s.final_eval:.4f} out={out}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    root = args.out or Path(os.environ.get("ECHO_LAB_OUT", DEFAULT_OUT_ROOT)) / "ablation"
    modes = [_mode(m) for m in args.modes.split(",")]
    rows = []
    for mode in modes:
        for seed in range(args.seed, args.seed + args.seeds):
            cfg = build_config(args, seed=seed, mode=mode)
            s = execute_run(cfg, Path(root) / f"{mode}-seed{seed}", None, args.window)
            early_late = s.drift.get(("early", "late"))
            early_adj = s.drift.get(("early", "early_next"))
            rows.append((mode, seed, s.final_eval, s.scatter.improvement_mass(0.8),
                         early_late, early_adj))
    with open(Path(root) / "ablation.tsv", "w", encoding="utf-8") as fh:
        fh.write("mode\tseed\tfinal_eval\thigh_improvement_mass\tjsd_early_late\tjsd_early_adjacent\n")
        for r in rows:
            fh.write("\t".join(str(r[0]) if i == 0 else harness.format_number(v) if v is not None else "null"
                               for i, v in enumerate(r)) + "\n")
    for mode in modes:
        vals = [r[2] for r in rows if r[0] == mode]
        print(f"{mode:14s} median final_eval {np.median(vals):.4f}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="echo-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train one configuration and write its exports")
    _add_train_flags(p_run)
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--out", type=Path, default=None)
    p_run.set_defaults(func=cmd_run)

    p_abl = sub.add_parser("ablate", help="run several modes over consecutive seeds")
    _add_train_flags(p_abl)
    p_abl.add_argument("--seed", type=int, default=0, help="first seed")
    p_abl.add_argument("--seeds", type=int, default=5)
    p_abl.add_argument("--modes", default="echo,frozen-critic,linear-reward,grpo-only")
    p_abl.add_argument("--out", type=Path, default=None)
    p_abl.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in ("run", "ablate", "-h", "--help"):
        argv.insert(0, "run")
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"echo-lab: config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"echo-lab: I/O error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # TrainingError and friends
        print(f"echo-lab: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
