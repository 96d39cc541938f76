"""Command-line entry point: train, eval, gradcheck, attn-analyze, param-count.

Runs are reproducible: the episode batch of every outer step, the noise
stream and the evaluation episodes are pure functions of (config, seed),
and checkpoints carry the optimizer moments, so an interrupted run resumed
from its checkpoint continues on the same trajectory. Wall-clock fields
are logged as 0.0 unless --timing is passed, keeping metrics files
byte-identical across reruns (measured timings always live in the
in-memory records).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from mmtl.analysis import (
    attention_optimality_experiment,
    benchmark_adaptation_speed,
    gradcheck_suite,
    param_count_report,
    write_weight_columns,
)
from mmtl.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from mmtl.config import ConfigError, RunConfig, load_run_config
from mmtl.data import MetricsRecord
from mmtl.engine import MetaTrainer, sample_step_episodes, sample_task_episode
from mmtl.tensor import set_default_dtype

_STEP_RNG_DOMAIN = 7000


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(_STEP_RNG_DOMAIN, step)))


class MetricsLogger:
    """Append-only JSON-lines metrics file, flushed per record."""

    def __init__(self, path: str | Path, run_id: str, variant: str,
                 timing: bool = False, mode: str = "w"):
        self.fh = open(path, mode, encoding="utf-8")
        self.run_id = run_id
        self.variant = variant
        self.timing = timing

    def _emit(self, obj: dict) -> None:
        self.fh.write(json.dumps(obj) + "\n")
        self.fh.flush()

    @staticmethod
    def _num(x):
        if x is None:
            return None
        x = float(x)
        return x if np.isfinite(x) else None

    def log_record(self, iteration: int, rec: MetricsRecord,
                   kl: float | None = None) -> None:
        if not np.isfinite(rec.loss):
            self.log_error(iteration, rec.task_id, "non-finite loss")
            return
        self._emit({
            "run_id": self.run_id, "iter": iteration, "task_id": rec.task_id,
            "variant": self.variant, "loss": self._num(rec.loss),
            "accuracy": self._num(rec.accuracy),
            "ci": self._num(rec.ci_half_width),
            "threshold_acc": self._num(rec.threshold_acc),
            "mse": self._num(rec.mse),
            "nil": self._num(rec.nil_accuracy),
            "kl": self._num(kl),
            "adapt_ms": self._num(rec.adapt_ms) if self.timing else 0.0,
            "infer_ms": self._num(rec.infer_ms) if self.timing else 0.0,
        })

    def log_error(self, iteration: int, task_id: str, message: str) -> None:
        self._emit({"run_id": self.run_id, "iter": iteration,
                    "task_id": task_id, "variant": self.variant,
                    "error": message})

    def close(self) -> None:
        self.fh.close()


# ---------------------------------------------------------------------------
# trainer persistence
# ---------------------------------------------------------------------------


def trainer_state(trainer: MetaTrainer) -> dict[str, np.ndarray]:
    flat = {k: t.data for k, t in trainer.params.named().items()}
    for name, arr in trainer.outer_opt.state_tensors().items():
        flat[f"opt.outer.{name}"] = arr
    for name, arr in trainer.attn_opt.state_tensors().items():
        flat[f"opt.attn.{name}"] = arr
    return flat


def save_trainer(trainer: MetaTrainer, path: str | Path, iteration: int,
                 digest: str) -> None:
    save_checkpoint(path, trainer_state(trainer), iteration=iteration,
                    seed=trainer.hp.seed, config_digest=digest)


def load_trainer(trainer: MetaTrainer, path: str | Path,
                 digest: str | None = None) -> int:
    ckpt = load_checkpoint(path, expected_digest=digest)
    model_flat = {k: v for k, v in ckpt.tensors.items()
                  if not k.startswith("opt.")}
    trainer.params.load_named(model_flat)
    trainer.outer_opt.load_state_tensors({
        k[len("opt.outer."):]: v for k, v in ckpt.tensors.items()
        if k.startswith("opt.outer.")})
    trainer.attn_opt.load_state_tensors({
        k[len("opt.attn."):]: v for k, v in ckpt.tensors.items()
        if k.startswith("opt.attn.")})
    return ckpt.iteration


# ---------------------------------------------------------------------------
# shared run plumbing
# ---------------------------------------------------------------------------


def build_eval_episodes(cfg: RunConfig, pool: str) -> dict:
    """A fixed, deterministic evaluation suite spread across the pool's
    subtasks."""
    episodes = {}
    for tid, task in sorted(cfg.tasks.items()):
        eps = []
        for i in range(cfg.eval_episodes):
            sub = None
            if task.kind in ("dense_regression", "vector_regression"):
                dom = cfg.world.domain_pool(pool)
                sub = dom[i % len(dom)]
            eps.append(sample_task_episode(cfg.world, task, pool, i,
                                           subtask_id=sub))
        episodes[tid] = eps
    return episodes


def run_training(cfg: RunConfig, resume: str | None = None,
                 timing: bool = False, quiet: bool = False) -> Path:
    """Train per config, writing metrics and checkpoints; returns outdir."""
    set_default_dtype(cfg.dtype)
    outdir = Path(cfg.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()
    trainer = MetaTrainer(cfg.model, cfg.tasks, cfg.hyper)
    start = 0
    if resume:
        start = load_trainer(trainer, resume, digest)
    run_id = f"{digest[:8]}-s{cfg.seed}"
    logger = MetricsLogger(outdir / "metrics.jsonl", run_id, cfg.variant,
                           timing=timing, mode="a" if resume else "w")
    eval_eps = build_eval_episodes(cfg, cfg.eval_pool)
    ckpt_path = outdir / "checkpoint.bin"
    last_kl: dict[str, float] = {}
    try:
        for step in range(start, cfg.iterations):
            batch = sample_step_episodes(cfg.world, cfg.tasks, step,
                                         cfg.hyper.outer_batch)
            rec = trainer.meta_step(batch, rng=step_rng(cfg.seed, step))
            last_kl = rec.kl_terms
            for tid, sub, reason in rec.dropped:
                logger.log_error(step + 1, tid, reason)
            if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.iterations:
                evals = trainer.evaluate(eval_eps)
                for tid in sorted(evals):
                    logger.log_record(step + 1, evals[tid],
                                      kl=last_kl.get(tid))
                save_trainer(trainer, ckpt_path, step + 1, digest)
                if not quiet:
                    losses = {t: round(r.loss, 4) for t, r in evals.items()}
                    print(f"step {step + 1}: {losses}")
        if cfg.iterations == 0 or start >= cfg.iterations:
            save_trainer(trainer, ckpt_path, start, digest)
    finally:
        logger.close()
    return outdir


def run_eval(cfg: RunConfig, checkpoint: str, out: str | None = None,
             seed: int | None = None, timing: bool = False) -> Path:
    set_default_dtype(cfg.dtype)
    if seed is not None:
        cfg.world = replace(cfg.world, seed=seed)
    trainer = MetaTrainer(cfg.model, cfg.tasks, cfg.hyper)
    iteration = load_trainer(trainer, checkpoint, cfg.digest())
    out_path = Path(out) if out else Path(cfg.outdir) / "eval_metrics.jsonl"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    run_id = f"{cfg.digest()[:8]}-s{cfg.seed}"
    logger = MetricsLogger(out_path, run_id, cfg.variant, timing=timing,
                           mode="w")
    try:
        episodes = build_eval_episodes(cfg, "test")
        evals = trainer.evaluate(episodes)
        for tid in sorted(evals):
            logger.log_record(iteration, evals[tid])
    finally:
        logger.close()
    return out_path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    outdir = run_training(cfg, resume=args.resume, timing=args.timing,
                          quiet=args.quiet)
    print(f"training done; artifacts in {outdir}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    out = run_eval(cfg, args.checkpoint, out=args.out, seed=args.seed,
                   timing=args.timing)
    print(f"evaluation written to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck_suite()
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: max rel err {r.max_rel_err:.3e}")
        ok = ok and r.passed
    return 0 if ok else 1


def cmd_attn_analyze(args) -> int:
    cfg = load_run_config(args.config)
    set_default_dtype(cfg.dtype)
    trainer = MetaTrainer(cfg.model, cfg.tasks, cfg.hyper)
    if args.checkpoint:
        load_trainer(trainer, args.checkpoint, cfg.digest())
    task_id = args.task or sorted(cfg.tasks)[0]
    if task_id not in cfg.tasks:
        print(f"unknown task {task_id!r}", file=sys.stderr)
        return 1
    episode = sample_task_episode(cfg.world, cfg.tasks[task_id], "test",
                                  args.episode_index)
    report = attention_optimality_experiment(trainer, task_id, episode,
                                             steps=args.steps, lr=args.lr)
    prefix = Path(args.out or Path(cfg.outdir) / "attn_analysis")
    prefix.parent.mkdir(parents=True, exist_ok=True)
    with open(f"{prefix}.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
    write_weight_columns(f"{prefix}.tsv", report["predicted_multiplier"],
                         report["optimized_multiplier"])
    print(f"direction agreement {report['direction_agreement']:.3f}; "
          f"report at {prefix}.json, columns at {prefix}.tsv")
    return 0


def cmd_param_count(args) -> int:
    if args.config:
        cfg = load_run_config(args.config)
        counts, text = param_count_report(cfg.model)
    else:
        counts, text = param_count_report()
    print(text)
    return 0


def cmd_speed_bench(args) -> int:
    result = benchmark_adaptation_speed(trials=args.trials)
    print(f"head-only inner step: {result['head_step_ms']:.3f} ms (median)")
    print(f"full-model inner step: {result['full_step_ms']:.3f} ms (median)")
    print(f"speedup: {result['speedup']:.2f}x over {result['trials']} trials")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mmtl",
        description="Multi-task meta-learning with channel-attention "
                    "modulation, at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run meta/pre-training per config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.add_argument("--timing", action="store_true",
                   help="log measured wall-clock (breaks byte-exact reruns)")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on held-out subtasks")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--seed", type=int, default=None,
                   help="override the episode seed")
    e.add_argument("--out", default=None)
    e.add_argument("--timing", action="store_true")
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("gradcheck",
                       help="finite-difference checks for all primitives")
    g.set_defaults(fn=cmd_gradcheck)

    a = sub.add_parser("attn-analyze",
                       help="directly optimize channel weights and compare "
                            "against the modulator's prediction")
    a.add_argument("--config", required=True)
    a.add_argument("--checkpoint", default=None)
    a.add_argument("--task", default=None)
    a.add_argument("--episode-index", type=int, default=0)
    a.add_argument("--steps", type=int, default=500)
    a.add_argument("--lr", type=float, default=0.01)
    a.add_argument("--out", default=None)
    a.set_defaults(fn=cmd_attn_analyze)

    c = sub.add_parser("param-count", help="parameter counts and the "
                                           "modulation overhead ratio")
    c.add_argument("--config", default=None)
    c.set_defaults(fn=cmd_param_count)

    s = sub.add_parser("speed-bench", help="head-only vs full-model "
                                           "inner-step wall clock")
    s.add_argument("--trials", type=int, default=50)
    s.set_defaults(fn=cmd_speed_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
