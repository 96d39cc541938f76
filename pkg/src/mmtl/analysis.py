"""Analysis tooling: channel-weight optimality probe, gradient-check
suite, adaptation speed benchmark, parameter-count report."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from mmtl import layers as L
from mmtl.data import Episode
from mmtl.engine import MetaTrainer, inner_adapt, task_loss
from mmtl.models import (
    AttentionConfig,
    BackboneConfig,
    HeadSpec,
    LabelSpec,
    ModelConfig,
    attention_forward,
    backbone_forward,
    build_model,
    checksum,
    count_parameters,
    encode_labels,
    head_forward,
    multiplier_from_latent,
)
from mmtl.tensor import (
    Tensor,
    finite_difference_gradient,
    grad_map,
    no_grad,
    tanh,
)


# ---------------------------------------------------------------------------
# channel-weight optimality probe
# ---------------------------------------------------------------------------


def attention_optimality_experiment(trainer: MetaTrainer, task_id: str,
                                    episode: Episode, steps: int = 500,
                                    lr: float = 0.01) -> dict:
    """Directly optimize a free multiplier vector on one subtask's full data.

    The head is adapted as usual, then everything is frozen and a free
    pre-squash weight vector (multiplier 1 - tanh(r), identity at r=0) is
    descended on the combined support+query loss. The result is compared
    against the modulator's predicted weights: the report carries both
    vectors, per-block means, and the fraction of channels whose predicted
    deviation from identity points the same way as the optimized one.
    Frozen parameters are checksummed before and after; a change is a hard
    failure.
    """
    task = trainer.tasks[task_id]
    cfg = trainer.cfg
    sums_before = {
        "backbone": checksum(trainer.params.backbone),
        "head": checksum(trainer.params.heads[task_id]),
    }
    if task_id in trainer.params.attention:
        sums_before["attention"] = checksum(trainer.params.attention[task_id])

    # eval-style support conditioning and head adaptation
    predicted = np.ones(cfg.backbone.modulation_len)
    eval_multiplier = None
    with no_grad():
        if task_id in trainer.params.attention:
            _, x_pre = backbone_forward(Tensor(episode.support_x), cfg.backbone,
                                        trainer.params.backbone)
            attn_out = trainer._attention_from(task, x_pre, episode.support_y)
            mult = (attn_out.multiplier() if attn_out.delta is not None
                    else multiplier_from_latent(attn_out.gaussian.mu))
            predicted = mult.data.copy()
            eval_multiplier = Tensor(mult.data)
        _, x_sup = backbone_forward(Tensor(episode.support_x), cfg.backbone,
                                    trainer.params.backbone,
                                    multiplier=eval_multiplier)
    theta = trainer.params.heads[task_id]
    if task.adaptation_mode == "task_adaptation" and trainer.hp.inner_steps > 0:
        theta, _ = inner_adapt(x_sup, episode.support_y, task.head, theta,
                               task.loss, trainer.hp.inner_lr,
                               trainer.hp.inner_steps, cfg.backbone)
    theta = {k: t.detach() for k, t in theta.items()}
    frozen_backbone = {k: t.detach()
                       for k, t in trainer.params.backbone.items()}

    full_x = np.concatenate([episode.support_x, episode.query_x])
    full_y = np.concatenate([episode.support_y, episode.query_y])

    raw = Tensor(np.zeros(cfg.backbone.modulation_len), requires_grad=True,
                 op="param")

    def full_loss(r: Tensor) -> Tensor:
        m = 1.0 - tanh(r)
        _, embed = backbone_forward(Tensor(full_x), cfg.backbone,
                                    frozen_backbone, multiplier=m)
        pred = head_forward(embed, task.head, theta, cfg.backbone)
        return task_loss(pred, full_y, task.loss)

    initial_loss = full_loss(raw).item()
    for _ in range(steps):
        loss = full_loss(raw)
        g = grad_map(loss).get(raw.node_id)
        raw = Tensor(raw.data - lr * g.data, requires_grad=True, op="param")
    final_loss = full_loss(raw).item()
    optimized = 1.0 - np.tanh(raw.data)

    def signs(dev):
        s = np.sign(dev)
        s[np.abs(dev) < 1e-9] = 0.0
        return s

    agreement = float(np.mean(signs(predicted - 1.0) == signs(optimized - 1.0)))
    C = cfg.backbone.channels
    block_means = [float(optimized[b * C:(b + 1) * C].mean())
                   for b in range(cfg.backbone.blocks)]

    sums_after = {
        "backbone": checksum(trainer.params.backbone),
        "head": checksum(trainer.params.heads[task_id]),
    }
    if task_id in trainer.params.attention:
        sums_after["attention"] = checksum(trainer.params.attention[task_id])
    if sums_after != sums_before:
        changed = [k for k in sums_before if sums_before[k] != sums_after[k]]
        raise RuntimeError(
            f"frozen parameters changed during the probe: {changed}")

    return {
        "task_id": task_id,
        "subtask_id": episode.subtask_id,
        "steps": steps,
        "lr": lr,
        "initial_loss": initial_loss,
        "final_loss": final_loss,
        "predicted_multiplier": predicted.tolist(),
        "optimized_multiplier": optimized.tolist(),
        "block_means": block_means,
        "direction_agreement": agreement,
    }


def write_weight_columns(path, predicted, optimized) -> None:
    """Tab-separated per-channel columns for plotting."""
    lines = ["channel\tpredicted\toptimized"]
    for i, (p, o) in enumerate(zip(predicted, optimized)):
        lines.append(f"{i}\t{p:.10g}\t{o:.10g}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# gradient-check suite
# ---------------------------------------------------------------------------


@dataclass
class GradCheckResult:
    name: str
    passed: bool
    max_rel_err: float


def _rel(a, b):
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / denom)


def _check(fn, xd, tol) -> float:
    x = Tensor(xd, requires_grad=True)
    loss = fn(x)
    g = grad_map(loss).get(x.node_id)
    got = np.zeros_like(xd) if g is None else g.data
    want = finite_difference_gradient(fn, Tensor(xd)).data
    return _rel(got, want)


def gradcheck_suite(seeds=(0, 1, 2), tol_primitive: float = 1e-5,
                    tol_composite: float = 1e-4) -> list[GradCheckResult]:
    """Finite-difference checks for every differentiable primitive plus the
    composite two-level objective on a sub-500-parameter model."""
    import mmtl.tensor as T

    results: list[GradCheckResult] = []

    wd = np.random.default_rng(99).normal(size=(2, 2, 3, 3))
    cases = {
        "add": lambda x: (x + 1.5).sum() ** 2.0,
        "mul": lambda x: (x * x).sum(),
        "div": lambda x: (1.0 / (x * x + 2.0)).sum(),
        "pow": lambda x: ((x * x + 1.0) ** 1.5).sum(),
        "exp": lambda x: T.texp(x).sum(),
        "log": lambda x: T.tlog(x * x + 1.5).sum(),
        "sqrt": lambda x: T.tsqrt(x * x + 1.0).sum(),
        "tanh": lambda x: T.tanh(x).sum(),
        "sigmoid": lambda x: T.sigmoid(x).sum(),
        "softplus": lambda x: T.softplus(x).sum(),
        "relu": lambda x: T.relu(x + 0.05).sum(),
        "matmul": lambda x: ((x @ Tensor(np.ones((4, 2)))) ** 2.0).sum(),
        "sum/broadcast": lambda x: ((T.tsum(x, axis=0) + 1.0) ** 2.0).sum(),
        "reshape/transpose": lambda x: ((x.T.reshape((x.size,)) * 2.0) ** 2.0).sum(),
        "slice/concat": lambda x: (T.concat([x[1:], x[:-1]], axis=0) ** 2.0).sum(),
        "conv2d": lambda x: (L.conv2d(x.reshape((1, 2, 2, 3)),
                                      Tensor(wd[:, :, :2, :2]), None, pad=1) ** 2.0).sum(),
        "conv_transpose2d": lambda x: (L.conv_transpose2d(
            x.reshape((1, 2, 2, 3)), Tensor(wd[:, :, :2, :2]), None,
            stride=2) ** 2.0).sum(),
        "max_pool2d": lambda x: (L.max_pool2d(
            x.reshape((1, 1, 4, 3)), 2, 1) ** 2.0).sum(),
        "batch_norm": lambda x: ((L.batch_norm(
            x.reshape((3, 1, 2, 2)), Tensor(np.ones(1)), Tensor(np.zeros(1)))
            * Tensor(np.arange(12.0).reshape(3, 1, 2, 2))) ** 2.0).sum(),
        "linear": lambda x: (L.linear(x, Tensor(np.ones((4, 2))),
                                      Tensor(np.zeros(2))) ** 2.0).sum(),
        "attention": lambda x: (L.scaled_dot_product_attention(
            x, Tensor(np.ones((2, 4))), Tensor(np.eye(2))) ** 2.0).sum(),
        "cross_entropy": lambda x: L.cross_entropy(x[:, :3], np.array([0, 2, 1])),
        "mse": lambda x: L.mse(x, Tensor(np.ones((3, 4)) * 0.5)),
        "channel_modulate": lambda x: (L.channel_modulate(
            Tensor(np.arange(24.0).reshape(2, 3, 2, 2)),
            T.tanh(x[0, :3]) + 1.0) ** 2.0).sum(),
        "kl_gaussian": lambda x: L.kl_diag_gaussian(
            L.GaussianParams(x[0], L.positive_sigma(x[1])),
            L.GaussianParams(Tensor(np.zeros(4)), Tensor(np.ones(4)))),
        "reparam_sample": lambda x: (L.reparam_sample(
            L.GaussianParams(x[0], L.positive_sigma(x[1])),
            Tensor(np.array([0.3, -0.2, 0.8, 0.1]))) ** 2.0).sum(),
    }
    for name, fn in cases.items():
        worst = 0.0
        for seed in seeds:
            xd = np.random.default_rng(seed).normal(size=(3, 4))
            worst = max(worst, _check(fn, xd, tol_primitive))
        results.append(GradCheckResult(name, worst < tol_primitive, worst))

    results.append(_composite_check("meta_objective/baseline", "baseline",
                                    seeds, tol_composite))
    results.append(_composite_check("meta_objective/modulated", "am",
                                    seeds, tol_composite))
    return results


def _composite_check(name: str, variant: str, seeds, tol) -> GradCheckResult:
    from mmtl.engine import HyperParams, TaskSpec

    worst = 0.0
    for seed in seeds:
        bb = BackboneConfig(blocks=1, channels=2, in_shape=(1, 6, 6))
        task = TaskSpec(task_id="cls", kind="classification",
                        adaptation_mode="task_adaptation",
                        head=HeadSpec(kind="fully_connected", out_dim=2),
                        label=LabelSpec(kind="classes", classes=2),
                        n_way=2, k_shot=2, n_query=2)
        cfg = ModelConfig(
            backbone=bb, heads={"cls": task.head}, labels={"cls": task.label},
            attention=(AttentionConfig(depth=1, width=3)
                       if variant == "am" else None))
        hp = HyperParams(variant=variant, inner_lr=0.05, inner_steps=2,
                         seed=seed, exact_inner_grad=True)
        tr = MetaTrainer(cfg, {"cls": task}, hp)
        total_params = sum(t.size for t in tr.params.named().values())
        assert total_params <= 500
        rng = np.random.default_rng(seed + 50)
        if variant == "am":
            old = tr.params.attention["cls"]["out.w"]
            tr.params.attention["cls"]["out.w"] = Tensor(
                rng.normal(scale=0.2, size=old.shape), requires_grad=True)
        sx = rng.normal(size=(4, 1, 6, 6))
        sy = np.array([0, 1, 0, 1])
        qx = rng.normal(size=(4, 1, 6, 6))
        qy = np.array([1, 0, 1, 0])
        ep = Episode(task_id="cls", subtask_id=0, kind="classification",
                     support_x=sx, support_y=sy, query_x=qx, query_y=qy)
        loss = tr._episode_loss_exact(task, ep)
        grads = grad_map(loss)
        named = tr.params.named()
        for nm in sorted(named):
            t = named[nm]
            for flat_i in range(min(t.size, 3)):
                g = grads.get(t.node_id)
                analytic = 0.0 if g is None else float(g.data.reshape(-1)[flat_i])
                orig = t.data.reshape(-1)[flat_i]
                eps = 1e-6
                t.data.reshape(-1)[flat_i] = orig + eps
                hi = tr._episode_loss_exact(task, ep).item()
                t.data.reshape(-1)[flat_i] = orig - eps
                lo = tr._episode_loss_exact(task, ep).item()
                t.data.reshape(-1)[flat_i] = orig
                fd = (hi - lo) / (2 * eps)
                if abs(analytic - fd) < 1e-8:
                    continue  # both numerically zero (e.g. bias under batch norm)
                denom = max(abs(analytic), abs(fd), 1e-6)
                worst = max(worst, abs(analytic - fd) / denom)
    return GradCheckResult(name, worst < tol, worst)


# ---------------------------------------------------------------------------
# adaptation speed benchmark
# ---------------------------------------------------------------------------


def benchmark_adaptation_speed(trials: int = 50, seed: int = 0) -> dict:
    """Median wall-clock of one head-only inner step vs one full-parameter
    inner step on the same episode and hardware."""
    bb = BackboneConfig(blocks=4, channels=16, in_shape=(3, 32, 32))
    head = HeadSpec(kind="fully_connected", out_dim=5)
    cfg = ModelConfig(backbone=bb, heads={"cls": head},
                      labels={"cls": LabelSpec(kind="classes", classes=5)})
    params = build_model(cfg, seed)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(10, 3, 32, 32))
    y = np.repeat(np.arange(5), 2)

    with no_grad():
        _, embed = backbone_forward(Tensor(x), bb, params.backbone)
    embed = Tensor(embed.data)

    lr = 0.01
    head_times = []
    theta = params.heads["cls"]
    for _ in range(trials):
        t0 = time.perf_counter()
        pred = head_forward(embed, head, theta, bb)
        loss = L.cross_entropy(pred, y)
        grads = grad_map(loss)
        for name, t in theta.items():
            g = grads.get(t.node_id)
            if g is not None:
                _ = t.data - lr * g.data
        head_times.append(time.perf_counter() - t0)

    full_times = []
    all_params = dict(params.backbone)
    all_params.update({f"head.{k}": v for k, v in params.heads["cls"].items()})
    for _ in range(trials):
        t0 = time.perf_counter()
        _, emb = backbone_forward(Tensor(x), bb, params.backbone)
        pred = head_forward(emb, head, params.heads["cls"], bb)
        loss = L.cross_entropy(pred, y)
        grads = grad_map(loss)
        for name, t in all_params.items():
            g = grads.get(t.node_id)
            if g is not None:
                _ = t.data - lr * g.data
        full_times.append(time.perf_counter() - t0)

    head_ms = float(np.median(head_times) * 1e3)
    full_ms = float(np.median(full_times) * 1e3)
    return {"head_step_ms": head_ms, "full_step_ms": full_ms,
            "speedup": full_ms / head_ms, "trials": trials}


# ---------------------------------------------------------------------------
# parameter-count report
# ---------------------------------------------------------------------------


def standard_count_config(with_attention: bool = True) -> ModelConfig:
    """The 4-block, 32-filter, 84x84 single-task classification assembly
    used for the headline parameter-ratio figure."""
    bb = BackboneConfig(blocks=4, channels=32, in_shape=(3, 84, 84))
    return ModelConfig(
        backbone=bb,
        heads={"cls": HeadSpec(kind="fully_connected", out_dim=5)},
        labels={"cls": LabelSpec(kind="classes", classes=5)},
        attention=AttentionConfig() if with_attention else None)


def param_count_report(model_cfg: ModelConfig | None = None,
                       seed: int = 0) -> tuple[dict, str]:
    cfg = model_cfg or standard_count_config()
    counts = count_parameters(build_model(cfg, seed))
    lines = [f"{'component':<28}{'parameters':>12}"]
    lines.append(f"{'backbone':<28}{counts['backbone']:>12}")
    for tid, n in counts["heads"].items():
        lines.append(f"{'head/' + tid:<28}{n:>12}")
    for tid, n in counts["label_encoders"].items():
        lines.append(f"{'label-encoder/' + tid:<28}{n:>12}")
    for tid, n in counts["attention"].items():
        lines.append(f"{'attention/' + tid:<28}{n:>12}")
    lines.append(f"{'total (no modulation)':<28}{counts['total_without_attention']:>12}")
    lines.append(f"{'total (with modulation)':<28}{counts['total_with_attention']:>12}")
    lines.append(f"{'ratio':<28}{counts['ratio']:>12.3f}")
    return counts, "\n".join(lines)
