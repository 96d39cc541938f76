"""Training and adaptation procedures.

Four variants share one trainer:

  baseline   -- multi-task training with head-only inner loops (and plain
                joint steps for domain-adaptation tasks);
  am         -- adds the per-task channel-attention modulator: heads adapt
                on modulated support embeddings, the backbone trains along
                the unmodulated query path, the modulator trains along the
                modulated query path with the backbone frozen;
  pam        -- the probabilistic modulator, trained with a reparameterized
                sample from the posterior (query tokens) plus the KL to the
                prior (support tokens); the prior mean is used at test time;
  maml_full  -- the single-task baseline in which every parameter adapts in
                the inner loop.

Gradient-flow scope: by default the inner loop is first order (adapted
heads are treated as constants of the backbone). `exact_inner_grad=True`
differentiates through the inner loop with every path attached, giving the
exact gradient of the two-level objective; it exists for oracle tests on
tiny models and is what the finite-difference acceptance check exercises.

Episodes whose loss turns non-finite are dropped from the outer sum and
recorded; the step proceeds with the remaining episodes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from mmtl import layers as L
from mmtl.data import (
    Episode,
    MetricsRecord,
    SyntheticWorld,
    metric_accuracy_ci,
    metric_nil,
    metric_threshold_accuracy,
    sample_classification_episode,
    sample_dense_regression_episode,
    sample_vector_regression_episode,
)
from mmtl.models import (
    AttentionOutput,
    HeadSpec,
    LabelSpec,
    ModelConfig,
    ModelParams,
    attention_forward,
    backbone_forward,
    build_model,
    encode_labels,
    head_forward,
    multiplier_from_latent,
)
from mmtl.tensor import (
    Optimizer,
    ShapeError,
    Tensor,
    grad_map,
    no_grad,
    sgd_step,
)

VARIANTS = ("baseline", "am", "pam", "maml_full")


@dataclass
class HyperParams:
    """Learning rates and loop shape for the two-level training procedure."""

    inner_lr: float = 0.01
    inner_steps: int = 5
    backbone_lr: float = 1e-3  # outer rate for backbone and meta-heads
    attention_lr: float = 1e-3  # rate for attention modules and label encoders
    loss_weights: dict[str, float] = field(default_factory=dict)
    variant: str = "baseline"
    outer_batch: int = 4
    outer_rule: str = "adam"
    seed: int = 0
    exact_inner_grad: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.inner_lr < 0:
            raise ValueError("inner_lr must be >= 0")
        if self.backbone_lr < 0 or self.attention_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be >= 0")
        for tid, w in self.loss_weights.items():
            if w <= 0:
                raise ValueError(f"loss weight for {tid!r} must be positive")


@dataclass
class TaskSpec:
    """One high-level task: output structure, loss, and adaptation mode."""

    task_id: str
    kind: str  # classification | dense_regression | vector_regression
    adaptation_mode: str  # task_adaptation | domain_adaptation
    head: HeadSpec
    label: LabelSpec
    loss: str = ""  # cross_entropy | mse
    n_way: int = 0
    k_shot: int = 0
    n_support: int = 10
    n_query: int = 15
    dense_kind: str = ""  # depth | normal, for dense_regression

    def __post_init__(self):
        if self.kind not in ("classification", "dense_regression",
                             "vector_regression"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.adaptation_mode not in ("task_adaptation", "domain_adaptation"):
            raise ValueError(
                f"unknown adaptation mode {self.adaptation_mode!r}")
        if not self.loss:
            self.loss = "cross_entropy" if self.kind == "classification" else "mse"
        if self.kind == "classification":
            if self.adaptation_mode != "task_adaptation":
                raise ValueError(
                    "classification tasks use task adaptation")
            if self.loss != "cross_entropy":
                raise ValueError("classification tasks use cross-entropy")
            if self.head.out_dim != self.n_way:
                raise ValueError(
                    f"head out_dim {self.head.out_dim} != n_way {self.n_way}")
        elif self.loss != "mse":
            raise ValueError("regression tasks use mean squared error")


@dataclass
class LossRecord:
    """Per-step bookkeeping of support/query losses and dropped episodes."""

    train_loss: dict[str, float] = field(default_factory=dict)
    test_loss: dict[str, float] = field(default_factory=dict)
    kl_terms: dict[str, float] = field(default_factory=dict)
    weighted_sum: float = 0.0
    dropped: list[tuple[str, int, str]] = field(default_factory=list)


class EpisodeFailure(RuntimeError):
    def __init__(self, task_id: str, subtask_id: int, reason: str):
        super().__init__(f"episode {task_id}/{subtask_id}: {reason}")
        self.task_id = task_id
        self.subtask_id = subtask_id
        self.reason = reason


def task_loss(pred: Tensor, labels: np.ndarray, loss_kind: str) -> Tensor:
    if loss_kind == "cross_entropy":
        return L.cross_entropy(pred, labels)
    if loss_kind == "mse":
        return L.mse(pred, Tensor(labels, op="const"))
    raise ValueError(f"unknown loss {loss_kind!r}")


def _finite(t: Tensor) -> bool:
    return bool(np.all(np.isfinite(t.data)))


# ---------------------------------------------------------------------------
# inner loop
# ---------------------------------------------------------------------------


def inner_adapt(embed: Tensor, labels: np.ndarray, head_spec, theta: dict,
                loss_kind: str, lr: float, steps: int, backbone_cfg,
                exact: bool = False) -> tuple[dict, float]:
    """Adapt head parameters on the support loss; the backbone is untouched.

    Returns (adapted params, last support loss). With `exact=True` the
    update chain stays on the tape so outer gradients can flow through the
    adaptation; otherwise each step produces fresh leaf tensors (first
    order). steps=0 or lr=0 returns the parameters unchanged.
    """
    theta = dict(theta)
    last_loss = float("nan")
    if steps == 0 or lr == 0.0:
        return theta, last_loss
    for _ in range(steps):
        pred = head_forward(embed, head_spec, theta, backbone_cfg)
        loss = task_loss(pred, labels, loss_kind)
        if not _finite(loss):
            raise EpisodeFailure("?", -1, "non-finite loss in inner adaptation")
        last_loss = loss.item()
        grads = grad_map(loss, create_graph=exact)
        new_theta = {}
        for name, t in theta.items():
            g = grads.get(t.node_id)
            if g is None:
                new_theta[name] = t
            elif exact:
                new_theta[name] = sgd_step(t, g, lr)
            else:
                new_theta[name] = Tensor(t.data - lr * g.data,
                                         requires_grad=True, op="param")
        theta = new_theta
    return theta, last_loss


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


class MetaTrainer:
    """Owns the mutable parameters and outer optimizer state."""

    def __init__(self, model_cfg: ModelConfig, tasks: dict[str, TaskSpec],
                 hp: HyperParams, params: ModelParams | None = None):
        self.cfg = model_cfg
        self.tasks = dict(tasks)
        self.hp = hp
        self.params = params if params is not None else build_model(
            model_cfg, hp.seed)
        self.outer_opt = Optimizer(hp.outer_rule, hp.backbone_lr)
        self.attn_opt = Optimizer(hp.outer_rule, hp.attention_lr)
        if hp.variant == "maml_full" and len(self.tasks) != 1:
            raise ValueError(
                "the full-adaptation baseline handles exactly one task")

    # -- parameter plumbing -------------------------------------------

    def _outer_named(self) -> dict[str, Tensor]:
        named = {}
        for k, t in self.params.backbone.items():
            named[f"backbone.{k}"] = t
        for tid, d in self.params.heads.items():
            for k, t in d.items():
                named[f"head.{tid}.{k}"] = t
        return named

    def _attn_named(self) -> dict[str, Tensor]:
        named = {}
        for tid, d in self.params.attention.items():
            for k, t in d.items():
                named[f"attn.{tid}.{k}"] = t
        for tid, d in self.params.label_encoders.items():
            for k, t in d.items():
                named[f"lblenc.{tid}.{k}"] = t
        return named

    def _write_back(self, named: dict[str, Tensor]) -> None:
        for name, t in named.items():
            part, rest = name.split(".", 1)
            if part == "backbone":
                self.params.backbone[rest] = t
            else:
                tid, key = rest.split(".", 1)
                group = {"head": self.params.heads,
                         "attn": self.params.attention,
                         "lblenc": self.params.label_encoders}[part]
                group[tid][key] = t

    def _detached_backbone(self) -> dict[str, Tensor]:
        return {k: t.detach() for k, t in self.params.backbone.items()}

    def _loss_weight(self, tid: str) -> float:
        return self.hp.loss_weights.get(tid, 1.0)

    # -- per-episode computation graphs --------------------------------

    def _attention_from(self, task: TaskSpec, x_pre: Tensor,
                        labels: np.ndarray) -> AttentionOutput:
        enc = encode_labels(labels, task.label,
                            self.params.label_encoders.get(task.task_id))
        return attention_forward(
            x_pre, enc, self.params.attention[task.task_id],
            self.cfg.attention, self.cfg.backbone.modulation_len,
            probabilistic=(self.hp.variant == "pam"))

    def _episode_terms(self, task: TaskSpec, ep: Episode,
                       rng: np.random.Generator) -> dict:
        """Build the episode's loss tensors under the production (first
        order) gradient-flow rules."""
        hp = self.hp
        tid = task.task_id
        attn_out = None
        support_multiplier = None
        if hp.variant in ("am", "pam"):
            with no_grad():
                _, x_pre = backbone_forward(Tensor(ep.support_x),
                                            self.cfg.backbone,
                                            self.params.backbone)
            attn_out = self._attention_from(task, x_pre, ep.support_y)
            if hp.variant == "am":
                support_multiplier = attn_out.multiplier()
            else:
                support_multiplier = multiplier_from_latent(
                    attn_out.gaussian.mu)

        # adaptation embeddings: constants for the first-order inner loop
        with no_grad():
            m_const = (Tensor(support_multiplier.data)
                       if support_multiplier is not None else None)
            _, x_sup = backbone_forward(Tensor(ep.support_x), self.cfg.backbone,
                                        self.params.backbone,
                                        multiplier=m_const)
        theta = self.params.heads[tid]
        if task.adaptation_mode == "task_adaptation":
            theta_prime, sup_loss = inner_adapt(
                x_sup, ep.support_y, task.head, theta, task.loss,
                hp.inner_lr, hp.inner_steps, self.cfg.backbone)
        else:
            theta_prime = dict(theta)
            with no_grad():
                pred = head_forward(x_sup, task.head, theta, self.cfg.backbone)
                sup_loss = task_loss(pred, ep.support_y, task.loss).item()

        # query loss on the unmodulated path: trains backbone and heads
        _, x_que = backbone_forward(Tensor(ep.query_x), self.cfg.backbone,
                                    self.params.backbone)
        pred_u = head_forward(x_que, task.head, theta_prime, self.cfg.backbone)
        unmod_loss = task_loss(pred_u, ep.query_y, task.loss)
        if not _finite(unmod_loss):
            raise EpisodeFailure(tid, ep.subtask_id, "non-finite query loss")

        # query loss on the modulated path: trains the modulator only
        mod_loss, kl = None, None
        if hp.variant == "am":
            mod_loss = self._modulated_query_loss(
                task, ep, theta_prime, attn_out.multiplier())
        elif hp.variant == "pam":
            mod_loss, kl = self._elbo_terms(task, ep, theta_prime, attn_out, rng)
        return {"theta_prime": theta_prime, "unmod_loss": unmod_loss,
                "mod_loss": mod_loss, "support_loss": sup_loss, "kl": kl}

    def _modulated_query_loss(self, task: TaskSpec, ep: Episode,
                              theta_prime: dict, multiplier: Tensor) -> Tensor:
        frozen = self._detached_backbone()
        _, xbar = backbone_forward(Tensor(ep.query_x), self.cfg.backbone,
                                   frozen, multiplier=multiplier)
        pred = head_forward(xbar, task.head, theta_prime, self.cfg.backbone)
        loss = task_loss(pred, ep.query_y, task.loss)
        if not _finite(loss):
            raise EpisodeFailure(task.task_id, ep.subtask_id,
                                 "non-finite modulated query loss")
        return loss

    def _elbo_terms(self, task: TaskSpec, ep: Episode, theta_prime: dict,
                    prior_out: AttentionOutput,
                    rng: np.random.Generator) -> Tensor:
        """Reparameterized query loss under the posterior plus KL(q || p)."""
        if ep.query_y is None or len(ep.query_y) == 0:
            raise EpisodeFailure(task.task_id, ep.subtask_id,
                                 "probabilistic training needs query labels")
        with no_grad():
            _, x_que_pre = backbone_forward(Tensor(ep.query_x),
                                            self.cfg.backbone,
                                            self.params.backbone)
        posterior_out = self._attention_from(task, x_que_pre, ep.query_y)
        q, p = posterior_out.gaussian, prior_out.gaussian
        noise = Tensor(rng.standard_normal(q.mu.shape), op="const")
        z = L.reparam_sample(q, noise)
        multiplier = multiplier_from_latent(z)
        frozen = self._detached_backbone()
        _, xbar = backbone_forward(Tensor(ep.query_x), self.cfg.backbone,
                                   frozen, multiplier=multiplier)
        pred = head_forward(xbar, task.head, theta_prime, self.cfg.backbone)
        loss = task_loss(pred, ep.query_y, task.loss)
        kl = L.kl_diag_gaussian(q, p)
        total = loss + kl
        if not _finite(total):
            raise EpisodeFailure(task.task_id, ep.subtask_id,
                                 "non-finite evidence-bound loss")
        return total, kl.item()

    def _episode_loss_exact(self, task: TaskSpec, ep: Episode) -> Tensor:
        """Every path attached and the inner loop differentiated through:
        the exact two-level objective, used by gradient oracles."""
        hp = self.hp
        multiplier = None
        if hp.variant in ("am", "pam"):
            _, x_pre = backbone_forward(Tensor(ep.support_x), self.cfg.backbone,
                                        self.params.backbone)
            attn_out = self._attention_from(task, x_pre, ep.support_y)
            multiplier = (attn_out.multiplier() if hp.variant == "am"
                          else multiplier_from_latent(attn_out.gaussian.mu))
        _, x_sup = backbone_forward(Tensor(ep.support_x), self.cfg.backbone,
                                    self.params.backbone, multiplier=multiplier)
        theta = self.params.heads[task.task_id]
        if task.adaptation_mode == "task_adaptation":
            theta_prime, _ = inner_adapt(
                x_sup, ep.support_y, task.head, theta, task.loss,
                hp.inner_lr, hp.inner_steps, self.cfg.backbone, exact=True)
        else:
            theta_prime = dict(theta)
        _, x_que = backbone_forward(Tensor(ep.query_x), self.cfg.backbone,
                                    self.params.backbone)
        pred = head_forward(x_que, task.head, theta_prime, self.cfg.backbone)
        return task_loss(pred, ep.query_y, task.loss)

    # -- outer steps ----------------------------------------------------

    def meta_step(self, episodes: dict[str, list[Episode]],
                  rng: np.random.Generator | None = None) -> LossRecord:
        """One outer update over a batch of episodes per task.

        Backbone and meta-heads descend the unmodulated query objective;
        attention modules (and label encoders) descend the modulated one.
        """
        if self.hp.variant == "maml_full":
            return self.full_maml_step(episodes)
        rng = rng or np.random.default_rng(self.hp.seed)
        record = LossRecord()
        per_task_unmod: dict[str, list[Tensor]] = {}
        per_task_mod: dict[str, list[Tensor]] = {}
        theta_prime_sets: dict[str, list[dict]] = {}
        for tid, eps in episodes.items():
            task = self.tasks.get(tid)
            if task is None or tid not in self.params.heads:
                raise KeyError(f"no head registered for task {tid!r}")
            if self.hp.variant in ("am", "pam") and tid not in self.params.attention:
                raise KeyError(f"no attention module for task {tid!r}")
            sup_losses, kls = [], []
            for ep in eps:
                try:
                    terms = (
                        {"theta_prime": {}, "mod_loss": None, "kl": None,
                         "support_loss": float("nan"),
                         "unmod_loss": self._episode_loss_exact(task, ep)}
                        if self.hp.exact_inner_grad
                        else self._episode_terms(task, ep, rng))
                except EpisodeFailure as fail:
                    record.dropped.append((tid, ep.subtask_id, fail.reason))
                    continue
                per_task_unmod.setdefault(tid, []).append(terms["unmod_loss"])
                if terms["mod_loss"] is not None:
                    per_task_mod.setdefault(tid, []).append(terms["mod_loss"])
                theta_prime_sets.setdefault(tid, []).append(terms["theta_prime"])
                sup_losses.append(terms["support_loss"])
                if terms["kl"] is not None:
                    kls.append(terms["kl"])
            finite_sup = [v for v in sup_losses if np.isfinite(v)]
            if finite_sup:
                record.train_loss[tid] = float(np.mean(finite_sup))
            if kls:
                record.kl_terms[tid] = float(np.mean(kls))

        if not per_task_unmod:
            return record

        def weighted_total(per_task: dict[str, list[Tensor]]) -> Tensor:
            total = None
            for tid, losses in sorted(per_task.items()):
                lam = self._loss_weight(tid) / len(losses)
                for t in losses:
                    term = t * lam
                    total = term if total is None else total + term
            return total

        phi_theta_total = weighted_total(per_task_unmod)
        grads = grad_map(phi_theta_total)
        outer_named = self._outer_named()
        outer_grads: dict[str, np.ndarray] = {}
        for name, t in outer_named.items():
            g = grads.get(t.node_id)
            if g is not None:
                outer_grads[name] = g.data
        # fold adapted-head gradients back onto the meta-heads (first order)
        for tid, theta_list in theta_prime_sets.items():
            for theta_prime in theta_list:
                for key, leaf in theta_prime.items():
                    g = grads.get(leaf.node_id)
                    if g is None:
                        continue
                    name = f"head.{tid}.{key}"
                    if name in outer_grads and outer_named[name].node_id != leaf.node_id:
                        outer_grads[name] = outer_grads[name] + g.data
                    elif name not in outer_grads:
                        outer_grads[name] = g.data

        attn_grads: dict[str, np.ndarray] = {}
        if per_task_mod:
            attn_total = weighted_total(per_task_mod)
            agrads = grad_map(attn_total)
            for name, t in self._attn_named().items():
                g = agrads.get(t.node_id)
                if g is not None:
                    attn_grads[name] = g.data
        if self.hp.exact_inner_grad:
            # the exact objective carries the modulator dependence itself
            for name, t in self._attn_named().items():
                g = grads.get(t.node_id)
                if g is not None:
                    attn_grads[name] = g.data

        self._write_back(self.outer_opt.step(outer_named, outer_grads))
        if attn_grads:
            self._write_back(self.attn_opt.step(self._attn_named(), attn_grads))

        for tid, losses in per_task_unmod.items():
            vals = [t.item() for t in losses]
            record.test_loss[tid] = float(np.mean(vals))
        record.weighted_sum = float(sum(
            self._loss_weight(tid) * record.test_loss[tid]
            for tid in record.test_loss))
        return record

    def pretrain_step(self, episodes: dict[str, list[Episode]],
                      rng: np.random.Generator | None = None) -> LossRecord:
        """Joint supervised step for domain-adaptation tasks (no inner loop)."""
        for tid in episodes:
            task = self.tasks.get(tid)
            if task is None or task.adaptation_mode != "domain_adaptation":
                raise ValueError(
                    f"pretrain_step requires domain-adaptation tasks, got {tid!r}")
        return self.meta_step(episodes, rng)

    def full_maml_step(self, episodes: dict[str, list[Episode]],
                       rng: np.random.Generator | None = None) -> LossRecord:
        """Single-task baseline: every parameter adapts in the inner loop."""
        if len(episodes) != 1:
            raise ValueError(
                "the full-adaptation baseline handles exactly one task, got "
                f"{sorted(episodes)}")
        (tid, eps), = episodes.items()
        task = self.tasks[tid]
        hp = self.hp
        record = LossRecord()
        all_named = self._outer_named()
        losses: list[Tensor] = []
        adapted_sets: list[dict[str, Tensor]] = []
        sup_losses = []
        for ep in eps:
            adapted = dict(all_named)
            last_sup = float("nan")
            try:
                for _ in range(hp.inner_steps):
                    loss = self._full_forward_loss(task, adapted, ep.support_x,
                                                   ep.support_y)
                    if not _finite(loss):
                        raise EpisodeFailure(tid, ep.subtask_id,
                                             "non-finite support loss")
                    last_sup = loss.item()
                    grads = grad_map(loss, create_graph=hp.exact_inner_grad)
                    new = {}
                    for name, t in adapted.items():
                        g = grads.get(t.node_id)
                        if g is None:
                            new[name] = t
                        elif hp.exact_inner_grad:
                            new[name] = sgd_step(t, g, hp.inner_lr)
                        else:
                            new[name] = Tensor(t.data - hp.inner_lr * g.data,
                                               requires_grad=True, op="param")
                    adapted = new
                q_loss = self._full_forward_loss(task, adapted, ep.query_x,
                                                 ep.query_y)
                if not _finite(q_loss):
                    raise EpisodeFailure(tid, ep.subtask_id,
                                         "non-finite query loss")
            except EpisodeFailure as fail:
                record.dropped.append((tid, ep.subtask_id, fail.reason))
                continue
            losses.append(q_loss)
            adapted_sets.append(adapted)
            sup_losses.append(last_sup)
        if not losses:
            return record
        lam = self._loss_weight(tid) / len(losses)
        total = None
        for t in losses:
            term = t * lam
            total = term if total is None else total + term
        grads = grad_map(total)
        outer_grads: dict[str, np.ndarray] = {}
        for name, t in all_named.items():
            g = grads.get(t.node_id)
            if g is not None:
                outer_grads[name] = g.data
        for adapted in adapted_sets:
            for name, leaf in adapted.items():
                if leaf.node_id == all_named[name].node_id:
                    continue
                g = grads.get(leaf.node_id)
                if g is None:
                    continue
                outer_grads[name] = (outer_grads[name] + g.data
                                     if name in outer_grads else g.data)
        self._write_back(self.outer_opt.step(all_named, outer_grads))
        finite_sup = [v for v in sup_losses if np.isfinite(v)]
        if finite_sup:
            record.train_loss[tid] = float(np.mean(finite_sup))
        record.test_loss[tid] = float(np.mean([t.item() for t in losses]))
        record.weighted_sum = self._loss_weight(tid) * record.test_loss[tid]
        return record

    def _full_forward_loss(self, task: TaskSpec, named: dict[str, Tensor],
                           x: np.ndarray, y: np.ndarray) -> Tensor:
        backbone = {k.split(".", 1)[1]: t for k, t in named.items()
                    if k.startswith("backbone.")}
        prefix = f"head.{task.task_id}."
        head = {k[len(prefix):]: t for k, t in named.items()
                if k.startswith(prefix)}
        _, embed = backbone_forward(Tensor(x), self.cfg.backbone, backbone)
        pred = head_forward(embed, task.head, head, self.cfg.backbone)
        return task_loss(pred, y, task.loss)

    # -- evaluation ------------------------------------------------------

    def evaluate(self, episodes: dict[str, list[Episode]],
                 inner_steps: int | None = None) -> dict[str, MetricsRecord]:
        """Score held-out episodes: adapt the head where the task calls for
        it, condition the modulator on the support set, then score the
        query set. Wall-clock per adaptation and per inference is recorded.
        """
        if not episodes or all(len(v) == 0 for v in episodes.values()):
            raise ValueError("evaluate: empty episode suite")
        steps = self.hp.inner_steps if inner_steps is None else inner_steps
        out: dict[str, MetricsRecord] = {}
        for tid, eps in episodes.items():
            task = self.tasks[tid]
            losses, adapt_ms, infer_ms = [], [], []
            correct = total = 0
            nil_scores = []
            mses, thr = [], []
            for ep in eps:
                multiplier = None
                if self.hp.variant in ("am", "pam") and tid in self.params.attention:
                    with no_grad():
                        _, x_pre = backbone_forward(
                            Tensor(ep.support_x), self.cfg.backbone,
                            self.params.backbone)
                        attn_out = self._attention_from(task, x_pre,
                                                        ep.support_y)
                        mult = (attn_out.multiplier()
                                if self.hp.variant == "am" else
                                multiplier_from_latent(attn_out.gaussian.mu))
                        multiplier = Tensor(mult.data)
                with no_grad():
                    _, x_sup = backbone_forward(
                        Tensor(ep.support_x), self.cfg.backbone,
                        self.params.backbone, multiplier=multiplier)
                theta = self.params.heads[tid]
                t0 = time.perf_counter()
                if task.adaptation_mode == "task_adaptation" and steps > 0:
                    theta, _ = inner_adapt(
                        x_sup, ep.support_y, task.head, theta, task.loss,
                        self.hp.inner_lr, steps, self.cfg.backbone)
                adapt_ms.append((time.perf_counter() - t0) * 1e3)
                t1 = time.perf_counter()
                with no_grad():
                    _, x_que = backbone_forward(
                        Tensor(ep.query_x), self.cfg.backbone,
                        self.params.backbone, multiplier=multiplier)
                    pred = head_forward(x_que, task.head, theta,
                                        self.cfg.backbone)
                infer_ms.append((time.perf_counter() - t1) * 1e3)
                with no_grad():
                    losses.append(task_loss(pred, ep.query_y, task.loss).item())
                if task.kind == "classification":
                    hits = (pred.data.argmax(axis=1) == ep.query_y)
                    correct += int(hits.sum())
                    total += len(ep.query_y)
                    try:
                        nil_scores.append(metric_nil(
                            x_sup.data, ep.support_y, x_que.data, ep.query_y))
                    except ValueError:
                        pass  # zero-norm embedding: skip the nil score
                else:
                    mses.append(float(np.mean((pred.data - ep.query_y) ** 2)))
                    thr.append(metric_threshold_accuracy(pred.data, ep.query_y))
            rec = MetricsRecord(
                task_id=tid, episode_count=len(eps),
                loss=float(np.mean(losses)),
                adapt_ms=float(np.median(adapt_ms)),
                infer_ms=float(np.median(infer_ms)))
            if task.kind == "classification":
                acc, hw = metric_accuracy_ci(correct, total)
                rec.accuracy = acc
                rec.ci_half_width = hw
                rec.nil_accuracy = (float(np.mean(nil_scores))
                                    if nil_scores else None)
            else:
                rec.mse = float(np.mean(mses))
                rec.threshold_acc = float(np.mean(thr))
            out[tid] = rec
        return out


# ---------------------------------------------------------------------------
# standalone evidence-bound loss (probabilistic modulator)
# ---------------------------------------------------------------------------


def elbo_loss(trainer: MetaTrainer, task: TaskSpec, ep: Episode,
              rng: np.random.Generator,
              theta_prime: dict | None = None) -> tuple[Tensor, float]:
    """Query loss with a posterior-sampled multiplier plus KL(q || p).

    The prior conditions on support tokens, the posterior on query tokens;
    tying them makes the KL vanish and the result equals the plain query
    loss with the same latent. Returns (loss tensor, kl value).
    """
    if trainer.hp.variant != "pam":
        raise ValueError("the evidence-bound loss applies to the "
                         "probabilistic variant")
    with no_grad():
        _, x_pre = backbone_forward(Tensor(ep.support_x), trainer.cfg.backbone,
                                    trainer.params.backbone)
    prior_out = trainer._attention_from(task, x_pre, ep.support_y)
    theta = theta_prime if theta_prime is not None else dict(
        trainer.params.heads[task.task_id])
    return trainer._elbo_terms(task, ep, theta, prior_out, rng)


# ---------------------------------------------------------------------------
# episode sampling for configured tasks
# ---------------------------------------------------------------------------


def sample_task_episode(world: SyntheticWorld, task: TaskSpec,
                        pool: str, episode_index: int,
                        subtask_id: int | None = None) -> Episode:
    if task.kind == "classification":
        return sample_classification_episode(
            world, task.n_way, task.k_shot, task.n_query, pool,
            episode_index, task_id=task.task_id)
    if task.kind == "dense_regression":
        return sample_dense_regression_episode(
            world, task.dense_kind, task.n_support, task.n_query, pool,
            episode_index, subtask_id=subtask_id, task_id=task.task_id)
    return sample_vector_regression_episode(
        world, task.n_support, task.n_query, pool, episode_index,
        subtask_id=subtask_id, task_id=task.task_id)


def sample_step_episodes(world: SyntheticWorld, tasks: dict[str, TaskSpec],
                         step: int, outer_batch: int,
                         pool: str = "train") -> dict[str, list[Episode]]:
    """The episode batch for one outer step; a pure function of (world
    seed, step), independent of the variant being trained."""
    out: dict[str, list[Episode]] = {}
    for tid, task in sorted(tasks.items()):
        out[tid] = [
            sample_task_episode(world, task, pool,
                                episode_index=step * outer_batch + i)
            for i in range(outer_batch)]
    return out
