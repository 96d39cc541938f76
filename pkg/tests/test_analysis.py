"""Analysis tooling: weight-optimality probe, gradcheck suite, benchmarks."""

import numpy as np
import pytest

from helpers import planted_noise_setup

from mmtl.analysis import (
    attention_optimality_experiment,
    benchmark_adaptation_speed,
    gradcheck_suite,
    param_count_report,
    write_weight_columns,
)
from mmtl.data import SyntheticWorld, sample_classification_episode
from mmtl.engine import HyperParams, MetaTrainer, TaskSpec
from mmtl.models import (
    AttentionConfig,
    BackboneConfig,
    HeadSpec,
    LabelSpec,
    ModelConfig,
)


def small_am_trainer(seed=0):
    bb = BackboneConfig(blocks=2, channels=4, in_shape=(3, 12, 12))
    task = TaskSpec(task_id="cls", kind="classification",
                    adaptation_mode="task_adaptation",
                    head=HeadSpec(kind="fully_connected", out_dim=2),
                    label=LabelSpec(kind="classes", classes=2),
                    n_way=2, k_shot=3, n_query=4)
    cfg = ModelConfig(backbone=bb, heads={"cls": task.head},
                      labels={"cls": task.label},
                      attention=AttentionConfig(depth=2, width=3))
    hp = HyperParams(variant="am", seed=seed, inner_steps=3, inner_lr=0.05)
    return MetaTrainer(cfg, {"cls": task}, hp), task


def episode_for(trainer, seed=0):
    world = SyntheticWorld(seed=seed, image_size=12, label_size=12,
                           train_classes=8, val_classes=4, test_classes=6)
    return sample_classification_episode(world, 2, 3, 4, "test", 0)


def test_probe_zero_steps_stays_at_identity():
    trainer, task = small_am_trainer()
    ep = episode_for(trainer)
    rep = attention_optimality_experiment(trainer, "cls", ep, steps=0)
    assert np.allclose(rep["optimized_multiplier"], 1.0)
    # zero-init modulator predicts identity, so all deviations are "zero"
    assert rep["direction_agreement"] == 1.0


def test_probe_never_mutates_frozen_parameters():
    trainer, task = small_am_trainer()
    ep = episode_for(trainer)
    before = {k: t.data.copy() for k, t in trainer.params.named().items()}
    attention_optimality_experiment(trainer, "cls", ep, steps=20, lr=0.05)
    for k, t in trainer.params.named().items():
        assert np.array_equal(before[k], t.data), k


def test_probe_reduces_full_data_loss():
    trainer, task = small_am_trainer()
    ep = episode_for(trainer)
    rep = attention_optimality_experiment(trainer, "cls", ep, steps=100,
                                          lr=0.05)
    assert rep["final_loss"] <= rep["initial_loss"]
    assert len(rep["optimized_multiplier"]) == 8
    assert len(rep["block_means"]) == 2


def test_probe_planted_noise_channels_fall_below_block_mean():
    trainer, ep, noise_fed = planted_noise_setup(seed=0)
    rep = attention_optimality_experiment(trainer, "cls", ep, steps=300,
                                          lr=0.05)
    opt = np.array(rep["optimized_multiplier"])
    c = trainer.cfg.backbone.channels
    block0 = opt[:c]
    assert block0[noise_fed].mean() < block0.mean()


def test_write_weight_columns(tmp_path):
    p = tmp_path / "w.tsv"
    write_weight_columns(p, [1.0, 0.5], [0.9, 0.6])
    lines = p.read_text().strip().splitlines()
    assert lines[0] == "channel\tpredicted\toptimized"
    assert lines[1].split("\t") == ["0", "1", "0.9"]
    assert len(lines) == 3


def test_gradcheck_suite_all_pass():
    results = gradcheck_suite()
    failed = [r for r in results if not r.passed]
    assert not failed, failed
    names = {r.name for r in results}
    assert "conv2d" in names and "meta_objective/baseline" in names
    assert "meta_objective/modulated" in names


def test_speed_benchmark_head_faster_than_full():
    result = benchmark_adaptation_speed(trials=15)
    assert result["speedup"] > 1.2
    assert result["head_step_ms"] < result["full_step_ms"]


def test_param_count_report_standard_ratio():
    counts, text = param_count_report()
    assert 1.01 <= counts["ratio"] <= 1.2
    assert "ratio" in text
