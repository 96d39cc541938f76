"""Shared fixtures for analysis and acceptance tests."""

import numpy as np

from mmtl.data import Episode
from mmtl.engine import HyperParams, MetaTrainer, TaskSpec
from mmtl.models import BackboneConfig, HeadSpec, LabelSpec, ModelConfig


def planted_noise_setup(seed: int):
    """A two-block model whose first two block-0 channels are wired to read
    only input channel 2, which carries pure per-sample noise; the class
    signal lives in input channels 0 and 1. The optimal channel weighting
    suppresses the noise-fed channels.

    Returns (trainer, episode, noise_fed_channel_indices).
    """
    bb = BackboneConfig(blocks=2, channels=6, in_shape=(3, 16, 16))
    task = TaskSpec(task_id="cls", kind="classification",
                    adaptation_mode="task_adaptation",
                    head=HeadSpec(kind="fully_connected", out_dim=2),
                    label=LabelSpec(kind="classes", classes=2),
                    n_way=2, k_shot=8, n_query=12)
    cfg = ModelConfig(backbone=bb, heads={"cls": task.head},
                      labels={"cls": task.label})
    hp = HyperParams(variant="baseline", seed=seed, inner_lr=0.1,
                     inner_steps=10)
    trainer = MetaTrainer(cfg, {"cls": task}, hp)

    rng = np.random.default_rng(seed + 1000)
    w = trainer.params.backbone["block0.conv.w"]
    wd = np.zeros_like(w.data)
    wd[0:2, 2] = rng.normal(scale=0.5, size=(2, 3, 3))
    wd[2:6, 0:2] = rng.normal(scale=0.5, size=(4, 2, 3, 3))
    w.data = wd

    def make(n_per):
        xs, ys = [], []
        grid = (np.arange(16) + 0.5) / 16
        vv, uu = np.meshgrid(grid, grid, indexing="ij")
        for c in range(2):
            for _ in range(n_per):
                img = np.full((3, 16, 16), 0.1)
                cy, cx = 0.5 + rng.uniform(-0.1, 0.1, 2)
                mask = (((vv - cy) ** 2 + (uu - cx) ** 2) < 0.09 if c == 0
                        else (np.abs(vv - cy) < 0.12) | (np.abs(uu - cx) < 0.12))
                img[c] += 0.8 * mask
                img[2] = 0.5 + 0.6 * rng.normal(size=(16, 16))
                img += 0.02 * rng.normal(size=img.shape)
                xs.append(np.clip(img, -1.0, 2.0))
                ys.append(c)
        return np.stack(xs), np.array(ys)

    sx, sy = make(task.k_shot)
    qx, qy = make(task.n_query)
    episode = Episode(task_id="cls", subtask_id=0, kind="classification",
                      support_x=sx, support_y=sy, query_x=qx, query_y=qy)
    return trainer, episode, [0, 1]
