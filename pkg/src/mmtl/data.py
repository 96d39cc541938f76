"""Episodic data: synthetic task generators, directory ingestion, metrics.

Four synthetic families stand in for the real multi-task datasets:

  * classification -- procedural shape/texture/color classes; an episode
    is an N-way K-shot subtask over a class subset with episode-local
    label indices;
  * depth / surface normals -- procedural planar-ramp-and-box scenes with
    exact analytic labels; subtasks differ only in the scene-parameter
    distribution (domain shift);
  * vanishing point -- bundles of lines through a point in [0,1]^2.

Every generator is a pure function of (world seed, structured key), so
replaying a key reproduces the episode bit for bit. Train/val/test
subtask pools are disjoint by construction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mmtl.tensor import ShapeError

# spawn-key domain codes for the per-family random streams
_CLS_CLASS = 101
_CLS_EPISODE = 102
_DENSE_DOMAIN = 201
_DENSE_EPISODE = 202
_VP_DOMAIN = 301
_VP_EPISODE = 302
_DIR_EPISODE = 401

POOLS = {"train": 0, "val": 1, "test": 2}


@dataclass
class Episode:
    """One subtask: support set for adaptation, query set for scoring."""

    task_id: str
    subtask_id: int
    kind: str  # 'classification' | 'dense_regression' | 'vector_regression'
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    meta: dict = field(default_factory=dict, repr=False)


@dataclass
class SyntheticWorld:
    """Deterministic procedural data source.

    The class vocabulary and the dense/vp domain pools are split into
    disjoint train/val/test ranges; episodes drawn from one pool can
    never share a subtask with another.
    """

    seed: int = 0
    image_size: int = 64
    channels: int = 3
    label_size: int = 64
    train_subtasks: int = 20
    val_subtasks: int = 10
    test_subtasks: int = 12
    train_classes: int = 12
    val_classes: int = 6
    test_classes: int = 8

    def _rng(self, *key: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence(self.seed, spawn_key=tuple(int(k) for k in key)))

    def class_pool(self, pool: str) -> range:
        lo = {"train": 0, "val": self.train_classes,
              "test": self.train_classes + self.val_classes}[pool]
        n = {"train": self.train_classes, "val": self.val_classes,
             "test": self.test_classes}[pool]
        return range(lo, lo + n)

    def domain_pool(self, pool: str) -> range:
        lo = {"train": 0, "val": self.train_subtasks,
              "test": self.train_subtasks + self.val_subtasks}[pool]
        n = {"train": self.train_subtasks, "val": self.val_subtasks,
             "test": self.test_subtasks}[pool]
        return range(lo, lo + n)


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size) + 0.5) / size
    return np.meshgrid(c, c, indexing="ij")  # (row=v, col=u)


def _hue_rgb(h: float) -> np.ndarray:
    # simple bright palette on the hue circle
    ang = 2 * np.pi * h
    rgb = 0.5 + 0.5 * np.cos(ang - np.array([0.0, 2.094, 4.189]))
    return 0.25 + 0.75 * rgb


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------

_SHAPES = ("disk", "square", "cross", "rings", "stripes", "checker")


def _class_style(world: SyntheticWorld, class_id: int) -> dict:
    rng = world._rng(_CLS_CLASS, class_id)
    return {
        "shape": _SHAPES[int(rng.integers(len(_SHAPES)))],
        "color": _hue_rgb(float(rng.uniform())),
        "scale": float(rng.uniform(0.22, 0.38)),
        "freq": float(rng.uniform(6.0, 14.0)),
        "angle": float(rng.uniform(0, np.pi)),
    }


def _render_class_sample(world: SyntheticWorld, style: dict,
                         rng: np.random.Generator) -> np.ndarray:
    size = world.image_size
    vv, uu = _grid(size)
    cy = 0.5 + rng.uniform(-0.12, 0.12)
    cx = 0.5 + rng.uniform(-0.12, 0.12)
    r = style["scale"] * rng.uniform(0.85, 1.15)
    ang = style["angle"] + rng.uniform(-0.2, 0.2)
    phase = rng.uniform(0, 2 * np.pi)
    d2 = (vv - cy) ** 2 + (uu - cx) ** 2
    shape = style["shape"]
    if shape == "disk":
        mask = d2 < r * r
    elif shape == "square":
        mask = np.maximum(np.abs(vv - cy), np.abs(uu - cx)) < r
    elif shape == "cross":
        mask = (np.abs(vv - cy) < 0.3 * r) | (np.abs(uu - cx) < 0.3 * r)
        mask &= np.maximum(np.abs(vv - cy), np.abs(uu - cx)) < 1.4 * r
    elif shape == "rings":
        mask = (np.sin(style["freq"] * np.pi * np.sqrt(d2) + phase) > 0) & (d2 < r * r * 2.2)
    elif shape == "stripes":
        proj = np.cos(ang) * uu + np.sin(ang) * vv
        mask = np.sin(style["freq"] * np.pi * proj + phase) > 0
    else:  # checker
        f = style["freq"] * 0.6
        mask = (np.sin(f * np.pi * uu + phase) * np.sin(f * np.pi * vv + phase)) > 0
    img = np.full((world.channels, size, size), 0.1)
    img += 0.05 * rng.normal(size=img.shape)
    color = style["color"][:world.channels]
    img += mask[None, :, :] * color[:, None, None]
    img += 0.02 * rng.normal(size=img.shape)
    return np.clip(img, 0.0, 1.0)


def sample_classification_episode(world: SyntheticWorld, n_way: int, k_shot: int,
                                  n_query: int, pool: str = "train",
                                  episode_index: int = 0,
                                  task_id: str = "cls") -> Episode:
    """N-way K-shot episode over a fresh class subset from the pool.

    Label indices are episode-local (0..N-1) under a randomized
    class-to-index assignment; all N classes appear in both sets.
    """
    classes = list(world.class_pool(pool))
    if len(classes) < n_way:
        raise ValueError(
            f"pool {pool!r} has {len(classes)} classes, need {n_way}")
    rng = world._rng(_CLS_EPISODE, POOLS[pool], episode_index)
    chosen = rng.choice(classes, size=n_way, replace=False)
    sup_x, sup_y, que_x, que_y = [], [], [], []
    for local_idx, class_id in enumerate(chosen):
        style = _class_style(world, int(class_id))
        for _ in range(k_shot):
            sup_x.append(_render_class_sample(world, style, rng))
            sup_y.append(local_idx)
        for _ in range(n_query):
            que_x.append(_render_class_sample(world, style, rng))
            que_y.append(local_idx)
    return Episode(
        task_id=task_id, subtask_id=episode_index, kind="classification",
        support_x=np.stack(sup_x), support_y=np.array(sup_y, dtype=np.int64),
        query_x=np.stack(que_x), query_y=np.array(que_y, dtype=np.int64),
        meta={"classes": [int(c) for c in chosen]})


# ---------------------------------------------------------------------------
# dense regression (depth / surface normals)
# ---------------------------------------------------------------------------


@dataclass
class Scene:
    """Planar ramp plus fronto-parallel boxes; depth/normals are analytic."""

    z0: float
    gx: float
    gy: float
    boxes: list  # (u0, v0, u1, v1, z, color_index)
    base_color: np.ndarray
    stripe_freq: float
    stripe_angle: float
    palette: np.ndarray  # (k, 3)

    def depth(self, size: int) -> np.ndarray:
        vv, uu = _grid(size)
        d = np.clip(self.z0 + self.gx * (uu - 0.5) + self.gy * (vv - 0.5), 0.0, 1.0)
        for (u0, v0, u1, v1, z, _c) in self.boxes:
            inside = (uu >= u0) & (uu < u1) & (vv >= v0) & (vv < v1)
            d = np.where(inside, z, d)
        return d[None, :, :]

    def normals(self, size: int) -> np.ndarray:
        vv, uu = _grid(size)
        n = np.array([-self.gx, -self.gy, 1.0])
        n = n / np.linalg.norm(n)
        out = np.broadcast_to(n[:, None, None], (3, size, size)).copy()
        flat = np.array([0.0, 0.0, 1.0])
        for (u0, v0, u1, v1, _z, _c) in self.boxes:
            inside = (uu >= u0) & (uu < u1) & (vv >= v0) & (vv < v1)
            out[:, inside] = flat[:, None]
        return out

    def image(self, size: int, channels: int,
              rng: np.random.Generator | None = None) -> np.ndarray:
        vv, uu = _grid(size)
        proj = np.cos(self.stripe_angle) * uu + np.sin(self.stripe_angle) * vv
        texture = 0.75 + 0.25 * np.sin(self.stripe_freq * np.pi * proj)
        albedo = self.base_color[:channels, None, None] * texture[None, :, :]
        for (u0, v0, u1, v1, _z, ci) in self.boxes:
            inside = (uu >= u0) & (uu < u1) & (vv >= v0) & (vv < v1)
            color = self.palette[ci][:channels]
            albedo = np.where(inside[None, :, :], color[:, None, None], albedo)
        shading = 1.0 - 0.6 * self.depth(size)
        img = albedo * shading
        if rng is not None:
            img = img + 0.01 * rng.normal(size=img.shape)
        return np.clip(img, 0.0, 1.0)


def flat_plane_scene(depth: float) -> Scene:
    """Fronto-parallel plane at constant depth; normals (0, 0, 1)."""
    return Scene(z0=depth, gx=0.0, gy=0.0, boxes=[],
                 base_color=np.array([0.8, 0.8, 0.8]), stripe_freq=6.0,
                 stripe_angle=0.3, palette=np.ones((1, 3)))


def ramp_scene(z0: float, gx: float, gy: float) -> Scene:
    return Scene(z0=z0, gx=gx, gy=gy, boxes=[],
                 base_color=np.array([0.8, 0.7, 0.6]), stripe_freq=8.0,
                 stripe_angle=0.7, palette=np.ones((1, 3)))


def _dense_domain(world: SyntheticWorld, subtask_id: int) -> dict:
    rng = world._rng(_DENSE_DOMAIN, subtask_id)
    return {
        "angle_center": float(rng.uniform(0, 2 * np.pi)),
        "slope_hi": float(rng.uniform(0.3, 0.8)),
        "z_range": (float(rng.uniform(0.2, 0.4)), float(rng.uniform(0.5, 0.8))),
        "max_boxes": int(rng.integers(0, 4)),
        "palette": np.stack([_hue_rgb(float(rng.uniform())) for _ in range(4)]),
        "base_hue": float(rng.uniform()),
        "stripe_freq": float(rng.uniform(5.0, 12.0)),
    }


def _sample_scene(domain: dict, rng: np.random.Generator) -> Scene:
    ang = domain["angle_center"] + rng.uniform(-0.4, 0.4)
    slope = rng.uniform(0.1, domain["slope_hi"])
    z0 = rng.uniform(*domain["z_range"])
    boxes = []
    for _ in range(int(rng.integers(0, domain["max_boxes"] + 1))):
        u0, v0 = rng.uniform(0.05, 0.6, size=2)
        w, h = rng.uniform(0.15, 0.35, size=2)
        z = rng.uniform(0.05, 0.95)
        boxes.append((float(u0), float(v0), float(min(u0 + w, 0.95)),
                      float(min(v0 + h, 0.95)), float(z),
                      int(rng.integers(len(domain["palette"])))))
    return Scene(z0=float(z0), gx=float(slope * np.cos(ang)),
                 gy=float(slope * np.sin(ang)), boxes=boxes,
                 base_color=_hue_rgb(domain["base_hue"]),
                 stripe_freq=domain["stripe_freq"],
                 stripe_angle=float(rng.uniform(0, np.pi)),
                 palette=domain["palette"])


def sample_dense_regression_episode(world: SyntheticWorld, kind: str,
                                    n_support: int, n_query: int,
                                    pool: str = "train", episode_index: int = 0,
                                    subtask_id: int | None = None,
                                    task_id: str | None = None) -> Episode:
    """Procedural scenes with exact analytic depth or normal labels."""
    if kind not in ("depth", "normal"):
        raise ValueError(f"unknown dense label kind {kind!r}")
    dom_pool = world.domain_pool(pool)
    rng = world._rng(_DENSE_EPISODE, POOLS[pool], episode_index,
                     0 if kind == "depth" else 1)
    if subtask_id is None:
        subtask_id = dom_pool[int(rng.integers(len(dom_pool)))]
    elif subtask_id not in dom_pool:
        raise ValueError(f"subtask {subtask_id} not in {pool!r} pool")
    domain = _dense_domain(world, subtask_id)

    def make(n):
        xs, ys = [], []
        for _ in range(n):
            scene = _sample_scene(domain, rng)
            xs.append(scene.image(world.image_size, world.channels, rng))
            if kind == "depth":
                ys.append(scene.depth(world.label_size))
            else:
                ys.append(scene.normals(world.label_size))
        return np.stack(xs), np.stack(ys)

    sup_x, sup_y = make(n_support)
    que_x, que_y = make(n_query)
    return Episode(task_id=task_id or kind, subtask_id=int(subtask_id),
                   kind="dense_regression", support_x=sup_x, support_y=sup_y,
                   query_x=que_x, query_y=que_y)


# ---------------------------------------------------------------------------
# vector regression (vanishing point)
# ---------------------------------------------------------------------------


def render_line_bundle(vp: np.ndarray, angles: np.ndarray, size: int,
                       channels: int, width: float,
                       rng: np.random.Generator | None = None,
                       colors: np.ndarray | None = None) -> np.ndarray:
    """Lines through `vp`; pixel lit when within `width` of some line."""
    vv, uu = _grid(size)
    img = np.full((channels, size, size), 0.05)
    if rng is not None:
        img += 0.02 * rng.normal(size=img.shape)
    for i, ang in enumerate(angles):
        # signed distance to the infinite line through vp with direction ang
        d = -np.sin(ang) * (uu - vp[0]) + np.cos(ang) * (vv - vp[1])
        mask = np.abs(d) < width
        color = (colors[i % len(colors)] if colors is not None
                 else np.array([0.9, 0.9, 0.9]))
        img = np.where(mask[None, :, :],
                       np.maximum(img, color[:channels, None, None]), img)
    return np.clip(img, 0.0, 1.0)


def _vp_domain(world: SyntheticWorld, subtask_id: int) -> dict:
    rng = world._rng(_VP_DOMAIN, subtask_id)
    return {
        "n_lines": int(rng.integers(4, 9)),
        "width": float(rng.uniform(0.008, 0.02)),
        "colors": np.stack([_hue_rgb(float(rng.uniform())) for _ in range(3)]),
    }


def sample_vector_regression_episode(world: SyntheticWorld, n_support: int,
                                     n_query: int, pool: str = "train",
                                     episode_index: int = 0,
                                     subtask_id: int | None = None,
                                     task_id: str = "vp") -> Episode:
    """Line bundles converging at a point in [0,1]^2; label is the point."""
    dom_pool = world.domain_pool(pool)
    rng = world._rng(_VP_EPISODE, POOLS[pool], episode_index)
    if subtask_id is None:
        subtask_id = dom_pool[int(rng.integers(len(dom_pool)))]
    elif subtask_id not in dom_pool:
        raise ValueError(f"subtask {subtask_id} not in {pool!r} pool")
    domain = _vp_domain(world, subtask_id)
    lines_meta = []

    def make(n):
        xs, ys = [], []
        for _ in range(n):
            vp = rng.uniform(0.15, 0.85, size=2)
            angles = np.sort(rng.uniform(0, np.pi, size=domain["n_lines"]))
            xs.append(render_line_bundle(vp, angles, world.image_size,
                                         world.channels, domain["width"], rng,
                                         domain["colors"]))
            ys.append(vp.copy())
            # an arbitrary non-vp point on each line, for the oracle
            pts = [(vp + float(rng.uniform(0.2, 0.5))
                    * np.array([np.cos(a), np.sin(a)]), float(a))
                   for a in angles]
            lines_meta.append(pts)
        return np.stack(xs), np.stack(ys)

    sup_x, sup_y = make(n_support)
    que_x, que_y = make(n_query)
    return Episode(task_id=task_id, subtask_id=int(subtask_id),
                   kind="vector_regression", support_x=sup_x, support_y=sup_y,
                   query_x=que_x, query_y=que_y, meta={"lines": lines_meta})


def least_squares_intersection(lines: list) -> np.ndarray:
    """Best intersection point of lines given as (point, angle) pairs."""
    a_rows, b_vals = [], []
    for point, ang in lines:
        n = np.array([-np.sin(ang), np.cos(ang)])
        a_rows.append(n)
        b_vals.append(float(n @ np.asarray(point)))
    sol, *_ = np.linalg.lstsq(np.stack(a_rows), np.array(b_vals), rcond=None)
    return sol


# ---------------------------------------------------------------------------
# image-directory ingestion
# ---------------------------------------------------------------------------


def read_split_classes(root: str | Path) -> dict[str, list[str]]:
    """Read train/val/test class lists; overlapping splits are an error."""
    root = Path(root)
    splits: dict[str, list[str]] = {}
    for name in ("train", "val", "test"):
        f = root / f"{name}.txt"
        if f.exists():
            splits[name] = [ln.strip() for ln in f.read_text(encoding="utf-8").splitlines()
                            if ln.strip()]
    names = list(splits)
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            overlap = set(splits[names[i]]) & set(splits[names[j]])
            if overlap:
                raise ValueError(
                    f"split files {names[i]}.txt and {names[j]}.txt share "
                    f"classes: {sorted(overlap)}")
    return splits


def _load_image(path: Path, image_size: int) -> np.ndarray | None:
    from PIL import Image

    try:
        with Image.open(path) as im:
            im = im.convert("RGB").resize((image_size, image_size),
                                          Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except Exception as exc:  # undecodable file: skip with warning
        warnings.warn(f"skipping undecodable image {path}: {exc}")
        return None
    return arr.transpose(2, 0, 1)


def load_image_directory_episodes(root: str | Path, n_way: int, k_shot: int,
                                  n_query: int, split: str = "train",
                                  image_size: int = 84, seed: int = 0,
                                  episodes: int = 1, task_id: str = "cls"):
    """Yield N-way K-shot episodes from root/<class>/<image> files.

    Only PNG and JPEG files are considered; images are bilinearly resized
    and scaled to [0,1]. Classes with fewer than K+Q usable images are
    excluded with a warning. The episode sequence is a pure function of
    the seed.
    """
    root = Path(root)
    splits = read_split_classes(root)
    if split not in splits:
        raise ValueError(f"no {split}.txt at {root}")
    usable: dict[str, list[Path]] = {}
    for cls in splits[split]:
        files = sorted(p for p in (root / cls).glob("*")
                       if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
        if len(files) < k_shot + n_query:
            warnings.warn(
                f"class {cls!r} has {len(files)} images, need "
                f"{k_shot + n_query}; excluded")
            continue
        usable[cls] = files
    classes = sorted(usable)
    if len(classes) < n_way:
        raise ValueError(
            f"only {len(classes)} usable classes in split {split!r}, "
            f"need {n_way}")
    for ep_i in range(episodes):
        rng = np.random.default_rng(
            np.random.SeedSequence(seed, spawn_key=(_DIR_EPISODE, ep_i)))
        chosen = rng.choice(classes, size=n_way, replace=False)
        sup_x, sup_y, que_x, que_y = [], [], [], []
        for local_idx, cls in enumerate(chosen):
            files = usable[cls]
            order = rng.permutation(len(files))
            picked = []
            for fi in order:
                img = _load_image(files[fi], image_size)
                if img is not None:
                    picked.append(img)
                if len(picked) == k_shot + n_query:
                    break
            if len(picked) < k_shot + n_query:
                raise ValueError(f"class {cls!r} ran out of decodable images")
            sup_x.extend(picked[:k_shot])
            sup_y.extend([local_idx] * k_shot)
            que_x.extend(picked[k_shot:])
            que_y.extend([local_idx] * n_query)
        yield Episode(task_id=task_id, subtask_id=ep_i, kind="classification",
                      support_x=np.stack(sup_x),
                      support_y=np.array(sup_y, dtype=np.int64),
                      query_x=np.stack(que_x),
                      query_y=np.array(que_y, dtype=np.int64),
                      meta={"classes": list(chosen)})


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def metric_threshold_accuracy(pred: np.ndarray, label: np.ndarray,
                              tau: float = 1e-3) -> float:
    """Fraction of elements within tau of the label."""
    pred, label = np.asarray(pred), np.asarray(label)
    if pred.shape != label.shape:
        raise ShapeError(
            f"threshold accuracy: shapes {pred.shape} vs {label.shape} differ")
    if tau < 0:
        raise ValueError(f"tau must be non-negative, got {tau}")
    return float(np.mean(np.abs(pred - label) <= tau))


def metric_nil(support_emb: np.ndarray, support_labels: np.ndarray,
               query_emb: np.ndarray, query_labels: np.ndarray) -> float:
    """Head-free accuracy: each query takes the label of the support
    sample with the highest cosine similarity (ties to the lowest index)."""
    support_emb = np.asarray(support_emb, dtype=np.float64)
    query_emb = np.asarray(query_emb, dtype=np.float64)
    sn = np.linalg.norm(support_emb, axis=1)
    qn = np.linalg.norm(query_emb, axis=1)
    if np.any(sn == 0) or np.any(qn == 0):
        raise ValueError("nil metric: zero-norm embedding")
    sim = (query_emb / qn[:, None]) @ (support_emb / sn[:, None]).T
    nearest = sim.argmax(axis=1)  # first max = lowest support index
    pred = np.asarray(support_labels)[nearest]
    return float(np.mean(pred == np.asarray(query_labels)))


def metric_accuracy_ci(correct: int, total: int) -> tuple[float, float]:
    """Accuracy and its 95% normal-approximation half-width."""
    if total <= 0:
        raise ValueError("accuracy CI needs a positive sample count")
    p = correct / total
    return p, 1.96 * np.sqrt(p * (1.0 - p) / total)


@dataclass
class MetricsRecord:
    """Per-task evaluation result; timings are wall-clock and excluded
    from determinism comparisons."""

    task_id: str
    episode_count: int
    loss: float
    accuracy: float | None = None
    ci_half_width: float | None = None
    nil_accuracy: float | None = None
    mse: float | None = None
    threshold_acc: float | None = None
    adapt_ms: float = 0.0
    infer_ms: float = 0.0

    def key_fields(self) -> dict:
        d = {"task_id": self.task_id, "episode_count": self.episode_count,
             "loss": self.loss, "accuracy": self.accuracy,
             "ci_half_width": self.ci_half_width,
             "nil_accuracy": self.nil_accuracy, "mse": self.mse,
             "threshold_acc": self.threshold_acc}
        return d
