"""Diagnostics: argmax match maps, the flip+color correspondence test, few-shot
linear probing on frozen features, and collapse statistics."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError, ShapeError
from .geometry import FeatureGeometry, flip_ground_truth_flat
from .imaging import (AugConfig, TransformSpec, ViewKind, apply_transform, as_float,
                      sample_transform, stack_views, to_uint8)
from .nn import ModelPair

# Colors are identical for both views; only the flip differs in the test.
FLIP_EVAL_AUG = AugConfig(blur_p=(0.5, 0.5), solarize_p=(0.0, 0.0))


@dataclass(frozen=True)
class MatchMap:
    """For each location of view 1 (row-major), its best match in view 2."""

    index: np.ndarray  # (h*w,) flat indices into view 2
    similarity: np.ndarray  # (h*w,)
    h: int
    w: int


def _cosine_matrix(f1: np.ndarray, f2: np.ndarray) -> np.ndarray:
    a = f1.reshape(f1.shape[0], -1).T.astype(np.float64)
    b = f2.reshape(f2.shape[0], -1).T.astype(np.float64)
    a = a / (np.linalg.norm(a, axis=1, keepdims=True) + 1e-8)
    b = b / (np.linalg.norm(b, axis=1, keepdims=True) + 1e-8)
    return a @ b.T


def match_map(f1, f2) -> MatchMap:
    """Argmax-cosine matching of two ``(d, h, w)`` maps; ties go to the lowest index."""
    f1 = np.asarray(f1.detach() if isinstance(f1, torch.Tensor) else f1)
    f2 = np.asarray(f2.detach() if isinstance(f2, torch.Tensor) else f2)
    if f1.shape != f2.shape or f1.ndim != 3:
        raise ShapeError(f"match_map needs equal (d, h, w) maps, got {f1.shape} and {f2.shape}")
    sim = _cosine_matrix(f1, f2)
    idx = np.argmax(sim, axis=1)
    return MatchMap(idx, np.clip(sim[np.arange(len(idx)), idx], -1.0, 1.0), f1.shape[1], f1.shape[2])


@torch.no_grad()
def embed(pair: ModelPair, views: np.ndarray, use_online: bool = False,
          batch_size: int = 64) -> dict[str, np.ndarray]:
    """Eval-mode forward of ``(N, 3, H, W)`` views; returns local maps, pooled
    encoder outputs and global projections as numpy arrays."""
    was_training = pair.training
    pair.eval()
    branch = pair.online if use_online else pair.target
    dtype = next(pair.parameters()).dtype
    local, pooled, proj = [], [], []
    try:
        for s in range(0, len(views), batch_size):
            out = branch(torch.from_numpy(views[s:s + batch_size]).to(dtype))
            local.append(out.local.numpy())
            pooled.append(out.pooled.numpy())
            proj.append(out.projection.numpy())
    finally:
        pair.train(was_training)
    return dict(local=np.concatenate(local), pooled=np.concatenate(pooled),
                projection=np.concatenate(proj))


def flip_view_specs(seed: int, src_size, aug: AugConfig, out_size) -> tuple[TransformSpec, TransformSpec]:
    """View 1: color ops only. View 2: horizontal flip plus independent color ops."""
    aug = replace(aug, out_size=tuple(out_size))
    s1 = sample_transform(seed, aug, ViewKind.COLOR_ONLY, src_size)
    s2 = sample_transform(seed + 1, aug, ViewKind.COLOR_ONLY, src_size)
    s2 = replace(s2, kind=ViewKind.SPATIAL_COLOR, flip=True)
    return s1, s2


def flip_views(images: Sequence[np.ndarray], aug: AugConfig, out_size, seed: int = 0,
               flip: bool = True):
    v1, v2 = [], []
    for k, img in enumerate(images):
        img = as_float(img)
        s1, s2 = flip_view_specs(_eval_seed(seed, k), img.shape[:2], aug, out_size)
        if not flip:
            s2 = replace(s1)
        v1.append(apply_transform(img, s1))
        v2.append(apply_transform(img, s2))
    return stack_views(v1), stack_views(v2)


def _eval_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, 7, k]).generate_state(1, np.uint64)[0]) >> 1


def flip_correspondence_accuracy(pair: ModelPair, images: Sequence[np.ndarray],
                                 aug: AugConfig = FLIP_EVAL_AUG, seed: int = 0,
                                 use_online: bool = False, flip: bool = True) -> float:
    """Fraction of grid locations whose argmax match is the mirrored location.

    ``flip=False`` compares a view with itself (ground truth is the identity).
    """
    if len(images) == 0:
        raise ConfigError("flip accuracy needs at least one image")
    size = pair.config.in_size
    geom = FeatureGeometry(size, size, pair.config.stride)
    v1, v2 = flip_views(images, aug, (size, size), seed, flip)
    f1 = embed(pair, v1, use_online)["local"]
    f2 = embed(pair, v2, use_online)["local"]
    truth = flip_ground_truth_flat(geom) if flip else np.arange(geom.n)
    hits = 0
    for a, b in zip(f1, f2):
        hits += int((match_map(a, b).index == truth).sum())
    return hits / (len(images) * geom.n)


# ---------------------------------------------------------------------------
# few-shot probe


def fit_logreg(x: np.ndarray, y: np.ndarray, n_classes: int, iters: int = 100,
               lr: float = 1.0, l2: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Multinomial logistic regression by full-batch gradient descent."""
    n, d = x.shape
    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    for _ in range(iters):
        z = x @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (x.T @ g + l2 * w)
        b -= lr * g.sum(axis=0)
    return w, b


@dataclass(frozen=True)
class ProbeResult:
    mean: float
    stderr: float
    episodes: int
    accuracies: np.ndarray

    def __str__(self):
        return f"{self.mean:.4f} +/- {self.stderr:.4f} ({self.episodes} episodes)"


def few_shot_probe_features(features: np.ndarray, labels: np.ndarray, n_way: int = 5,
                            k_shot: int = 5, episodes: int = 200, seed: int = 0,
                            n_query: int = 15, shuffle_labels: bool = False) -> ProbeResult:
    """Episodic n-way k-shot accuracy of a logistic-regression probe.

    ``shuffle_labels`` permutes the support labels inside every episode, the
    chance-level control: queries keep their true labels, so the expected
    accuracy is exactly ``1 / n_way``.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    x = features / np.maximum(np.linalg.norm(features, axis=1, keepdims=True), 1e-12)
    classes = np.unique(labels)
    by_class = {c: np.flatnonzero(labels == c) for c in classes}
    eligible = [c for c in classes if len(by_class[c]) >= k_shot + n_query]
    if len(eligible) < n_way:
        raise ConfigError(
            f"need {n_way} classes with >= {k_shot + n_query} images, found {len(eligible)}")
    rng = np.random.default_rng(seed)
    accs = np.empty(episodes)
    for e in range(episodes):
        chosen = rng.choice(eligible, n_way, replace=False)
        sx, sy, qx, qy = [], [], [], []
        for j, c in enumerate(chosen):
            pick = rng.choice(by_class[c], k_shot + n_query, replace=False)
            sx.append(x[pick[:k_shot]])
            qx.append(x[pick[k_shot:]])
            sy += [j] * k_shot
            qy += [j] * n_query
        sy = np.array(sy)
        if shuffle_labels:
            sy = rng.permutation(sy)
        w, b = fit_logreg(np.concatenate(sx), sy, n_way)
        pred = np.argmax(np.concatenate(qx) @ w + b, axis=1)
        accs[e] = np.mean(pred == np.array(qy))
    stderr = float(accs.std(ddof=1) / np.sqrt(episodes)) if episodes > 1 else 0.0
    return ProbeResult(float(accs.mean()), stderr, episodes, accs)


def few_shot_probe(pair: ModelPair, images: Sequence[np.ndarray], labels, n_way: int = 5,
                   k_shot: int = 5, episodes: int = 200, seed: int = 0,
                   use_online: bool = True, n_query: int = 15,
                   shuffle_labels: bool = False) -> ProbeResult:
    """Probe frozen pooled encoder outputs of un-augmented images."""
    size = pair.config.in_size
    for img in images:
        if img.shape[:2] != (size, size):
            raise ShapeError(f"probe images must be {size}x{size}, got {img.shape[:2]}")
    views = stack_views([as_float(i) for i in images])
    feats = embed(pair, views, use_online)["pooled"]
    return few_shot_probe_features(feats, labels, n_way, k_shot, episodes, seed, n_query,
                                   shuffle_labels)


# ---------------------------------------------------------------------------
# collapse


def collapse_stats(embeddings: np.ndarray) -> tuple[float, float]:
    """``(mean per-dimension std, mean pairwise cosine)`` of L2-normalized rows."""
    z = np.asarray(embeddings, dtype=np.float64)
    if z.shape[0] < 2:
        raise ConfigError("collapse metrics need at least two embeddings")
    z = z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    n = z.shape[0]
    gram = z @ z.T
    mean_cos = (gram.sum() - np.trace(gram)) / (n * (n - 1))
    return float(z.std(axis=0).mean()), float(mean_cos)


def collapse_metrics(pair: ModelPair, images: Sequence[np.ndarray],
                     use_online: bool = True) -> tuple[float, float]:
    """Collapse statistics of the global projections of un-augmented images."""
    emb = embed(pair, stack_views([as_float(i) for i in images]), use_online)["projection"]
    return collapse_stats(emb)


# ---------------------------------------------------------------------------
# overlay


def _draw_line(canvas: np.ndarray, p0, p1, color) -> None:
    (x0, y0), (x1, y1) = p0, p1
    n = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
    xs = np.rint(np.linspace(x0, x1, n)).astype(int)
    ys = np.rint(np.linspace(y0, y1, n)).astype(int)
    ok = (xs >= 0) & (xs < canvas.shape[1]) & (ys >= 0) & (ys < canvas.shape[0])
    canvas[ys[ok], xs[ok]] = color


def match_overlay(view1: np.ndarray, view2: np.ndarray, matches: MatchMap,
                  truth: np.ndarray, stride: int, scale: int = 4) -> np.ndarray:
    """Side-by-side uint8 image with one line per grid location of view 1.

    Correct matches are drawn green, wrong ones red.
    """
    a = np.repeat(np.repeat(to_uint8(view1), scale, 0), scale, 1)
    b = np.repeat(np.repeat(to_uint8(view2), scale, 0), scale, 1)
    canvas = np.concatenate([a, b], axis=1)
    offset = a.shape[1]
    w = matches.w
    for src, dst in enumerate(matches.index):
        i, j = divmod(src, w)
        k, l = divmod(int(dst), w)
        p0 = (((j + 0.5) * stride - 0.5) * scale, ((i + 0.5) * stride - 0.5) * scale)
        p1 = (((l + 0.5) * stride - 0.5) * scale + offset, ((k + 0.5) * stride - 0.5) * scale)
        color = (0, 220, 0) if dst == truth[src] else (230, 0, 0)
        _draw_line(canvas, p0, p1, color)
    return canvas
