"""Global BYOL loss, the local contrastive loss with NLL warping, and the two
ablation variants (warp features first / local cosine regression).

Feature maps are ``(B, d, h, w)`` tensors (a leading batch axis is optional
where noted). Target-side inputs are always detached.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError, GeometryError, NumericDomainError, ShapeError
from .geometry import CorrespondenceSet

COS_EPS = 1e-8


class LocalVariant(str, enum.Enum):
    NLL_WARP = "nll_warp"
    FEATURE_WARP = "feature_warp"
    MSE = "mse"


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.1
    tau: float = 0.1
    local_variant: LocalVariant = LocalVariant.NLL_WARP
    symmetric_global: bool = False

    def __post_init__(self):
        object.__setattr__(self, "local_variant", LocalVariant(self.local_variant))
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"loss.alpha must lie in [0, 1], got {self.alpha}")
        if not self.tau > 0:
            raise ConfigError(f"loss.tau must be positive, got {self.tau}")


@dataclass(frozen=True)
class LossBreakdown:
    loss_g: float
    loss_lc: float
    total: float
    valid_pairs: int
    alpha: float

    @property
    def degenerate(self) -> bool:
        """No correspondence in the whole batch; the step was global-only."""
        return self.valid_pairs == 0


def total_loss(loss_g, loss_lc, alpha: float):
    return (1.0 - alpha) * loss_g + alpha * loss_lc


# ---------------------------------------------------------------------------
# global term


def global_loss(q: torch.Tensor, g: torch.Tensor, reduce: bool = True) -> torch.Tensor:
    """``2 - 2 cos(q, g)`` with ``g`` held constant; averaged over a batch."""
    if q.shape != g.shape:
        raise ShapeError(f"global loss inputs differ in shape: {tuple(q.shape)} vs {tuple(g.shape)}")
    g = g.detach()
    qn = q.norm(dim=-1)
    gn = g.norm(dim=-1)
    if bool((qn == 0).any()) or bool((gn == 0).any()):
        raise NumericDomainError("global loss is undefined for a zero-norm embedding")
    per = 2.0 - 2.0 * (q * g).sum(-1) / (qn * gn)
    return per.mean() if reduce else per


# ---------------------------------------------------------------------------
# dense correspondence and NLL


def _flatten(fmap: torch.Tensor) -> torch.Tensor:
    # (B, d, h, w) -> (B, h*w, d)
    return fmap.flatten(2).transpose(1, 2)


def _unit(x: torch.Tensor) -> torch.Tensor:
    return x / (x.norm(dim=-1, keepdim=True) + COS_EPS)


def correspondence_map(f_target_c: torch.Tensor, f_online_sc: torch.Tensor) -> torch.Tensor:
    """Cosine similarity between every location of view c and of view sc.

    ``(d, h, w)`` inputs give an ``(h*w, h*w)`` matrix; ``(B, d, h, w)`` give
    ``(B, h*w, h*w)``. Row ``a`` is a location of view c.
    """
    if f_target_c.shape != f_online_sc.shape:
        raise ShapeError(
            f"feature maps differ in shape: {tuple(f_target_c.shape)} vs {tuple(f_online_sc.shape)}")
    single = f_target_c.dim() == 3
    if single:
        f_target_c, f_online_sc = f_target_c[None], f_online_sc[None]
    if f_target_c.dim() != 4:
        raise ShapeError(f"expected (B, d, h, w) feature maps, got {tuple(f_target_c.shape)}")
    a = _unit(_flatten(f_target_c.detach()))
    b = _unit(_flatten(f_online_sc))
    c = a @ b.transpose(1, 2)
    return c[0] if single else c


def nll_map(c: torch.Tensor, tau: float) -> torch.Tensor:
    """Row-wise ``-log softmax(c / tau)`` using the max-shifted log-sum-exp."""
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    z = c / tau
    shifted = z - z.amax(dim=-1, keepdim=True).detach()
    # log-sum minus shifted logit: no large intermediate to round in f32
    return torch.log(torch.exp(shifted).sum(dim=-1, keepdim=True)) - shifted


# ---------------------------------------------------------------------------
# bilinear sampling


def _check_support(u: torch.Tensor, v: torch.Tensor, h: int, w: int):
    if bool(((u < 0) | (u > w - 1) | (v < 0) | (v > h - 1)).any()):
        raise GeometryError("sample point outside the bilinear support of the grid")


def bilinear_sample(grid: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Sample ``grid`` (``(P, h, w)`` or ``(P, C, h, w)``) at ``(u[k], v[k])`` for row ``k``.

    Neighbors are clamped at the last row/column, and at integer points the
    result is exactly the node value.
    """
    h, w = grid.shape[-2:]
    _check_support(u, v, h, w)
    x0 = torch.floor(u).long()
    y0 = torch.floor(v).long()
    x1 = torch.clamp(x0 + 1, max=w - 1)
    y1 = torch.clamp(y0 + 1, max=h - 1)
    tx = (u - x0).to(grid.dtype)
    ty = (v - y0).to(grid.dtype)
    k = torch.arange(grid.shape[0])
    if grid.dim() == 3:
        g00, g01 = grid[k, y0, x0], grid[k, y0, x1]
        g10, g11 = grid[k, y1, x0], grid[k, y1, x1]
    else:
        tx, ty = tx[:, None], ty[:, None]
        g00, g01 = grid[k, :, y0, x0], grid[k, :, y0, x1]
        g10, g11 = grid[k, :, y1, x0], grid[k, :, y1, x1]
    return (1 - ty) * ((1 - tx) * g00 + tx * g01) + ty * ((1 - tx) * g10 + tx * g11)


def interp_nll(nll_row: torch.Tensor, p_sc, h: int | None = None, w: int | None = None):
    """NLL of one view-c location at continuous ``p_sc = (u, v)`` in view sc.

    ``nll_row`` is either ``(h, w)`` or flat ``(h*w,)`` with ``h, w`` given.
    """
    if nll_row.dim() == 1:
        if h is None or w is None or h * w != nll_row.shape[0]:
            raise ShapeError("flat NLL row needs matching h and w")
        nll_row = nll_row.reshape(h, w)
    u, v = p_sc
    u = torch.as_tensor([u], dtype=torch.float64)
    v = torch.as_tensor([v], dtype=torch.float64)
    return bilinear_sample(nll_row[None], u, v)[0]


# ---------------------------------------------------------------------------
# local losses


@dataclass(frozen=True)
class PackedPairs:
    """Correspondences of a batch concatenated with their image index."""

    image: torch.Tensor  # (P,) long
    index_c: torch.Tensor  # (P,) long
    u: torch.Tensor  # (P,) float64
    v: torch.Tensor
    batch_size: int

    @property
    def count(self) -> int:
        return int(self.image.shape[0])

    def counts(self) -> torch.Tensor:
        return torch.bincount(self.image, minlength=self.batch_size)


def pack_pairs(corr_sets: Sequence[CorrespondenceSet]) -> PackedPairs:
    image = np.concatenate([np.full(len(c), b, dtype=np.int64) for b, c in enumerate(corr_sets)])
    index = np.concatenate([c.index_c for c in corr_sets]).astype(np.int64)
    coords = np.concatenate([c.coords_sc.reshape(-1, 2) for c in corr_sets])
    return PackedPairs(torch.from_numpy(image), torch.from_numpy(index),
                       torch.from_numpy(coords[:, 0].copy()), torch.from_numpy(coords[:, 1].copy()),
                       len(corr_sets))


def _image_means(values: torch.Tensor, pairs: PackedPairs):
    """Mean of per-pair values within each image, then over non-empty images."""
    counts = pairs.counts()
    sums = torch.zeros(pairs.batch_size, dtype=values.dtype).index_add(0, pairs.image, values)
    valid = counts > 0
    if not bool(valid.any()):
        return None
    return (sums[valid] / counts[valid].to(values.dtype)).mean()


def _check_maps(f_c, f_sc, pairs):
    if f_c.shape != f_sc.shape:
        raise ShapeError(f"feature maps differ in shape: {tuple(f_c.shape)} vs {tuple(f_sc.shape)}")
    if f_c.dim() != 4 or f_c.shape[0] != pairs.batch_size:
        raise ShapeError(
            f"expected ({pairs.batch_size}, d, h, w) feature maps, got {tuple(f_c.shape)}")


def lc_loss(corr: CorrespondenceSet, nll: torch.Tensor) -> torch.Tensor:
    """Mean warped NLL over one image's correspondences; ``nll`` is ``(h*w, h*w)``."""
    if corr.valid_count == 0:
        raise GeometryError("empty correspondence set")
    pairs = pack_pairs([corr])
    return _nll_warp_from_map(nll[None], pairs, corr.geometry.h, corr.geometry.w)


def _nll_warp_from_map(nll: torch.Tensor, pairs: PackedPairs, h: int, w: int):
    rows = nll[pairs.image, pairs.index_c].reshape(-1, h, w)
    return _image_means(bilinear_sample(rows, pairs.u, pairs.v), pairs)


def local_loss_nll_warp(f_target_c, f_online_sc, pairs: PackedPairs, tau: float):
    _check_maps(f_target_c, f_online_sc, pairs)
    h, w = f_target_c.shape[-2:]
    nll = nll_map(correspondence_map(f_target_c, f_online_sc), tau)
    return _nll_warp_from_map(nll, pairs, h, w)


def _warped_online(f_online_sc, pairs: PackedPairs):
    return bilinear_sample(f_online_sc[pairs.image], pairs.u, pairs.v)  # (P, d)


def _target_at(f_target_c, pairs: PackedPairs):
    flat = _flatten(f_target_c.detach())  # (B, N, d)
    return flat[pairs.image, pairs.index_c]


def local_loss_feature_warp(f_target_c, f_online_sc, pairs: PackedPairs, tau: float):
    """Warp online features to each target point, then contrast within the image.

    Positives are a pair's own warped vector; negatives are the warped vectors
    of the image's other pairs.
    """
    _check_maps(f_target_c, f_online_sc, pairs)
    anchors = _unit(_target_at(f_target_c, pairs))
    warped = _unit(_warped_online(f_online_sc, pairs))
    values = []
    start = 0
    for n in pairs.counts().tolist():
        if n:
            sl = slice(start, start + n)
            nll = nll_map(anchors[sl] @ warped[sl].T, tau)
            values.append(torch.diagonal(nll))
        start += n
    if not values:
        return None
    per_pair = torch.cat(values)
    return _image_means(per_pair, pairs)


def local_loss_mse(f_target_c, f_online_sc, pairs: PackedPairs):
    """``2 - 2 cos`` between each target vector and the warped online vector."""
    _check_maps(f_target_c, f_online_sc, pairs)
    anchors = _unit(_target_at(f_target_c, pairs))
    warped = _unit(_warped_online(f_online_sc, pairs))
    return _image_means(2.0 - 2.0 * (anchors * warped).sum(-1), pairs)


def local_loss(variant: LocalVariant, f_target_c, f_online_sc,
               corr_sets: Sequence[CorrespondenceSet] | PackedPairs, tau: float):
    """Batch local loss; ``None`` when no image has a correspondence."""
    pairs = corr_sets if isinstance(corr_sets, PackedPairs) else pack_pairs(corr_sets)
    if pairs.count == 0:
        return None
    variant = LocalVariant(variant)
    if variant is LocalVariant.NLL_WARP:
        return local_loss_nll_warp(f_target_c, f_online_sc, pairs, tau)
    if variant is LocalVariant.FEATURE_WARP:
        return local_loss_feature_warp(f_target_c, f_online_sc, pairs, tau)
    return local_loss_mse(f_target_c, f_online_sc, pairs)


def combine(loss_g: torch.Tensor, loss_lc: torch.Tensor | None, config: LossConfig,
            valid_pairs: int):
    """Total loss tensor for backprop plus its float breakdown.

    A term whose weight is exactly zero is left out of the graph, so its
    gradient contributes nothing at all (not even a signed zero).
    An all-empty batch falls back to the global loss alone.
    """
    alpha = config.alpha
    if loss_lc is None:
        lg = float(loss_g.detach())
        return loss_g, LossBreakdown(lg, 0.0, lg, 0, alpha)
    if alpha == 0.0:
        out = loss_g
    elif alpha == 1.0:
        out = loss_lc
    else:
        out = total_loss(loss_g, loss_lc, alpha)
    lg, llc = float(loss_g.detach()), float(loss_lc.detach())
    return out, LossBreakdown(lg, llc, total_loss(lg, llc, alpha), valid_pairs, alpha)
