"""Pretraining loop: view sampling, forward/backward, momentum SGD with a
warmup + cosine schedule, the EMA momentum ramp, metrics and checkpoints."""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from . import losses
from .errors import CheckpointError, ConfigError
from .geometry import FeatureGeometry, build_correspondences
from .imaging import (AugConfig, ViewKind, apply_transform, as_float, sample_transform,
                      stack_views)
from .losses import LossBreakdown, LossConfig
from .nn import ModelConfig, ModelPair, ema_update, parameter_groups

METRICS_HEADER = ("step", "loss", "loss_g", "loss_lc", "valid_pairs", "lr", "ema_m")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr_ref: float = 32.0  # learning rate per 256 samples; LARS scales it per layer
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_frac: float = 0.05
    ema_base: float = 0.996
    seed: int = 0
    lars: bool = True
    lars_eta: float = 0.001
    deterministic: bool = True
    data: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    aug: AugConfig = field(default_factory=AugConfig)

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.warmup_frac < 1 or self.warmup_steps >= self.steps:
            raise ConfigError("warmup must be shorter than training")
        if not 0 <= self.ema_base <= 1:
            raise ConfigError(f"ema_base must lie in [0, 1], got {self.ema_base}")
        if self.lr_ref < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("lr_ref, weight_decay must be >= 0 and momentum in [0, 1)")
        self.aug.validate()

    @property
    def base_lr(self) -> float:
        return self.lr_ref * self.batch_size / 256

    @property
    def warmup_steps(self) -> int:
        return int(self.warmup_frac * self.steps)

    @property
    def image_size(self) -> int:
        return self.model.in_size

    @property
    def stride(self) -> int:
        return self.model.stride

    @property
    def aug_for_training(self) -> AugConfig:
        size = self.model.in_size
        return replace(self.aug, out_size=(size, size))


# ---------------------------------------------------------------------------
# schedules


def ema_momentum_at(step: int, total: int, m0: float) -> float:
    """Cosine ramp of the target momentum from ``m0`` (step 0) to 1 (step ``total``)."""
    if total <= 0:
        raise ConfigError("total steps must be positive")
    if not 0 <= step <= total:
        raise ConfigError(f"step {step} outside [0, {total}]")
    if step == 0:
        return m0
    if step == total:
        return 1.0
    return 1.0 - (1.0 - m0) * (math.cos(math.pi * step / total) + 1.0) / 2.0


def lr_at(step: int, total: int, warmup: int, base_lr: float) -> float:
    if warmup >= total:
        raise ConfigError("warmup must be shorter than training")
    if step < warmup:
        return base_lr * step / warmup
    if step >= total:
        return 0.0
    return base_lr * (math.cos(math.pi * (step - warmup) / (total - warmup)) + 1.0) / 2.0


# ---------------------------------------------------------------------------
# optimizer


class MomentumSGD:
    """Heavy-ball SGD with coupled weight decay and an optional LARS trust ratio.

    Velocities live in ``self.velocity`` keyed by parameter name, which keeps
    checkpoints name-addressed. Parameters without a gradient are left alone
    (no decay, no momentum), as for heads whose loss term has weight zero.
    """

    def __init__(self, named_params: Iterable[tuple[str, torch.nn.Parameter]],
                 no_decay: set[str], momentum=0.9, weight_decay=1e-4, lars=False, eta=0.001):
        self.params = dict(named_params)
        self.no_decay = set(no_decay)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lars = lars
        self.eta = eta
        self.velocity = {n: torch.zeros_like(p) for n, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self, lr: float):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            adapt = name not in self.no_decay
            if adapt and self.weight_decay:
                g = g + self.weight_decay * p
            if adapt and self.lars:
                wn, gn = p.norm(), g.norm()
                if wn > 0 and gn > 0:
                    g = g * (self.eta * wn / gn)
            v = self.velocity[name]
            v.mul_(self.momentum).add_(g)
            p.sub_(lr * v)


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    config: TrainConfig
    pair: ModelPair
    optimizer: MomentumSGD
    step: int = 0
    metrics: dict = field(default_factory=lambda: {"degenerate_steps": 0, "loss_sum": 0.0})


def init_state(config: TrainConfig) -> TrainState:
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    pair = ModelPair(config.model, seed=config.seed)
    pair.train()
    groups = parameter_groups(pair)
    opt = MomentumSGD(pair.named_online_parameters(), set(groups["no_decay"]),
                      config.momentum, config.weight_decay, config.lars, config.lars_eta)
    return TrainState(config, pair, opt)


def derive_seed(*keys: int) -> int:
    """Stable 64-bit seed from integer keys (portable SeedSequence hashing)."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


def batch_indices(config: TrainConfig, step: int, n: int) -> np.ndarray:
    """Indices of the images used at ``step``: the step's slice of a per-epoch permutation."""
    bs = config.batch_size
    per_epoch = max(n // bs, 1)
    epoch, slot = divmod(step, per_epoch)
    perm = np.random.default_rng(derive_seed(config.seed, 1, epoch)).permutation(n)
    if n < bs:
        return np.resize(perm, bs)
    return perm[slot * bs:(slot + 1) * bs]


def make_views(images: Sequence[np.ndarray], config: TrainConfig, step: int):
    """Both views and correspondence sets for one batch, from (seed, step, index)."""
    aug = config.aug_for_training
    size = config.model.in_size
    geom = FeatureGeometry(size, size, config.model.stride)
    views_c, views_sc, corr = [], [], []
    for k, img in enumerate(images):
        img = as_float(img)
        src = img.shape[:2]
        spec_c = sample_transform(derive_seed(config.seed, 2, step, k, 0), aug,
                                  ViewKind.COLOR_ONLY, src)
        spec_sc = sample_transform(derive_seed(config.seed, 2, step, k, 1), aug,
                                   ViewKind.SPATIAL_COLOR, src)
        views_c.append(apply_transform(img, spec_c))
        views_sc.append(apply_transform(img, spec_sc))
        corr.append(build_correspondences(spec_c, spec_sc, geom))
    return stack_views(views_c), stack_views(views_sc), corr


def compute_loss(pair: ModelPair, x_c: torch.Tensor, x_sc: torch.Tensor, corr, config: LossConfig):
    """Forward both networks and return ``(total tensor, LossBreakdown)``.

    View c feeds the target network, view sc the online one, for both terms.
    """
    q, online = pair.forward_online(x_sc)
    target = pair.forward_target(x_c)
    loss_g = losses.global_loss(q, target.projection)
    if config.symmetric_global:
        q2, _ = pair.forward_online(x_c)
        loss_g = 0.5 * (loss_g + losses.global_loss(q2, pair.forward_target(x_sc).projection))
    pairs = losses.pack_pairs(corr)
    if config.alpha == 0.0:
        with torch.no_grad():
            loss_lc = losses.local_loss(config.local_variant, target.local, online.local, pairs,
                                        config.tau)
    else:
        loss_lc = losses.local_loss(config.local_variant, target.local, online.local, pairs,
                                    config.tau)
    return losses.combine(loss_g, loss_lc, config, pairs.count)


def train_step(state: TrainState, images: Sequence[np.ndarray]) -> tuple[TrainState, LossBreakdown, dict]:
    """One optimization step on ``images``; mutates and returns ``state``."""
    if len(images) == 0:
        raise ConfigError("empty batch")
    cfg = state.config
    step = state.step
    lr = lr_at(step, cfg.steps, cfg.warmup_steps, cfg.base_lr)
    m = ema_momentum_at(step, cfg.steps, cfg.ema_base)
    x_c, x_sc, corr = make_views(images, cfg, step)
    dtype = next(state.pair.parameters()).dtype
    x_c = torch.from_numpy(x_c).to(dtype)
    x_sc = torch.from_numpy(x_sc).to(dtype)
    state.pair.train()
    total, breakdown = compute_loss(state.pair, x_c, x_sc, corr, cfg.loss)
    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step(lr)
    ema_update(state.pair, m)
    state.optimizer.zero_grad()
    state.step += 1
    state.metrics["loss_sum"] += breakdown.total
    if breakdown.degenerate:
        state.metrics["degenerate_steps"] += 1
    row = {"step": step, "loss": breakdown.total, "loss_g": breakdown.loss_g,
           "loss_lc": breakdown.loss_lc, "valid_pairs": breakdown.valid_pairs, "lr": lr, "ema_m": m}
    return state, breakdown, row


def format_metrics_row(row: dict) -> str:
    out = []
    for key in METRICS_HEADER:
        v = row[key]
        out.append(repr(float(v)) if isinstance(v, float) else str(v))
    return ",".join(out)


def pretrain(config: TrainConfig, images: Sequence[np.ndarray], out_dir=None,
             state: TrainState | None = None, until: int | None = None,
             log: Callable[[str], None] | None = None) -> TrainState:
    """Train from scratch (or resume ``state``) up to step ``until``.

    With ``out_dir``, rows are appended to ``metrics.csv`` and the final state
    is written to ``checkpoint.lcssl``.
    """
    state = state or init_state(config)
    until = config.steps if until is None else min(until, config.steps)
    metrics_fh = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "metrics.csv"
        fresh = state.step == 0 or not path.exists()
        metrics_fh = open(path, "w" if fresh else "a", encoding="utf-8", newline="\n")
        if fresh:
            metrics_fh.write(",".join(METRICS_HEADER) + "\n")
    try:
        while state.step < until:
            idx = batch_indices(config, state.step, len(images))
            _, _, row = train_step(state, [images[i] for i in idx])
            line = format_metrics_row(row)
            if metrics_fh:
                metrics_fh.write(line + "\n")
            if log and (row["step"] % 100 == 0 or state.step == until):
                log(line)
    finally:
        if metrics_fh:
            metrics_fh.close()
    if out_dir is not None:
        save_checkpoint(state, Path(out_dir) / "checkpoint.lcssl")
    return state


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"LCSSL1\0"
FORMAT_VERSION = 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK
    return h


def config_to_dict(config: TrainConfig) -> dict:
    """Flat ``key -> value`` view (nested sections become ``model.x`` etc.)."""
    out = {}
    for f in fields(config):
        v = getattr(config, f.name)
        if f.name in ("model", "loss", "aug"):
            for sf in fields(v):
                sv = getattr(v, sf.name)
                out[f"{f.name}.{sf.name}"] = _plain(sv)
        else:
            out[f.name] = _plain(v)
    return out


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if hasattr(v, "value"):
        return v.value
    return v


def config_from_dict(d: dict) -> TrainConfig:
    top, sections = {}, {"model": {}, "loss": {}, "aug": {}}
    for key, v in d.items():
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in sections:
                raise ConfigError(f"unknown config section in {key!r}")
            sections[sec][name] = _tuplify(v)
        else:
            top[key] = v
    try:
        return TrainConfig(model=ModelConfig(**sections["model"]),
                           loss=LossConfig(**sections["loss"]),
                           aug=AugConfig(**sections["aug"]), **top)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


def _tensors(state: TrainState):
    for name, t in state.pair.state_dict().items():
        yield name, t
    for name, v in state.optimizer.velocity.items():
        yield f"velocity.{name}", v


def checkpoint_bytes(state: TrainState) -> bytes:
    manifest, blocks, offset = [], [], 0
    for name, t in _tensors(state):
        raw = t.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset,
                         "nbytes": len(raw)})
        blocks.append(raw)
        offset += len(raw)
    header = {
        "format": "LCSSL1",
        "version": FORMAT_VERSION,
        "architecture": state.config.model.to_dict(),
        "config": config_to_dict(state.config),
        "step": state.step,
        "rng": {"seed": state.config.seed, "step": state.step},
        "metrics": state.metrics,
        "manifest": manifest,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<Q", len(hdr)) + hdr + b"".join(blocks)
    return body + struct.pack("<Q", fnv1a64(body))


def save_checkpoint(state: TrainState, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    tmp.replace(path)


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from None
    return state_from_bytes(data, str(path))


def state_from_bytes(data: bytes, name: str = "<bytes>") -> TrainState:
    if len(data) < len(MAGIC) + 16:
        raise CheckpointError(f"{name}: truncated file")
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{name}: bad magic, not a checkpoint")
    body, digest = data[:-8], struct.unpack("<Q", data[-8:])[0]
    (hlen,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + hlen > len(body):
        raise CheckpointError(f"{name}: truncated header")
    try:
        header = json.loads(body[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        header = None
    if fnv1a64(body) != digest:
        raise CheckpointError(f"{name}: digest mismatch (truncated or corrupted)")
    if header is None:
        raise CheckpointError(f"{name}: unreadable header")
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{name}: unsupported version {header.get('version')}")
    blob = body[start + hlen:]
    config = config_from_dict(header["config"])
    state = init_state(config)
    expected = dict(_tensors(state))
    entries = {e["name"]: e for e in header["manifest"]}
    if set(entries) != set(expected):
        raise CheckpointError(f"{name}: parameter manifest does not match the architecture")
    with torch.no_grad():
        for key, t in expected.items():
            e = entries[key]
            if list(t.shape) != e["shape"] or e["offset"] + e["nbytes"] > len(blob):
                raise CheckpointError(f"{name}: bad manifest entry for {key}")
            arr = np.frombuffer(blob, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
            t.copy_(torch.from_numpy(arr.reshape(e["shape"]).astype(np.float32)))
    state.step = int(header["step"])
    state.metrics = dict(header["metrics"])
    return state


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
