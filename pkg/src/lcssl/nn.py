"""Networks: a small conv encoder, BYOL heads, the local projection branch and
the EMA-linked online/target pair.

Autodiff, convolutions and float32/float64 tensors come from torch.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError

NORM_MODES = ("batch", "running", "none")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture. ``stages`` lists ``(out_channels, downsample)`` per stage."""

    in_size: int = 64
    # the last stage keeps stride 8 and widens each cell's context
    stages: tuple[tuple[int, int], ...] = ((32, 2), (64, 2), (128, 2), (128, 1))
    convs_per_stage: int = 1
    proj_hidden: int = 256
    proj_dim: int = 64
    pred_hidden: int = 256
    local_mid: int = 128
    local_dim: int = 64
    norm: str = "batch"

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(tuple(int(v) for v in s) for s in self.stages))
        if self.norm not in NORM_MODES:
            raise ConfigError(f"model.norm must be one of {NORM_MODES}, got {self.norm!r}")
        if not self.stages or any(c <= 0 or d <= 0 for c, d in self.stages):
            raise ConfigError(f"bad encoder stages {self.stages}")
        if self.convs_per_stage < 1:
            raise ConfigError("model.convs_per_stage must be >= 1")
        if self.in_size % self.stride:
            raise ConfigError(f"input size {self.in_size} not divisible by stride {self.stride}")

    @property
    def stride(self) -> int:
        return math.prod(d for _, d in self.stages)

    @property
    def feature_dim(self) -> int:
        return self.stages[-1][0]

    @property
    def grid(self) -> int:
        return self.in_size // self.stride

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        return d


# Paper-scale dimensions, kept for reference; far too large for CPU training.
IMAGENET_SCALE_HEADS = dict(proj_hidden=4096, proj_dim=256, pred_hidden=4096,
                            local_mid=2048, local_dim=256)


class Norm(nn.Module):
    """Per-channel normalization over the batch (and spatial) axes.

    ``batch``: normalize with batch statistics while training, running
    statistics in eval. ``running``: always normalize with the running
    statistics (they are refreshed from each training batch first), which
    stays usable at tiny batch sizes. ``none``: identity.

    With ``track_stats=False`` the running buffers are never written by a
    forward pass; the target network uses this since its buffers follow the
    online ones by EMA.
    """

    def __init__(self, channels: int, mode: str = "batch", momentum: float = 0.1,
                 eps: float = 1e-5, track_stats: bool = True):
        super().__init__()
        self.mode = mode
        self.momentum = momentum
        self.eps = eps
        self.track_stats = track_stats
        if mode != "none":
            self.weight = nn.Parameter(torch.ones(channels))
            self.bias = nn.Parameter(torch.zeros(channels))
            self.register_buffer("running_mean", torch.zeros(channels))
            self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x):
        if self.mode == "none":
            return x
        if self.mode == "batch":
            if self.training:
                if self.track_stats:
                    return F.batch_norm(x, self.running_mean, self.running_var, self.weight,
                                        self.bias, True, self.momentum, self.eps)
                return F.batch_norm(x, None, None, self.weight, self.bias, True, 0.0, self.eps)
        elif self.training and self.track_stats:
            with torch.no_grad():
                dims = [0] + list(range(2, x.dim()))
                n = x.numel() // x.shape[1]
                mean = x.mean(dims)
                var = x.var(dims, unbiased=n > 1)
                self.running_mean.mul_(1 - self.momentum).add_(mean, alpha=self.momentum)
                self.running_var.mul_(1 - self.momentum).add_(var, alpha=self.momentum)
        # clones: later in-place refreshes must not touch tensors saved for backward
        return F.batch_norm(x, self.running_mean.clone(), self.running_var.clone(), self.weight,
                            self.bias, False, 0.0, self.eps)


def _conv(cin, cout, k, stride, norm):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=norm == "none")


class Encoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        layers = []
        cin = 3
        for cout, down in config.stages:
            for k in range(config.convs_per_stage):
                layers += [_conv(cin, cout, 3, down if k == 0 else 1, config.norm),
                           Norm(cout, config.norm), nn.ReLU()]
                cin = cout
        self.body = nn.Sequential(*layers)

    @property
    def final_conv(self) -> nn.Conv2d:
        return [m for m in self.body if isinstance(m, nn.Conv2d)][-1]

    def forward(self, x):
        size = self.config.in_size
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != size or x.shape[3] != size:
            raise ShapeError(f"encoder expects (B, 3, {size}, {size}), got {tuple(x.shape)}")
        fmap = self.body(x)
        return fmap, fmap.mean(dim=(2, 3))


class MLP(nn.Module):
    """Linear -> Norm -> ReLU -> Linear, the BYOL projector/predictor shape."""

    def __init__(self, cin, hidden, cout, norm="batch"):
        super().__init__()
        self.fc1 = nn.Linear(cin, hidden)
        self.norm = Norm(hidden, norm)
        self.fc2 = nn.Linear(hidden, cout)

    def forward(self, x):
        if x.dim() != 2 or x.shape[1] != self.fc1.in_features:
            raise ShapeError(f"MLP expects (B, {self.fc1.in_features}), got {tuple(x.shape)}")
        return self.fc2(F.relu(self.norm(self.fc1(x))))


class LocalProjector(nn.Module):
    """1x1 conv -> Norm -> ReLU -> 1x1 conv on a feature map."""

    def __init__(self, cin, mid, cout, norm="batch"):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, mid, 1)
        self.norm = Norm(mid, norm)
        self.conv2 = nn.Conv2d(mid, cout, 1)

    def forward(self, fmap):
        if fmap.dim() != 4 or fmap.shape[1] != self.conv1.in_channels:
            raise ShapeError(
                f"local projector expects (B, {self.conv1.in_channels}, h, w), got {tuple(fmap.shape)}")
        return self.conv2(F.relu(self.norm(self.conv1(fmap))))


class BranchOutput(NamedTuple):
    features: torch.Tensor  # (B, D, h, w) encoder map
    pooled: torch.Tensor  # (B, D)
    projection: torch.Tensor  # (B, d_g)
    local: torch.Tensor  # (B, d_l, h, w)


class Branch(nn.Module):
    """Encoder + projector + local projector; shared by online and target."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.encoder = Encoder(config)
        d = config.feature_dim
        self.projector = MLP(d, config.proj_hidden, config.proj_dim, config.norm)
        self.local_projector = LocalProjector(d, config.local_mid, config.local_dim, config.norm)

    def forward(self, x) -> BranchOutput:
        fmap, pooled = self.encoder(x)
        return BranchOutput(fmap, pooled, self.projector(pooled), self.local_projector(fmap))


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    """He fan-in normal for conv/linear weights, zero biases, unit norm scales."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu",
                                    generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ModelPair(nn.Module):
    """Online network (with predictor) and its EMA target (without)."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(int(seed))
        self.online = Branch(config)
        self.predictor = MLP(config.proj_dim, config.pred_hidden, config.proj_dim, config.norm)
        init_weights(self.online, gen)
        init_weights(self.predictor, gen)
        self.target = copy.deepcopy(self.online)
        for p in self.target.parameters():
            p.requires_grad_(False)
        for m in self.target.modules():
            if isinstance(m, Norm):
                m.track_stats = False

    def online_parameters(self):
        yield from self.online.parameters()
        yield from self.predictor.parameters()

    def named_online_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith("target."):
                yield name, p

    def forward_online(self, x):
        """Returns ``(prediction q, BranchOutput)``."""
        out = self.online(x)
        return self.predictor(out.projection), out

    @torch.no_grad()
    def forward_target(self, x) -> BranchOutput:
        out = self.target(x)
        return BranchOutput(*(t.detach() for t in out))


def encoder_forward(pair: ModelPair, x, online: bool = True):
    """Feature map and its spatial mean from the online or target encoder."""
    branch = pair.online if online else pair.target
    return branch.encoder(x)


def heads_forward(pair: ModelPair, pooled, feature_map, online: bool = True):
    """``(q_online or g_target, local map)`` from encoder outputs."""
    if online:
        q = pair.predictor(pair.online.projector(pooled))
        return q, pair.online.local_projector(feature_map)
    with torch.no_grad():
        return pair.target.projector(pooled), pair.target.local_projector(feature_map)


def ema_pairs(pair: ModelPair):
    """``(target_tensor, online_tensor)`` for every shared parameter and buffer."""
    online = dict(pair.online.named_parameters())
    online.update(pair.online.named_buffers())
    target = dict(pair.target.named_parameters())
    target.update(pair.target.named_buffers())
    for name, t in target.items():
        yield t, online[name]


@torch.no_grad()
def ema_update(pair: ModelPair, m: float) -> None:
    """``target <- m * target + (1 - m) * online`` in place."""
    if not 0.0 <= m <= 1.0:
        raise ConfigError(f"EMA momentum must lie in [0, 1], got {m}")
    for t, o in ema_pairs(pair):
        t.copy_(m * t + (1.0 - m) * o)


def parameter_groups(pair: ModelPair) -> dict[str, list[str]]:
    """Online parameter names split by weight-decay eligibility.

    Biases and normalization scales/shifts go to ``no_decay``.
    """
    groups = {"decay": [], "no_decay": []}
    norm_names = {f"{mod_name}.{p}" for mod_name, mod in pair.named_modules()
                  if isinstance(mod, Norm) for p in ("weight", "bias")}
    for name, _ in pair.named_online_parameters():
        key = "no_decay" if name in norm_names or name.endswith(".bias") else "decay"
        groups[key].append(name)
    return groups


__all__ = [
    "ModelConfig", "Norm", "Encoder", "MLP", "LocalProjector", "Branch", "BranchOutput",
    "ModelPair", "encoder_forward", "heads_forward", "ema_update", "parameter_groups",
    "IMAGENET_SCALE_HEADS",
]
