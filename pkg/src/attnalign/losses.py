"""Alignment objectives: composite mask loss, causal attention decoder, SGA/SPA,
and the total training objective.

The composite loss is a weighted sum of mean BCE, (1 - soft Dice) with global
sums and smoothing 1.0, and mean squared error. SGA supervises decoded v2t
grounding maps for {sub, obj, verb}; SPA supervises decoded v2v propagation
maps for {sub, obj} only. Multi-layer losses are averaged across the
supervised layers. Decoder input maps aggregate heads by mean.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
from torch import nn

from .config import PATCH, TEMPORAL_RATE, ModelConfig, pixel_frames
from .errors import ConfigurationError, DataError, NumericsError
from .grounding import TokenSetSpec, grounding_map
from .model import AttentionRecord, ToyDiT
from .propagation import QuerySet, propagation_map

CLAMP_EPS = 1e-7
DICE_SMOOTHING = 1.0

# Full-scale supervised-layer constants, kept as documented fixtures only;
# the toy model discovers its own dominant layers.
FULL_SCALE_GROUNDING_LAYERS = (7, 11)
FULL_SCALE_PROPAGATION_LAYERS = (12,)


@dataclass(frozen=True)
class LossWeights:
    beta_bce: float = 1.0
    beta_dice: float = 1.0
    beta_l2: float = 1.0
    lambda_sga: float = 1.0
    lambda_spa: float = 1.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ConfigurationError(f"{name} must be nonnegative, got {value}")


def composite_loss(x: torch.Tensor, y: torch.Tensor, w: LossWeights) -> torch.Tensor:
    """BCE + (1 - soft Dice) + L2 between a soft prediction and a binary target."""
    if x.shape != y.shape:
        raise ConfigurationError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    y = y.to(x.dtype)
    if not torch.logical_or(y == 0, y == 1).all():
        raise DataError("composite_loss target must be binary")
    x = x.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
    bce = -(y * torch.log(x) + (1.0 - y) * torch.log(1.0 - x)).mean()
    intersection = (x * y).sum()
    dice = (2.0 * intersection + DICE_SMOOTHING) / (x.sum() + y.sum() + DICE_SMOOTHING)
    l2 = ((x - y) ** 2).mean()
    return w.beta_bce * bce + w.beta_dice * (1.0 - dice) + w.beta_l2 * l2


@dataclass
class SupervisionTargets:
    """Pixel-space binary tracks for the three roles; verb is the OR of the others."""

    m_sub: torch.Tensor
    m_obj: torch.Tensor
    m_verb: torch.Tensor

    def __post_init__(self):
        expected = torch.logical_or(self.m_sub != 0, self.m_obj != 0)
        if not torch.equal(expected, self.m_verb != 0):
            raise DataError("m_verb must be the elementwise OR of m_sub and m_obj")

    def role(self, name: str) -> torch.Tensor:
        return {"sub": self.m_sub, "obj": self.m_obj, "verb": self.m_verb}[name]


class _CausalConv3d(nn.Conv3d):
    """Conv3d padded symmetrically in space and only into the past in time."""

    def forward(self, x):
        kt, kh, kw = self.kernel_size
        x = nn.functional.pad(x, (kw // 2, kw // 2, kh // 2, kh // 2, kt - 1, 0))
        return self._conv_forward(x, self.weight, self.bias)


class CausalDecoder(nn.Module):
    """Temporal-causal upsampler from latent-grid maps to pixel-grid soft masks.

    Frame 0 passes through; every later latent step is repeated four times
    before two conv+spatial-x2 blocks, giving F_pix = 1 + 4*(F_lat - 1). No
    operation looks at future latent steps, so earlier pixel frames are
    bitwise independent of later-step perturbations.
    """

    def __init__(self, config: ModelConfig, channels: int = 8):
        super().__init__()
        self.config = config
        # attention entries scale like 1/seq_len; the gain lifts map inputs to
        # O(1) so the conv stack starts in its responsive range
        self.input_gain = float(config.seq_len)
        self.conv1 = _CausalConv3d(1, channels, kernel_size=3)
        self.conv2 = _CausalConv3d(channels, channels, kernel_size=3)
        self.head = nn.Conv3d(channels, 1, kernel_size=1)
        self.to(config.torch_dtype)
        gen = torch.Generator().manual_seed(config.seed ^ 0xDEC0DE)
        with torch.no_grad():
            for p in self.parameters():
                if p.ndim > 1:
                    p.copy_((0.05 * torch.randn(p.shape, generator=gen, dtype=torch.float64)).to(p.dtype))
                else:
                    p.fill_(0.0)

    def forward(self, latent_map: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        f_lat, h_lat, w_lat = latent_map.shape
        if (h_lat, w_lat) != (cfg.latent_height, cfg.latent_width):
            raise ConfigurationError(
                f"map grid {(h_lat, w_lat)} does not match decoder grid "
                f"{(cfg.latent_height, cfg.latent_width)}"
            )
        index = [0] + [t for t in range(1, f_lat) for _ in range(TEMPORAL_RATE)]
        x = (self.input_gain * latent_map)[index][None, None]   # [1, 1, F_pix, H, W]
        x = nn.functional.gelu(self.conv1(x))
        x = nn.functional.interpolate(x, scale_factor=(1, 2, 2), mode="nearest")
        x = nn.functional.gelu(self.conv2(x))
        x = nn.functional.interpolate(x, scale_factor=(1, 2, 2), mode="nearest")
        x = torch.sigmoid(self.head(x))
        return x[0, 0]


def decode_attention(heatmap, decoder: CausalDecoder) -> torch.Tensor:
    """Decode a grounding/propagation map to a pixel-space soft mask track."""
    values = heatmap if torch.is_tensor(heatmap) else heatmap.values
    if values.ndim != 3:
        raise ConfigurationError(f"expected [F, H, W] map, got shape {tuple(values.shape)}")
    out = decoder(values)
    expected_f = pixel_frames(values.shape[0])
    if out.shape != (expected_f, values.shape[1] * PATCH, values.shape[2] * PATCH):
        raise ConfigurationError(f"decoder produced unexpected shape {tuple(out.shape)}")
    return out


def sga_loss(
    records: list[AttentionRecord],
    specs: dict[str, TokenSetSpec],
    targets: SupervisionTargets,
    decoder: CausalDecoder,
    weights: LossWeights,
    config: ModelConfig,
) -> torch.Tensor:
    """Grounding alignment: decoded v2t maps vs mask tracks, roles {sub, obj, verb}."""
    if not records:
        raise DataError("sga_loss needs at least one captured grounding layer")
    per_layer = []
    for record in records:
        role_sum = None
        for role in ("sub", "obj", "verb"):
            if role not in specs:
                warnings.warn(f"no token spec for role {role!r}; skipping", stacklevel=2)
                continue
            gmap = grounding_map(record, specs[role], config, head_agg="mean")
            decoded = decode_attention(gmap, decoder)
            term = composite_loss(decoded, targets.role(role), weights)
            role_sum = term if role_sum is None else role_sum + term
        if role_sum is None:
            raise DataError("sga_loss has no usable role specs")
        per_layer.append(role_sum)
    return torch.stack(per_layer).mean()


def spa_loss(
    records: list[AttentionRecord],
    queries: dict[str, QuerySet],
    targets: SupervisionTargets,
    decoder: CausalDecoder,
    weights: LossWeights,
    config: ModelConfig,
) -> torch.Tensor:
    """Propagation alignment: decoded v2v maps vs mask tracks, roles {sub, obj} only."""
    if not records:
        raise DataError("spa_loss needs at least one captured propagation layer")
    per_layer = []
    for record in records:
        role_sum = None
        for role in ("sub", "obj"):
            if role not in queries:
                warnings.warn(f"no query set for role {role!r}; skipping", stacklevel=2)
                continue
            pmap = propagation_map(record, queries[role], config, head_agg="mean")
            decoded = decode_attention(pmap, decoder)
            term = composite_loss(decoded, targets.role(role), weights)
            role_sum = term if role_sum is None else role_sum + term
        if role_sum is None:
            raise DataError("spa_loss has no usable query sets")
        per_layer.append(role_sum)
    return torch.stack(per_layer).mean()


def select_trainable(
    model: ToyDiT,
    decoder: CausalDecoder,
    grounding_layers: list[int],
    propagation_layers: list[int],
) -> list[torch.nn.Parameter]:
    """Freeze everything except supervised layers' QKV/O, input projection, decoder."""
    for p in model.parameters():
        p.requires_grad_(False)
    for p in decoder.parameters():
        p.requires_grad_(True)
    trainable = list(decoder.parameters())
    for idx in sorted(set(grounding_layers) | set(propagation_layers)):
        layer = model.layers[idx]
        for p in (layer.qkv.weight, layer.qkv.bias, layer.proj.weight, layer.proj.bias):
            p.requires_grad_(True)
            trainable.append(p)
    for p in (model.input_proj.weight, model.input_proj.bias):
        p.requires_grad_(True)
        trainable.append(p)
    return trainable


def total_loss(
    l_dm: torch.Tensor,
    l_sga: torch.Tensor | None,
    l_spa: torch.Tensor | None,
    weights: LossWeights,
) -> dict[str, torch.Tensor]:
    """Combine the denoising and alignment terms; abort on non-finite values."""
    zero = torch.zeros((), dtype=l_dm.dtype)
    l_sga = zero if l_sga is None else l_sga
    l_spa = zero if l_spa is None else l_spa
    total = l_dm + weights.lambda_sga * l_sga + weights.lambda_spa * l_spa
    parts = {"l_dm": l_dm, "l_sga": l_sga, "l_spa": l_spa, "total": total}
    for name, value in parts.items():
        if not math.isfinite(float(value.detach())):
            raise NumericsError(
                f"{name} is not finite: "
                + ", ".join(f"{k}={float(v.detach()):.6g}" for k, v in parts.items())
            )
    return parts
