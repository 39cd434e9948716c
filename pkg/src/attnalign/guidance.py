"""Perturbed-attention guidance: CAG (cross-frame v2v zeroing) and CMG
(token-column v2t zeroing), applied post-softmax with no renormalization,
steering sampling away from the degraded prediction.

Only the designated block entries change; everything else in a perturbed
record is bitwise identical to the clean one. The symmetric t2v entries are
left untouched by CMG (documented asymmetry).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .config import ModelConfig
from .errors import ConfigurationError, DataError
from .grounding import TokenSetSpec
from .model import (
    AttentionRecord,
    ConditionChannels,
    FixedPixelCoder,
    NoiseSchedule,
    ToyDiT,
)


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 0.0
    cag_layers: tuple[int, ...] = ()
    cmg_layers: tuple[int, ...] = ()
    apply_steps: frozenset[int] | None = None   # None = all sampling steps
    cmg_nouns: bool = True
    cmg_verb: bool = True

    def __post_init__(self):
        if self.scale < 0:
            raise ConfigurationError(f"guidance scale must be >= 0, got {self.scale}")
        object.__setattr__(self, "cag_layers", tuple(int(l) for l in self.cag_layers))
        object.__setattr__(self, "cmg_layers", tuple(int(l) for l in self.cmg_layers))

    def validate(self, config: ModelConfig):
        for l in self.cag_layers + self.cmg_layers:
            if not 0 <= l < config.n_layers:
                raise ConfigurationError(f"guidance layer {l} outside model range")


def _zero_cross_frame(maps: torch.Tensor, config: ModelConfig) -> torch.Tensor:
    n_v = config.n_video_tokens
    cells = config.latent_height * config.latent_width
    frame_of = torch.arange(n_v) // cells
    same = (frame_of[:, None] == frame_of[None, :]).to(maps.dtype)
    out = maps.clone()
    out[:, :n_v, :n_v] = out[:, :n_v, :n_v] * same
    return out


def _zero_text_columns(maps: torch.Tensor, columns: list[int], config: ModelConfig) -> torch.Tensor:
    if not columns:
        return maps.clone()
    n_v = config.n_video_tokens
    out = maps.clone()
    for c in columns:
        if not 0 <= c < config.text_len:
            raise DataError(f"text column {c} outside text length {config.text_len}")
        out[:, :n_v, n_v + c] = 0.0
    return out


def perturb_cag(record: AttentionRecord, config: ModelConfig) -> AttentionRecord:
    """Zero cross-frame v2v entries post-softmax; same-frame and text blocks stay."""
    return AttentionRecord(
        layer=record.layer, head_maps=_zero_cross_frame(record.head_maps, config)
    )


def _cmg_columns(specs: dict[str, TokenSetSpec], nouns: bool = True, verb: bool = True) -> list[int]:
    cols: set[int] = set()
    for role, spec in specs.items():
        if role in ("sub", "obj") and nouns:
            cols.update(spec.token_indices)
        if role == "verb" and verb:
            cols.update(spec.token_indices)
    return sorted(cols)


def perturb_cmg(
    record: AttentionRecord,
    specs: dict[str, TokenSetSpec],
    config: ModelConfig,
    nouns: bool = True,
    verb: bool = True,
) -> AttentionRecord:
    """Zero the v2t columns of the role token sets (noun and/or verb alignments)."""
    cols = _cmg_columns(specs, nouns=nouns, verb=verb)
    return AttentionRecord(
        layer=record.layer, head_maps=_zero_text_columns(record.head_maps, cols, config)
    )


def guided_prediction(clean: torch.Tensor, perturbed: torch.Tensor, scale: float) -> torch.Tensor:
    """Steer away from the degraded prediction: clean + s * (clean - perturbed)."""
    if clean.shape != perturbed.shape:
        raise ConfigurationError("clean and perturbed predictions must share a shape")
    return clean + scale * (clean - perturbed)


def sample_with_guidance(
    model: ToyDiT,
    coder: FixedPixelCoder,
    x0: torch.Tensor,
    i0: torch.Tensor,
    text_ids: torch.Tensor,
    specs: dict[str, TokenSetSpec],
    guidance: GuidanceConfig,
    seed: int,
    capture_layers: list[int] | None = None,
) -> tuple[torch.Tensor, torch.Tensor, list]:
    """Deterministic DDIM sampling with an optional perturbed pass per step.

    Returns (pixel video, final latent, captured clean records per step).
    `capture_layers` collects the clean pass's attention for post-hoc analysis.
    """
    config = model.config
    guidance.validate(config)
    schedule = NoiseSchedule(config)
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(
        (config.latent_frames, config.latent_height, config.latent_width, config.d_model),
        generator=gen, dtype=config.torch_dtype,
    )
    cols = _cmg_columns(specs, nouns=guidance.cmg_nouns, verb=guidance.cmg_verb)
    cag_set, cmg_set = set(guidance.cag_layers), set(guidance.cmg_layers)

    def transform(layer: int, probs: torch.Tensor) -> torch.Tensor:
        if layer in cag_set:
            probs = _zero_cross_frame(probs, config)
        if layer in cmg_set:
            probs = _zero_text_columns(probs, cols, config)
        return probs

    captured = []
    with torch.no_grad():
        for t in reversed(range(config.timesteps)):
            cond = ConditionChannels(z_t=z, x0=x0, i0=i0)
            tokens = model.embed(cond, text_ids)
            eps, records = model(tokens, t, capture=capture_layers or ())
            if capture_layers:
                captured.append((t, records))
            apply_here = guidance.apply_steps is None or t in guidance.apply_steps
            if guidance.scale > 0 and apply_here and (cag_set or cmg_set):
                eps_hat, _ = model(tokens, t, attn_transform=transform)
                eps = guided_prediction(eps, eps_hat, guidance.scale)
            z = schedule.ddim_step(z.reshape(eps.shape), eps, t).reshape(z.shape)
    video = coder.decode(z)
    return video, z, captured
