"""Clip preparation and the analysis pass that fills AAS tables.

A prepared example bundles everything one clip contributes: the clean latent,
conditioning channels, text ids, token specs, first-frame query sets, latent
masks for scoring, and pixel-space supervision targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .config import ModelConfig
from .errors import DataError
from .grounding import AASTable, TokenSetSpec, aas, grounding_map
from .masks import ClipManifest, LatentMask, build_id_map, downsample_frame, downsample_to_latent, union_verb
from .model import ConditionChannels, FixedPixelCoder, NoiseSchedule, ToyDiT
from .propagation import query_set, query_union, propagation_map


@dataclass
class ClipExample:
    clip_id: str
    z0: torch.Tensor                      # clean latent [F, H, W, d_model]
    x0: torch.Tensor                      # first frame [3, H_pix, W_pix]
    i0: torch.Tensor                      # id map [H_pix, W_pix]
    text_ids: torch.Tensor                # [text_len]
    specs: dict                           # role -> TokenSetSpec
    queries: dict                         # role -> QuerySet
    latent_masks: dict                    # role -> LatentMask [F, H, W]
    targets: "SupervisionTargets"
    label_success: bool | None = None
    extras: dict = field(default_factory=dict)


def prepare_example(
    manifest: ClipManifest,
    video: np.ndarray,
    config: ModelConfig,
    coder: FixedPixelCoder,
) -> ClipExample:
    """Turn a manifest + rendered video into model-ready tensors."""
    from .losses import SupervisionTargets

    if not manifest.triplets:
        raise DataError(f"clip {manifest.clip_id} carries no interaction triplet")
    triplet = manifest.triplets[0]
    sub = manifest.track(triplet.k_sub)
    obj = manifest.track(triplet.k_obj)

    dtype = config.torch_dtype
    video_t = torch.from_numpy(np.ascontiguousarray(video)).to(dtype)
    z0 = coder.encode(video_t)
    x0 = video_t[0]
    i0 = torch.from_numpy(build_id_map(manifest.tracks, 0))

    extras = manifest.extras
    if "text_ids" not in extras or "token_specs" not in extras:
        raise DataError(f"clip {manifest.clip_id} manifest lacks text ids / token specs")
    text_ids = torch.tensor(extras["text_ids"], dtype=torch.long)
    specs = {
        role: TokenSetSpec(role=role, token_indices=tuple(idx))
        for role, idx in extras["token_specs"].items()
    }

    lat_sub = downsample_to_latent(sub, config)
    lat_obj = downsample_to_latent(obj, config)
    latent_masks = {"sub": lat_sub, "obj": lat_obj, "verb": union_verb(lat_sub, lat_obj)}

    q_sub = query_set(downsample_frame(sub.masks[0], config), "sub")
    q_obj = query_set(downsample_frame(obj.masks[0], config), "obj")
    queries = {"sub": q_sub, "obj": q_obj, "verb": query_union(q_sub, q_obj)}

    m_sub = torch.from_numpy(sub.masks.astype(np.float64)).to(dtype)
    m_obj = torch.from_numpy(obj.masks.astype(np.float64)).to(dtype)
    targets = SupervisionTargets(
        m_sub=m_sub, m_obj=m_obj, m_verb=torch.logical_or(m_sub != 0, m_obj != 0).to(dtype)
    )

    return ClipExample(
        clip_id=manifest.clip_id, z0=z0, x0=x0, i0=i0, text_ids=text_ids,
        specs=specs, queries=queries, latent_masks=latent_masks, targets=targets,
        label_success=extras.get("label_success"), extras=dict(extras),
    )


def default_analysis_steps(config: ModelConfig, n_steps: int = 5) -> list[int]:
    """Evenly spaced denoising timesteps including both ends."""
    if n_steps >= config.timesteps:
        return list(range(config.timesteps))
    idx = np.linspace(0, config.timesteps - 1, n_steps)
    return sorted({int(round(v)) for v in idx})


def analyze_clips(
    model: ToyDiT,
    examples: list[ClipExample],
    layers: list[int] | None = None,
    steps: list[int] | None = None,
    noise_seed: int = 0,
) -> AASTable:
    """Fill an AAS table over (clip, layer, step, variant, role).

    Each analysis step forward-diffuses the clean latent with seeded noise and
    captures attention; maps aggregate heads by sum (the analysis convention).
    """
    config = model.config
    schedule = NoiseSchedule(config)
    if layers is None:
        layers = list(range(config.n_layers))
    if steps is None:
        steps = default_analysis_steps(config)
    table = AASTable()
    for clip_index, ex in enumerate(examples):
        for t in steps:
            gen = torch.Generator().manual_seed(
                (noise_seed * 1_000_003 + clip_index) * 1_000_003 + t
            )
            eps = torch.randn(ex.z0.shape, generator=gen, dtype=config.torch_dtype)
            z_t = schedule.q_sample(ex.z0, t, eps)
            cond = ConditionChannels(z_t=z_t, x0=ex.x0, i0=ex.i0)
            with torch.no_grad():
                tokens = model.embed(cond, ex.text_ids)
                _, records = model(tokens, t, capture=layers)
            for record in records:
                _score_record(table, ex, record, t, config)
    return table


def _score_record(table: AASTable, ex: ClipExample, record, step: int, config: ModelConfig):
    for role, variant in (("sub", "noun-v2t"), ("obj", "noun-v2t"), ("verb", "verb-v2t")):
        gmap = grounding_map(record, ex.specs[role], config, head_agg="sum")
        table.add(ex.clip_id, record.layer, step, variant, role,
                  aas(gmap, ex.latent_masks[role]))
    for role, variant in (("sub", "noun-v2v"), ("obj", "noun-v2v"), ("verb", "verb-v2v")):
        pmap = propagation_map(record, ex.queries[role], config, head_agg="sum")
        table.add(ex.clip_id, record.layer, step, variant, role,
                  aas(pmap, ex.latent_masks[role]))


def mean_grounding_aas(
    model: ToyDiT,
    examples: list[ClipExample],
    layers: list[int],
    steps: list[int] | None = None,
    noise_seed: int = 0,
) -> float:
    """Mean noun-grounding AAS (sub+obj) over clips/steps on the given layers."""
    table = analyze_clips(model, examples, layers=layers, steps=steps, noise_seed=noise_seed)
    noun = table.filter(variant="noun-v2t")
    values = [r["aas"] for r in noun.rows]
    if not values:
        raise DataError("no noun-grounding rows produced")
    return float(np.mean(values))
