"""Cross-frame propagation maps from video-to-video attention.

Queries are the first-frame latent cells covered by an instance mask; the
propagation map is the query-mean of their v2v rows (restricted to video keys
of the normalized row, no renormalization), reshaped to the latent grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .config import ModelConfig
from .errors import DataError, EmptyQueryError
from .grounding import ROLES
from .masks import LatentMask
from .model import AttentionRecord, partition


@dataclass(frozen=True)
class QuerySet:
    """First-frame latent locations seeding propagation for one role."""

    role: str
    locations: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if self.role not in ROLES:
            raise DataError(f"role must be one of {ROLES}, got {self.role!r}")
        if len(self.locations) == 0:
            raise EmptyQueryError(f"empty query set for role {self.role!r}")
        dedup = tuple(sorted({(int(h), int(w)) for h, w in self.locations}))
        object.__setattr__(self, "locations", dedup)


def query_set(mask0: LatentMask, role: str) -> QuerySet:
    """Coordinates of the 1-cells of a first-frame latent mask."""
    m = mask0.m
    if m.ndim != 2:
        raise DataError(f"query masks are first-frame [H, W], got shape {m.shape}")
    locations = [(int(h), int(w)) for h, w in zip(*m.nonzero())]
    if not locations:
        raise EmptyQueryError(f"mask for role {role!r} has no latent cells")
    return QuerySet(role=role, locations=tuple(locations))


def query_union(sub: QuerySet, obj: QuerySet) -> QuerySet:
    """Verb queries: the set union of subject and object query locations."""
    return QuerySet(role="verb", locations=sub.locations + obj.locations)


@dataclass
class PropagationMap:
    """Query-averaged v2v attention over the latent grid."""

    values: torch.Tensor  # [F_lat, H_lat, W_lat]
    role: str = ""


def propagation_map(
    record: AttentionRecord,
    queries: QuerySet,
    config: ModelConfig,
    head_agg: str = "sum",
) -> PropagationMap:
    """Mean over query rows of the (head-aggregated) v2v block."""
    blocks = partition(record, config)
    if head_agg == "sum":
        v2v = blocks.v2v.sum(dim=0)
    elif head_agg == "mean":
        v2v = blocks.v2v.mean(dim=0)
    else:
        raise DataError(f"head_agg must be 'sum' or 'mean', got {head_agg!r}")
    indices = []
    for h, w in queries.locations:
        if not (0 <= h < config.latent_height and 0 <= w < config.latent_width):
            raise DataError(f"query {(h, w)} outside the latent grid")
        indices.append(h * config.latent_width + w)
    rows = v2v[indices]
    flat = rows.mean(dim=0)
    values = flat.reshape(config.latent_frames, config.latent_height, config.latent_width)
    return PropagationMap(values=values, role=queries.role)
