"""Layer ranking: influential layers by frequency/magnitude rank sum, and
interaction-dominant layers by success/failure separation.

All ranks are competition ranks computed descending (best value gets rank 1;
ties share a rank). Tie-breaks are deterministic: magnitude, then lower layer
index. Step averaging happens before any ranking.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError
from .grounding import AASTable


@dataclass
class LayerStats:
    layer: int
    frequency: int
    magnitude: float
    rank_sum: int


@dataclass
class DominanceStats:
    layer: int
    mean_success: float
    mean_failure: float
    mean_all: float
    success_gap: float
    failure_gap: float
    separation: float

    def to_dict(self) -> dict:
        return asdict(self)


def _per_video_values(table: AASTable) -> tuple[list[str], list[int], dict]:
    clips = table.clips()
    layers = table.layers()
    if not clips or not layers:
        raise DataError("empty AAS table")
    values = table.step_averaged()
    for clip in clips:
        for layer in layers:
            if (clip, layer) not in values:
                raise DataError(f"table misses layer {layer} for clip {clip!r}")
    return clips, layers, values


def _competition_ranks(scores: dict[int, float]) -> dict[int, int]:
    return {
        layer: 1 + sum(1 for other in scores.values() if other > value)
        for layer, value in scores.items()
    }


def influential_layers(
    table: AASTable,
    top_k_per_video: int = 10,
    select_k: int = 10,
) -> tuple[list[int], list[LayerStats]]:
    """Rank layers by the frequency/magnitude rank sum and keep the best select_k."""
    clips, layers, values = _per_video_values(table)

    frequency = {layer: 0 for layer in layers}
    for clip in clips:
        ordered = sorted(layers, key=lambda l: (-values[(clip, l)], l))
        for layer in ordered[:top_k_per_video]:
            frequency[layer] += 1
    magnitude = {
        layer: float(np.mean([values[(clip, layer)] for clip in clips])) for layer in layers
    }

    freq_rank = _competition_ranks({l: float(f) for l, f in frequency.items()})
    mag_rank = _competition_ranks(magnitude)
    stats = [
        LayerStats(
            layer=layer,
            frequency=frequency[layer],
            magnitude=magnitude[layer],
            rank_sum=freq_rank[layer] + mag_rank[layer],
        )
        for layer in layers
    ]
    stats.sort(key=lambda s: (s.rank_sum, -s.magnitude, s.layer))
    selected = [s.layer for s in stats[:select_k]]
    return selected, stats


def dominant_layers(
    table: AASTable,
    labels: dict[str, bool],
    layers: list[int] | None = None,
) -> list[DominanceStats]:
    """Rank (influential) layers by how far success means sit above failure means."""
    clips, all_layers, values = _per_video_values(table)
    for clip in clips:
        if clip not in labels:
            raise DataError(f"clip {clip!r} has no success/failure label")
    if layers is None:
        layers, _ = influential_layers(table)
    else:
        unknown = set(layers) - set(all_layers)
        if unknown:
            raise DataError(f"layers {sorted(unknown)} not present in the table")

    successes = [c for c in clips if labels[c]]
    failures = [c for c in clips if not labels[c]]
    if not successes or not failures:
        raise DataError("labels must include at least one success and one failure")
    equal_sized = len(successes) == len(failures)
    if not equal_sized:
        warnings.warn(
            f"success/failure sets are unequal ({len(successes)} vs {len(failures)}); "
            "gaps are computed against the pooled per-video mean",
            stacklevel=2,
        )

    out = []
    for layer in layers:
        mean_s = float(np.mean([values[(c, layer)] for c in successes]))
        mean_f = float(np.mean([values[(c, layer)] for c in failures]))
        if equal_sized:
            # gaps formed as +-(s-f)/2 so success_gap == -failure_gap holds
            # bitwise (IEEE subtraction is odd-symmetric, halving is exact)
            mean_all = (mean_s + mean_f) / 2.0
            success_gap = (mean_s - mean_f) / 2.0
            failure_gap = (mean_f - mean_s) / 2.0
        else:
            mean_all = float(np.mean([values[(c, layer)] for c in clips]))
            success_gap = mean_s - mean_all
            failure_gap = mean_f - mean_all
        out.append(
            DominanceStats(
                layer=layer,
                mean_success=mean_s,
                mean_failure=mean_f,
                mean_all=mean_all,
                success_gap=success_gap,
                failure_gap=failure_gap,
                separation=success_gap - failure_gap,
            )
        )
    out.sort(key=lambda s: (-s.separation, s.layer))
    return out
