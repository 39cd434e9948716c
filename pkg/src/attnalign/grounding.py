"""Noun/verb grounding maps from video-to-text attention, and the alignment score.

A grounding map for a role is the token-mean over that role's text columns of
the v2t block, reshaped onto the latent grid. Heads are summed for analysis
(raw magnitude is the signal; v2t rows are never renormalized) and averaged
when a map feeds the causal decoder.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .errors import DataError, EmptyQueryError
from .masks import LatentMask
from .model import AttentionRecord, partition

ROLES = ("sub", "obj", "verb")
VARIANTS = ("noun-v2t", "verb-v2t", "noun-v2v", "verb-v2v")


@dataclass(frozen=True)
class TokenSetSpec:
    """Text positions carrying one role (head word plus modifiers/auxiliaries)."""

    role: str
    token_indices: tuple[int, ...]

    def __post_init__(self):
        if self.role not in ROLES:
            raise DataError(f"role must be one of {ROLES}, got {self.role!r}")
        if len(self.token_indices) == 0:
            raise EmptyQueryError(f"empty token set for role {self.role!r}")
        object.__setattr__(self, "token_indices", tuple(int(i) for i in self.token_indices))

    def validate(self, config: ModelConfig):
        for i in self.token_indices:
            if not 0 <= i < config.text_len:
                raise DataError(f"token index {i} outside text length {config.text_len}")


@dataclass
class GroundingMap:
    """Head-aggregated, token-averaged v2t attention on the latent grid."""

    values: torch.Tensor  # [F_lat, H_lat, W_lat]
    role: str = ""


def grounding_map(
    record: AttentionRecord,
    spec: TokenSetSpec,
    config: ModelConfig,
    head_agg: str = "sum",
) -> GroundingMap:
    """Extract the grounding heatmap for one token set from a captured record."""
    spec.validate(config)
    blocks = partition(record, config)
    if head_agg == "sum":
        v2t = blocks.v2t.sum(dim=0)
    elif head_agg == "mean":
        v2t = blocks.v2t.mean(dim=0)
    else:
        raise DataError(f"head_agg must be 'sum' or 'mean', got {head_agg!r}")
    cols = v2t[:, list(spec.token_indices)]
    flat = cols.mean(dim=-1)
    values = flat.reshape(config.latent_frames, config.latent_height, config.latent_width)
    return GroundingMap(values=values, role=spec.role)


def aas(heatmap, mask: LatentMask) -> float:
    """Attention Alignment Score: total map mass inside the binary mask."""
    values = heatmap.values
    m = torch.from_numpy(np.ascontiguousarray(mask.m)).to(values.dtype)
    if values.shape != m.shape:
        raise DataError(f"shape mismatch: map {tuple(values.shape)} vs mask {tuple(m.shape)}")
    return float((values * m).sum().item())


@dataclass
class AASTable:
    """Per (clip, layer, step, variant, role) alignment scores."""

    rows: list[dict] = field(default_factory=list)

    def add(self, clip_id: str, layer: int, step: int, variant: str, role: str, value: float):
        if variant not in VARIANTS:
            raise DataError(f"unknown variant {variant!r}")
        if role not in ROLES:
            raise DataError(f"unknown role {role!r}")
        self.rows.append(
            {"clip_id": clip_id, "layer": int(layer), "step": int(step),
             "variant": variant, "role": role, "aas": float(value)}
        )

    def filter(self, variant: str | None = None, role: str | None = None) -> "AASTable":
        rows = [
            r for r in self.rows
            if (variant is None or r["variant"] == variant)
            and (role is None or r["role"] == role)
        ]
        return AASTable(rows=rows)

    def clips(self) -> list[str]:
        return sorted({r["clip_id"] for r in self.rows})

    def layers(self) -> list[int]:
        return sorted({r["layer"] for r in self.rows})

    def step_averaged(self) -> dict[tuple[str, int], float]:
        """Per (clip, layer) mean AAS over steps and roles (step averaging last)."""
        sums: dict[tuple[str, int], list[float]] = {}
        for r in self.rows:
            sums.setdefault((r["clip_id"], r["layer"]), []).append(r["aas"])
        return {key: float(np.mean(vals)) for key, vals in sums.items()}

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["clip_id", "layer", "step", "variant", "role", "aas"]
            )
            writer.writeheader()
            for r in self.rows:
                writer.writerow({**r, "aas": f"{r['aas']:.12g}"})
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "AASTable":
        table = cls()
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                table.add(
                    r["clip_id"], int(r["layer"]), int(r["step"]),
                    r["variant"], r["role"], float(r["aas"]),
                )
        return table
