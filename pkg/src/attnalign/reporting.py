"""Figure and report emitters: SVG heatmap overlays, ranking JSON, plot CSVs,
and per-run provenance manifests. SVGs are hand-rolled text so structural
checks are easy; byte identity is only promised for data outputs.
"""

from __future__ import annotations

import csv
import json
import platform
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .config import config_hash
from .layer_select import DominanceStats, LayerStats


def write_rankings_json(
    path: str | Path,
    variant: str,
    influential: list[int],
    stats: list[LayerStats],
    dominant: list[DominanceStats] | None = None,
) -> Path:
    doc = {
        "variant": variant,
        "influential": influential,
        "stats": [asdict(s) for s in stats],
        "dominant": [s.to_dict() for s in dominant] if dominant is not None else [],
    }
    path = Path(path)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def write_rank_plot_csv(path: str | Path, stats: list[LayerStats],
                        dominant: list[DominanceStats] | None = None) -> Path:
    """Per-layer plot data: frequency/magnitude plus dominance means when given."""
    dom = {d.layer: d for d in dominant or []}
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([
            "layer", "frequency", "magnitude", "rank_sum",
            "mean_success", "mean_failure", "mean_all", "separation",
        ])
        for s in sorted(stats, key=lambda x: x.layer):
            d = dom.get(s.layer)
            writer.writerow([
                s.layer, s.frequency, f"{s.magnitude:.12g}", s.rank_sum,
                f"{d.mean_success:.12g}" if d else "",
                f"{d.mean_failure:.12g}" if d else "",
                f"{d.mean_all:.12g}" if d else "",
                f"{d.separation:.12g}" if d else "",
            ])
    return path


def heatmap_svg(
    path: str | Path,
    values: np.ndarray,
    mask: np.ndarray | None = None,
    cell: int = 8,
    title: str = "",
) -> Path:
    """Render an [F, H, W] map as one row of frames; mask cells get an outline."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3:
        raise ValueError(f"expected [F, H, W] values, got shape {values.shape}")
    f, h, w = values.shape
    vmax = float(values.max()) or 1.0
    pad = cell
    width = f * (w * cell + pad) + pad
    height = h * cell + 2 * pad + (cell if title else 0)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="#111111"/>',
    ]
    if title:
        parts.append(
            f'<text x="{pad}" y="{pad}" fill="#eeeeee" font-size="{cell}" '
            f'font-family="monospace">{title}</text>'
        )
    top = pad + (cell if title else 0)
    for fi in range(f):
        x0 = pad + fi * (w * cell + pad)
        for yi in range(h):
            for xi in range(w):
                level = values[fi, yi, xi] / vmax
                # dark blue -> yellow ramp
                r = int(255 * level)
                g = int(220 * level)
                b = int(60 + 120 * (1 - level))
                parts.append(
                    f'<rect x="{x0 + xi * cell}" y="{top + yi * cell}" '
                    f'width="{cell}" height="{cell}" fill="#{r:02x}{g:02x}{b:02x}"/>'
                )
        if mask is not None:
            for yi in range(h):
                for xi in range(w):
                    if mask[fi, yi, xi]:
                        parts.append(
                            f'<rect x="{x0 + xi * cell}" y="{top + yi * cell}" '
                            f'width="{cell}" height="{cell}" fill="none" '
                            f'stroke="#ff4444" stroke-width="1"/>'
                        )
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts))
    return path


def write_run_manifest(out_dir: str | Path, subcommand: str, config: dict, seed: int) -> Path:
    """Provenance stamp written beside every run's outputs."""
    import attnalign

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "subcommand": subcommand,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "versions": {
            "attnalign": attnalign.__version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path
