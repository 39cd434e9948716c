"""Alignment training loop, checkpoint format, and the per-step loss ledger.

One step samples a clip and a timestep, forward-diffuses the clean latent,
runs the model with attention capture on the supervised layers, and minimizes
L_DM + lambda_SGA * L_SGA + lambda_SPA * L_SPA over the trainable subset
(supervised layers' QKV/O, input projection, decoder). Everything is driven
by one seeded generator, so equal settings reproduce identical loss curves.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig, config_hash
from .errors import DataError, NumericsError
from .losses import (
    CausalDecoder,
    LossWeights,
    select_trainable,
    sga_loss,
    spa_loss,
    total_loss,
)
from .model import ConditionChannels, NoiseSchedule, ToyDiT, denoising_loss
from .pipeline import ClipExample

DIVERGENCE_LIMIT = 1e3


@dataclass
class TrainSettings:
    steps: int = 500
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    grounding_layers: tuple[int, ...] = ()
    propagation_layers: tuple[int, ...] = ()
    weights: LossWeights = field(default_factory=LossWeights)


@dataclass
class TrainResult:
    rows: list[dict]

    def curve(self, key: str) -> list[float]:
        return [row[key] for row in self.rows]


def train_step(
    model: ToyDiT,
    decoder: CausalDecoder,
    schedule: NoiseSchedule,
    example: ClipExample,
    settings: TrainSettings,
    timestep: int,
    noise: torch.Tensor,
) -> dict[str, torch.Tensor]:
    """Forward + loss composition for one (clip, timestep, noise) draw."""
    config = model.config
    z_t = schedule.q_sample(example.z0, timestep, noise)
    cond = ConditionChannels(z_t=z_t, x0=example.x0, i0=example.i0)
    tokens = model.embed(cond, example.text_ids)
    capture = sorted(set(settings.grounding_layers) | set(settings.propagation_layers))
    prediction, records = model(tokens, timestep, capture=capture)
    l_dm = denoising_loss(prediction, noise.reshape(config.n_video_tokens, config.d_model))

    by_layer = {r.layer: r for r in records}
    g_records = [by_layer[i] for i in settings.grounding_layers]
    p_records = [by_layer[i] for i in settings.propagation_layers]
    l_sga = (
        sga_loss(g_records, example.specs, example.targets, decoder, settings.weights, config)
        if g_records else None
    )
    l_spa = (
        spa_loss(p_records, example.queries, example.targets, decoder, settings.weights, config)
        if p_records else None
    )
    return total_loss(l_dm, l_sga, l_spa, settings.weights)


def train(
    model: ToyDiT,
    decoder: CausalDecoder,
    examples: list[ClipExample],
    settings: TrainSettings,
) -> TrainResult:
    """Run the alignment loop; mutates model/decoder in place."""
    if not examples:
        raise DataError("training needs at least one clip")
    trainable = select_trainable(
        model, decoder, list(settings.grounding_layers), list(settings.propagation_layers)
    )
    optimizer = torch.optim.AdamW(
        trainable, lr=settings.lr, weight_decay=settings.weight_decay
    )
    schedule = NoiseSchedule(model.config)
    gen = torch.Generator().manual_seed(settings.seed)
    rows = []
    for step in range(settings.steps):
        lr = settings.lr * 0.5 * (1.0 + math.cos(math.pi * step / max(settings.steps, 1)))
        for group in optimizer.param_groups:
            group["lr"] = lr
        clip_idx = int(torch.randint(len(examples), (1,), generator=gen))
        timestep = int(torch.randint(model.config.timesteps, (1,), generator=gen))
        noise = torch.randn(
            examples[clip_idx].z0.shape, generator=gen, dtype=model.config.torch_dtype
        )
        parts = train_step(
            model, decoder, schedule, examples[clip_idx], settings, timestep, noise
        )
        if float(parts["total"].detach()) > DIVERGENCE_LIMIT:
            raise NumericsError(
                f"training diverged at step {step}: total={float(parts['total']):.3g}"
            )
        optimizer.zero_grad(set_to_none=True)
        parts["total"].backward()
        optimizer.step()
        rows.append({"step": step, **{k: float(v.detach()) for k, v in parts.items()}})
    return TrainResult(rows=rows)


def evaluate_losses(
    model: ToyDiT,
    decoder: CausalDecoder,
    examples: list[ClipExample],
    settings: TrainSettings,
    timesteps: list[int] | None = None,
    noise_seed: int = 0,
) -> dict[str, float]:
    """Deterministic mean loss parts over a clip set (for held-out evaluation)."""
    if not examples:
        raise DataError("evaluation needs at least one clip")
    config = model.config
    schedule = NoiseSchedule(config)
    if timesteps is None:
        timesteps = sorted({config.timesteps // 4, config.timesteps // 2,
                            (3 * config.timesteps) // 4})
    sums = {"l_dm": 0.0, "l_sga": 0.0, "l_spa": 0.0, "total": 0.0}
    count = 0
    with torch.no_grad():
        for i, example in enumerate(examples):
            for t in timesteps:
                gen = torch.Generator().manual_seed((noise_seed * 7919 + i) * 7919 + t)
                noise = torch.randn(example.z0.shape, generator=gen,
                                    dtype=config.torch_dtype)
                parts = train_step(model, decoder, schedule, example, settings, t, noise)
                for key in sums:
                    sums[key] += float(parts[key])
                count += 1
    return {key: value / count for key, value in sums.items()}


def write_loss_ledger(result: TrainResult, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "l_dm", "l_sga", "l_spa", "total"])
        writer.writeheader()
        for row in result.rows:
            writer.writerow({k: row[k] for k in writer.fieldnames})
    return path


# -- checkpoint format --------------------------------------------------------

_MAGIC = b"ATCK0001"


def _named_params(model: ToyDiT, decoder: CausalDecoder | None):
    for name, p in model.named_parameters():
        yield f"model.{name}", p
    if decoder is not None:
        for name, p in decoder.named_parameters():
            yield f"decoder.{name}", p


def save_checkpoint(
    path: str | Path,
    model: ToyDiT,
    decoder: CausalDecoder | None = None,
    extra: dict | None = None,
) -> Path:
    """Versioned binary: magic, JSON header (config + hash), then f32 LE params."""
    path = Path(path)
    entries = [(name, p.detach()) for name, p in _named_params(model, decoder)]
    header = {
        "format_version": 1,
        "config": model.config.to_dict(),
        "config_hash": config_hash(model.config),
        "params": [{"name": n, "shape": list(p.shape)} for n, p in entries],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for _, p in entries:
            fh.write(p.to(torch.float32).numpy().astype("<f4").tobytes())
    return path


def load_checkpoint(
    path: str | Path,
    model: ToyDiT,
    decoder: CausalDecoder | None = None,
) -> dict:
    """Restore parameters in place; returns the header for provenance checks."""
    raw = Path(path).read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    hlen = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16 : 16 + hlen].decode())
    if header["config"] != model.config.to_dict():
        raise DataError("checkpoint config does not match the constructed model")
    offset = 16 + hlen
    lookup = dict(_named_params(model, decoder))
    with torch.no_grad():
        for entry in header["params"]:
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            values = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
            offset += 4 * count
            if entry["name"] not in lookup:
                raise DataError(f"checkpoint parameter {entry['name']} missing in model")
            target = lookup[entry["name"]]
            if list(target.shape) != entry["shape"]:
                raise DataError(f"shape mismatch for {entry['name']}")
            target.copy_(torch.from_numpy(values.copy()).reshape(entry["shape"]).to(target.dtype))
    if offset != len(raw):
        raise DataError("checkpoint has trailing or missing parameter bytes")
    return header
