"""Toy multimodal diffusion transformer with full attention over video+text tokens.

The unified sequence is video tokens first (flattened F x H x W latent grid),
then text tokens. Every layer computes per-head softmax(QK^T / sqrt(d_head))
over the whole sequence; captured records are those post-softmax probabilities.
All parameters are drawn from a generator seeded by the config, so equal
config+seed constructions are bit-identical.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import K_MAX, PATCH, TEMPORAL_RATE, ModelConfig, frame_group
from .errors import ConfigurationError, DataError


@dataclass
class TokenSequence:
    """Embedded inputs: video tokens [N_v, d_model] then text tokens [text_len, d_model]."""

    video_tokens: torch.Tensor
    text_tokens: torch.Tensor


@dataclass
class AttentionRecord:
    """Post-softmax attention for one layer: head_maps [n_heads, S, S]."""

    layer: int
    head_maps: torch.Tensor


@dataclass
class AttentionBlocks:
    """The four regions of a full-attention map, in query-major order."""

    v2v: torch.Tensor
    v2t: torch.Tensor
    t2v: torch.Tensor
    t2t: torch.Tensor


@dataclass
class ConditionChannels:
    """Per-clip conditioning: noise latent, first RGB frame, palette id map."""

    z_t: torch.Tensor            # [F_lat, H_lat, W_lat, d_model]
    x0: torch.Tensor             # [3, H_pix, W_pix], values in [0, 1]
    i0: torch.Tensor             # [H_pix, W_pix], integer ids 0..K_MAX

    def __post_init__(self):
        if int(self.i0.max()) > K_MAX:
            raise DataError(f"id map values must be <= {K_MAX}")


def scaled_dot_probs(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Per-head attention probabilities softmax(q k^T / sqrt(d_head))."""
    d_head = q.shape[-1]
    scores = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(d_head)
    return torch.softmax(scores, dim=-1)


def sinusoidal_encoding(positions: torch.Tensor, dim: int, base: float = 10000.0) -> torch.Tensor:
    """Fixed sin/cos encoding of integer positions, shape [len(positions), dim]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(base) * torch.arange(half, dtype=torch.float64) / max(half, 1)
    )
    angles = positions.to(torch.float64)[:, None] * freqs[None, :]
    enc = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if enc.shape[-1] < dim:
        enc = torch.cat([enc, torch.zeros(len(positions), dim - enc.shape[-1], dtype=torch.float64)], dim=-1)
    return enc


class _Layer(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.fc1 = nn.Linear(d_model, 2 * d_model)
        self.fc2 = nn.Linear(2 * d_model, d_model)


class ToyDiT(nn.Module):
    """Deterministic toy DiT exposing captured attention per layer and head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.patch_dim = 3 * PATCH * PATCH
        cond_dim = d + self.patch_dim + (K_MAX + 1)
        self.input_proj = nn.Linear(cond_dim, d)
        self.text_emb = nn.Embedding(config.text_vocab, d)
        self.time_proj = nn.Linear(d, d)
        self.layers = nn.ModuleList(_Layer(d) for _ in range(config.n_layers))
        self.final_ln = nn.LayerNorm(d)
        self.head = nn.Linear(d, d)
        self.to(config.torch_dtype)
        self._init_parameters()
        pos = sinusoidal_encoding(torch.arange(config.seq_len), d).to(config.torch_dtype)
        self.register_buffer("pos_enc", pos)

    def _init_parameters(self):
        gen = torch.Generator().manual_seed(self.config.seed)
        with torch.no_grad():
            for _, module in self.named_modules():
                if isinstance(module, nn.LayerNorm):
                    module.weight.fill_(1.0)
                    module.bias.fill_(0.0)
                elif isinstance(module, (nn.Linear, nn.Embedding)):
                    w = torch.randn(module.weight.shape, generator=gen, dtype=torch.float64)
                    module.weight.copy_((0.02 * w).to(module.weight.dtype))
                    if getattr(module, "bias", None) is not None:
                        module.bias.fill_(0.0)

    # -- embedding ---------------------------------------------------------

    def embed(self, cond: ConditionChannels, text_ids: torch.Tensor) -> TokenSequence:
        """Project condition channels and text ids into the unified token space."""
        cfg = self.config
        dtype = cfg.torch_dtype
        if cond.z_t.shape != (cfg.latent_frames, cfg.latent_height, cfg.latent_width, cfg.d_model):
            raise ConfigurationError(f"z_t shape {tuple(cond.z_t.shape)} does not match config")
        if cond.x0.shape != (3, cfg.pixel_height, cfg.pixel_width):
            raise ConfigurationError(f"x0 shape {tuple(cond.x0.shape)} does not match config")
        if cond.i0.shape != (cfg.pixel_height, cfg.pixel_width):
            raise ConfigurationError(f"i0 shape {tuple(cond.i0.shape)} does not match config")
        if text_ids.shape != (cfg.text_len,):
            raise ConfigurationError(f"text_ids must have length {cfg.text_len}")
        if int(text_ids.max()) >= cfg.text_vocab or int(text_ids.min()) < 0:
            raise ConfigurationError("text id out of vocabulary range")

        patches = _spatial_patches(cond.x0.to(dtype))                     # [H_lat*W_lat, 48]
        id_hist = _id_histogram(cond.i0)                                  # [H_lat*W_lat, 6]
        per_cell = torch.cat([patches, id_hist.to(dtype)], dim=-1)
        per_cell = per_cell.repeat(cfg.latent_frames, 1)                  # broadcast over frames
        z_flat = cond.z_t.reshape(cfg.n_video_tokens, cfg.d_model).to(dtype)
        video = self.input_proj(torch.cat([z_flat, per_cell], dim=-1))
        video = video + self.pos_enc[: cfg.n_video_tokens]
        text = self.text_emb(text_ids) + self.pos_enc[cfg.n_video_tokens :]
        return TokenSequence(video_tokens=video, text_tokens=text)

    # -- forward -----------------------------------------------------------

    def forward(
        self,
        tokens: TokenSequence,
        timestep: int,
        capture=(),
        attn_transform=None,
    ) -> tuple[torch.Tensor, list[AttentionRecord]]:
        """One denoising pass.

        `capture` selects layers whose post-softmax (and post-transform, if a
        transform is injected) attention is returned. The graph is kept, so
        callers that only analyze should run under torch.no_grad().
        """
        cfg = self.config
        if not 0 <= timestep < cfg.timesteps:
            raise ConfigurationError(f"timestep {timestep} out of range [0, {cfg.timesteps})")
        capture = frozenset(capture)
        if not capture <= frozenset(range(cfg.n_layers)):
            raise ConfigurationError(f"capture set {sorted(capture)} exceeds layer range")
        if tuple(tokens.video_tokens.shape) != (cfg.n_video_tokens, cfg.d_model):
            raise ConfigurationError(
                f"video tokens {tuple(tokens.video_tokens.shape)} do not match config"
            )
        if tuple(tokens.text_tokens.shape) != (cfg.text_len, cfg.d_model):
            raise ConfigurationError(
                f"text tokens {tuple(tokens.text_tokens.shape)} do not match config"
            )

        t_enc = sinusoidal_encoding(torch.tensor([timestep]), cfg.d_model).to(cfg.torch_dtype)
        t_emb = self.time_proj(t_enc)[0]
        x = torch.cat([tokens.video_tokens + t_emb, tokens.text_tokens], dim=0)

        records = []
        for idx, layer in enumerate(self.layers):
            h = layer.ln1(x)
            qkv = layer.qkv(h)
            q, k, v = qkv.split(cfg.d_model, dim=-1)
            q = q.view(cfg.seq_len, cfg.n_heads, cfg.d_head).transpose(0, 1)
            k = k.view(cfg.seq_len, cfg.n_heads, cfg.d_head).transpose(0, 1)
            v = v.view(cfg.seq_len, cfg.n_heads, cfg.d_head).transpose(0, 1)
            probs = scaled_dot_probs(q, k)
            if attn_transform is not None:
                probs = attn_transform(idx, probs)
            if idx in capture:
                records.append(AttentionRecord(layer=idx, head_maps=probs))
            attn = torch.matmul(probs, v).transpose(0, 1).reshape(cfg.seq_len, cfg.d_model)
            x = x + layer.proj(attn)
            h = layer.ln2(x)
            x = x + layer.fc2(torch.nn.functional.gelu(layer.fc1(h)))

        video_states = self.final_ln(x[: cfg.n_video_tokens])
        prediction = self.head(video_states)
        return prediction, records


def _spatial_patches(x0: torch.Tensor) -> torch.Tensor:
    """Flattened PATCH x PATCH RGB patches per latent cell, [H_lat*W_lat, 3*P*P]."""
    c, h, w = x0.shape
    hl, wl = h // PATCH, w // PATCH
    x = x0.reshape(c, hl, PATCH, wl, PATCH)
    x = x.permute(1, 3, 0, 2, 4).reshape(hl * wl, c * PATCH * PATCH)
    return x


def _id_histogram(i0: torch.Tensor) -> torch.Tensor:
    """Per-cell fraction of pixels carrying each id 0..K_MAX, [H_lat*W_lat, K_MAX+1]."""
    h, w = i0.shape
    hl, wl = h // PATCH, w // PATCH
    onehot = torch.nn.functional.one_hot(i0.long(), K_MAX + 1).to(torch.float64)
    cells = onehot.reshape(hl, PATCH, wl, PATCH, K_MAX + 1)
    return cells.mean(dim=(1, 3)).reshape(hl * wl, K_MAX + 1)


# -- attention partition -----------------------------------------------------

def partition(record: AttentionRecord, config: ModelConfig) -> AttentionBlocks:
    """Split a record into the v2v / v2t / t2v / t2t regions (exact tiling)."""
    maps = record.head_maps
    n_v = config.n_video_tokens
    s = config.seq_len
    if maps.shape[-2:] != (s, s) or maps.shape[0] != config.n_heads:
        raise ConfigurationError(
            f"record shape {tuple(maps.shape)} does not match config "
            f"[{config.n_heads}, {s}, {s}]"
        )
    return AttentionBlocks(
        v2v=maps[:, :n_v, :n_v],
        v2t=maps[:, :n_v, n_v:],
        t2v=maps[:, n_v:, :n_v],
        t2t=maps[:, n_v:, n_v:],
    )


def reassemble(blocks: AttentionBlocks) -> torch.Tensor:
    """Inverse of partition: tile the four blocks back into [n_heads, S, S]."""
    top = torch.cat([blocks.v2v, blocks.v2t], dim=-1)
    bottom = torch.cat([blocks.t2v, blocks.t2t], dim=-1)
    return torch.cat([top, bottom], dim=-2)


# Full-scale reference geometry (documentation constants; the toy never uses them).
FULL_SCALE_TEXT_TOKENS = 226
FULL_SCALE_VIDEO_TOKENS = 1350 * 13  # 17550


def denoising_loss(prediction: torch.Tensor, target_noise: torch.Tensor) -> torch.Tensor:
    """Mean squared error between the noise prediction and the true noise."""
    if prediction.shape != target_noise.shape:
        raise ConfigurationError(
            f"shape mismatch: {tuple(prediction.shape)} vs {tuple(target_noise.shape)}"
        )
    return ((prediction - target_noise) ** 2).mean()


# -- diffusion schedule ------------------------------------------------------

class NoiseSchedule:
    """Linear-beta epsilon-prediction schedule over the config's timesteps."""

    def __init__(self, config: ModelConfig, beta_start: float = 1e-4, beta_end: float = 0.02):
        betas = torch.linspace(beta_start, beta_end, config.timesteps, dtype=config.torch_dtype)
        self.alpha_bar = torch.cumprod(1.0 - betas, dim=0)

    def q_sample(self, z0: torch.Tensor, t: int, eps: torch.Tensor) -> torch.Tensor:
        ab = self.alpha_bar[t]
        return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps

    def ddim_step(self, z_t: torch.Tensor, eps_hat: torch.Tensor, t: int) -> torch.Tensor:
        """Deterministic (eta=0) reverse step from t to t-1."""
        ab_t = self.alpha_bar[t]
        z0_pred = (z_t - torch.sqrt(1.0 - ab_t) * eps_hat) / torch.sqrt(ab_t)
        if t == 0:
            return z0_pred
        ab_prev = self.alpha_bar[t - 1]
        return torch.sqrt(ab_prev) * z0_pred + torch.sqrt(1.0 - ab_prev) * eps_hat


# -- fixed pixel <-> latent coder --------------------------------------------

class FixedPixelCoder:
    """Seed-fixed linear patch coder between pixel video and the latent grid.

    Not trained: the projection has orthonormal rows, so encode->decode is an
    identity on the patch subspace. Stands in for the out-of-scope VAE.
    """

    SCALE = 2.0

    def __init__(self, config: ModelConfig):
        self.config = config
        patch_dim = 3 * PATCH * PATCH
        gen = torch.Generator().manual_seed(config.seed ^ 0x5EED)
        if config.d_model >= patch_dim:
            raw = torch.randn(config.d_model, patch_dim, generator=gen, dtype=torch.float64)
            q, _ = torch.linalg.qr(raw)
            weight = q.T.contiguous()        # orthonormal rows -> lossless roundtrip
        else:
            raw = torch.randn(patch_dim, config.d_model, generator=gen, dtype=torch.float64)
            q, _ = torch.linalg.qr(raw)
            weight = q.contiguous()          # projection; roundtrip is best-effort
        self.weight = weight.to(config.torch_dtype)  # [patch_dim, d_model]

    def encode(self, video: torch.Tensor) -> torch.Tensor:
        """Pixel video [F_pix, 3, H_pix, W_pix] -> latent [F_lat, H_lat, W_lat, d_model]."""
        cfg = self.config
        if video.shape != (cfg.pixel_frames, 3, cfg.pixel_height, cfg.pixel_width):
            raise ConfigurationError(f"video shape {tuple(video.shape)} does not match config")
        video = video.to(cfg.torch_dtype)
        steps = []
        for t in range(cfg.latent_frames):
            frame = video[frame_group(t)].mean(dim=0)
            steps.append(_spatial_patches(frame))
        patches = torch.stack(steps)                          # [F_lat, H*W, 48]
        z = self.SCALE * (patches - 0.5) @ self.weight
        return z.reshape(cfg.latent_frames, cfg.latent_height, cfg.latent_width, cfg.d_model)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Latent grid back to pixel video (nearest temporal expansion)."""
        cfg = self.config
        flat = z.reshape(cfg.latent_frames, cfg.latent_height * cfg.latent_width, cfg.d_model)
        patches = (flat @ self.weight.T) / self.SCALE + 0.5
        patches = patches.reshape(
            cfg.latent_frames, cfg.latent_height, cfg.latent_width, 3, PATCH, PATCH
        )
        frames = patches.permute(0, 3, 1, 4, 2, 5).reshape(
            cfg.latent_frames, 3, cfg.pixel_height, cfg.pixel_width
        )
        index = [0] + [t for t in range(1, cfg.latent_frames) for _ in range(TEMPORAL_RATE)]
        return frames[index].clamp(0.0, 1.0)


# -- attention dump format ---------------------------------------------------

def dump_attention(record: AttentionRecord, config: ModelConfig, base_path: str | Path) -> Path:
    """Write a record as little-endian f32 flat binary plus a JSON sidecar."""
    base = Path(base_path)
    maps = record.head_maps.detach().to(torch.float32).numpy().astype("<f4")
    bin_path = base.with_suffix(".bin")
    bin_path.write_bytes(maps.tobytes())
    sidecar = {
        "layer": record.layer,
        "heads": config.n_heads,
        "shape": list(maps.shape),
        "block_boundaries": config.block_boundaries,
        "dtype": "<f4",
    }
    base.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    return bin_path


def load_attention(base_path: str | Path) -> AttentionRecord:
    base = Path(base_path)
    sidecar = json.loads(base.with_suffix(".json").read_text())
    raw = np.frombuffer(base.with_suffix(".bin").read_bytes(), dtype=sidecar["dtype"])
    expected = int(np.prod(sidecar["shape"]))
    if raw.size != expected:
        raise DataError(
            f"attention dump holds {raw.size} values, sidecar promises {expected}"
        )
    maps = torch.from_numpy(raw.reshape(sidecar["shape"]).copy())
    return AttentionRecord(layer=sidecar["layer"], head_maps=maps)
