"""Model configuration and the pixel/latent grid arithmetic every module shares.

The latent grid is ``latent_frames x latent_height x latent_width``; pixel
space is tied to it by a fixed patch grid (``PATCH`` per spatial axis) and the
causal temporal schedule ``F_pix = 1 + 4*(F_lat - 1)``: latent step 0 maps to
pixel frame 0 and each later step t covers pixel frames 4t-3..4t.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import torch

from .errors import ConfigurationError

# Spatial pixel/latent ratio of the fixed patch grid.
PATCH = 4
# Temporal expansion of one latent step for steps >= 1.
TEMPORAL_RATE = 4
# Fixed instance-track budget |K|.
K_MAX = 5

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def pixel_frames(latent_frames: int) -> int:
    """Number of pixel frames decoded from `latent_frames` latent steps."""
    return 1 + TEMPORAL_RATE * (latent_frames - 1)


def frame_group(latent_step: int) -> list[int]:
    """Pixel frame indices covered by one latent step (causal grouping)."""
    if latent_step == 0:
        return [0]
    lo = TEMPORAL_RATE * latent_step - (TEMPORAL_RATE - 1)
    return list(range(lo, TEMPORAL_RATE * latent_step + 1))


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    n_heads: int = 4
    d_model: int = 64
    latent_frames: int = 4
    latent_height: int = 8
    latent_width: int = 8
    text_len: int = 16
    timesteps: int = 20
    seed: int = 0
    text_vocab: int = 64
    dtype: str = "float64"

    def __post_init__(self):
        counts = {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_model": self.d_model,
            "latent_frames": self.latent_frames,
            "latent_height": self.latent_height,
            "latent_width": self.latent_width,
            "text_len": self.text_len,
            "timesteps": self.timesteps,
            "text_vocab": self.text_vocab,
        }
        for name, value in counts.items():
            if not isinstance(value, int) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.dtype not in _DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_video_tokens(self) -> int:
        return self.latent_frames * self.latent_height * self.latent_width

    @property
    def seq_len(self) -> int:
        return self.n_video_tokens + self.text_len

    @property
    def pixel_frames(self) -> int:
        return pixel_frames(self.latent_frames)

    @property
    def pixel_height(self) -> int:
        return self.latent_height * PATCH

    @property
    def pixel_width(self) -> int:
        return self.latent_width * PATCH

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    @property
    def block_boundaries(self) -> dict:
        """Token index ranges of the video/text halves of the unified sequence."""
        return {
            "video": [0, self.n_video_tokens],
            "text": [self.n_video_tokens, self.seq_len],
        }

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)


def config_hash(obj) -> str:
    """Stable hash of any JSON-serializable config (dataclasses included)."""
    if hasattr(obj, "to_dict"):
        obj = obj.to_dict()
    elif hasattr(obj, "__dataclass_fields__"):
        obj = asdict(obj)
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(payload).hexdigest()[:16]
