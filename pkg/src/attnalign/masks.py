"""Instance mask tracks: data model, verb unions, latent downsampling, and file IO.

Tracks are per-instance binary tensors over pixel space. The verb/interaction
region is the elementwise OR of the subject and object tracks. Downsampling to
the latent grid is any-overlap max-pooling in space and causal frame grouping
in time, so analysis masks line up with the decoder's temporal schedule.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import K_MAX, ModelConfig, frame_group, pixel_frames
from .errors import CapacityError, ConfigurationError, DataError


@dataclass
class MaskTrack:
    """Binary mask sequence [F_pix, H_pix, W_pix] for one instance id."""

    instance_id: int
    class_name: str
    descriptor: str
    masks: np.ndarray

    def __post_init__(self):
        if self.instance_id < 1:
            raise DataError(f"instance_id must be >= 1, got {self.instance_id}")
        self.masks = np.asarray(self.masks, dtype=np.uint8)
        if self.masks.ndim != 3:
            raise DataError(f"masks must be [F, H, W], got shape {self.masks.shape}")
        if not np.isin(self.masks, (0, 1)).all():
            raise DataError("mask values must be 0 or 1")


@dataclass(frozen=True)
class InteractionTriplet:
    verb: str
    k_sub: int
    k_obj: int
    source_span: str = ""

    def __post_init__(self):
        if self.k_sub == self.k_obj:
            raise DataError("subject and object ids must differ")


@dataclass
class LatentMask:
    """Binary mask on the latent grid: [F_lat, H_lat, W_lat] or [H_lat, W_lat]."""

    m: np.ndarray

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.uint8)
        if self.m.ndim not in (2, 3):
            raise DataError(f"latent mask must be 2D or 3D, got shape {self.m.shape}")
        if not np.isin(self.m, (0, 1)).all():
            raise DataError("latent mask values must be 0 or 1")


def union_verb(sub, obj):
    """Elementwise OR of two tracks or two latent masks (the verb region)."""
    if isinstance(sub, MaskTrack) and isinstance(obj, MaskTrack):
        if sub.masks.shape != obj.masks.shape:
            raise DataError(
                f"shape mismatch: {sub.masks.shape} vs {obj.masks.shape}"
            )
        return MaskTrack(
            instance_id=min(sub.instance_id, obj.instance_id),
            class_name="verb-union",
            descriptor=f"{sub.descriptor} + {obj.descriptor}",
            masks=np.logical_or(sub.masks, obj.masks).astype(np.uint8),
        )
    if isinstance(sub, LatentMask) and isinstance(obj, LatentMask):
        if sub.m.shape != obj.m.shape:
            raise DataError(f"shape mismatch: {sub.m.shape} vs {obj.m.shape}")
        return LatentMask(np.logical_or(sub.m, obj.m).astype(np.uint8))
    raise DataError("union_verb needs two MaskTracks or two LatentMasks")


def downsample_to_latent(track: MaskTrack, config: ModelConfig) -> LatentMask:
    """Downsample a pixel track to the latent grid.

    Spatial: a latent cell is 1 iff any covered pixel is 1. Temporal: latent
    step 0 takes pixel frame 0; step t >= 1 takes the OR over the causal frame
    group it decodes to (frames 4t-3..4t).
    """
    f_pix, h_pix, w_pix = track.masks.shape
    if f_pix != config.pixel_frames:
        raise ConfigurationError(
            f"track has {f_pix} frames, config expects {config.pixel_frames}"
        )
    if h_pix % config.latent_height or w_pix % config.latent_width:
        raise ConfigurationError(
            f"pixel grid {h_pix}x{w_pix} not divisible by latent grid "
            f"{config.latent_height}x{config.latent_width}"
        )
    out = np.zeros(
        (config.latent_frames, config.latent_height, config.latent_width), dtype=np.uint8
    )
    for t in range(config.latent_frames):
        grouped = track.masks[frame_group(t)].max(axis=0)
        out[t] = _spatial_maxpool(grouped, config.latent_height, config.latent_width)
    return LatentMask(out)


def downsample_frame(mask: np.ndarray, config: ModelConfig) -> LatentMask:
    """Any-overlap downsample of one pixel frame to [H_lat, W_lat]."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DataError(f"expected a single [H, W] frame, got shape {mask.shape}")
    h_pix, w_pix = mask.shape
    if h_pix % config.latent_height or w_pix % config.latent_width:
        raise ConfigurationError(
            f"pixel frame {h_pix}x{w_pix} not divisible by latent grid"
        )
    return LatentMask(_spatial_maxpool(mask, config.latent_height, config.latent_width))


def _spatial_maxpool(frame: np.ndarray, h_lat: int, w_lat: int) -> np.ndarray:
    fh = frame.shape[0] // h_lat
    fw = frame.shape[1] // w_lat
    return frame.reshape(h_lat, fh, w_lat, fw).max(axis=(1, 3)).astype(np.uint8)


def build_id_map(tracks: list[MaskTrack], frame: int) -> np.ndarray:
    """Palette id map for one pixel frame; overlaps resolved to the smallest id."""
    if len(tracks) > K_MAX:
        raise CapacityError(f"at most {K_MAX} tracks allowed, got {len(tracks)}")
    if not tracks:
        raise DataError("build_id_map needs the frame shape from at least one track")
    shape = tracks[0].masks.shape[1:]
    out = np.zeros(shape, dtype=np.int64)
    for track in sorted(tracks, key=lambda t: t.instance_id, reverse=True):
        if track.masks.shape[1:] != shape:
            raise DataError("tracks disagree on pixel shape")
        if not 0 <= frame < track.masks.shape[0]:
            raise DataError(f"frame {frame} out of range")
        covered = track.masks[frame] == 1
        out[covered] = track.instance_id
    return out


def id_map_or_empty(tracks: list[MaskTrack], frame: int, shape: tuple[int, int]) -> np.ndarray:
    """build_id_map that tolerates an empty track list (all-background map)."""
    if not tracks:
        return np.zeros(shape, dtype=np.int64)
    return build_id_map(tracks, frame)


# ---------------------------------------------------------------------------
# Run-length mask encoding (alternating zero/one run counts, row-major).
# ---------------------------------------------------------------------------

def rle_encode_frame(frame: np.ndarray) -> np.ndarray:
    """Encode one binary frame as alternating run counts, first run is zeros."""
    flat = np.asarray(frame, dtype=np.uint8).ravel()
    if flat.size == 0:
        return np.zeros(0, dtype=np.uint32)
    boundaries = np.flatnonzero(np.diff(flat)) + 1
    edges = np.concatenate(([0], boundaries, [flat.size]))
    runs = np.diff(edges)
    if flat[0] == 1:
        runs = np.concatenate(([0], runs))
    return runs.astype(np.uint32)


def rle_decode_frame(runs: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Inverse of rle_encode_frame; rejects payloads of the wrong total length."""
    runs = np.asarray(runs, dtype=np.uint64)
    total = int(runs.sum())
    expected = shape[0] * shape[1]
    if total != expected:
        raise DataError(f"RLE payload covers {total} pixels, frame needs {expected}")
    values = np.zeros(len(runs), dtype=np.uint8)
    values[1::2] = 1
    flat = np.repeat(values, runs.astype(np.int64))
    return flat.reshape(shape)


def _rle_to_b64(runs: np.ndarray) -> str:
    return base64.b64encode(runs.astype("<u4").tobytes()).decode("ascii")


def _rle_from_b64(payload: str) -> np.ndarray:
    raw = base64.b64decode(payload.encode("ascii"))
    if len(raw) % 4:
        raise DataError("corrupt RLE payload: byte length not a multiple of 4")
    return np.frombuffer(raw, dtype="<u4")


@dataclass
class ClipManifest:
    """One clip: geometry, instance tracks, triplets, and optional extras.

    Extras carry what downstream stages need (token specs, labels, palette
    colors); they round-trip untouched.
    """

    clip_id: str
    f_pix: int
    h_pix: int
    w_pix: int
    tracks: list[MaskTrack]
    triplets: list[InteractionTriplet]
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [t.instance_id for t in self.tracks]
        if len(ids) != len(set(ids)):
            raise DataError(f"duplicate instance_id in manifest {self.clip_id}")
        for t in self.tracks:
            if t.masks.shape != (self.f_pix, self.h_pix, self.w_pix):
                raise DataError(
                    f"track {t.instance_id} shape {t.masks.shape} does not match "
                    f"manifest ({self.f_pix},{self.h_pix},{self.w_pix})"
                )
        for tr in self.triplets:
            for k in (tr.k_sub, tr.k_obj):
                if k not in ids:
                    raise DataError(f"triplet references missing instance {k}")

    def track(self, instance_id: int) -> MaskTrack:
        for t in self.tracks:
            if t.instance_id == instance_id:
                return t
        raise DataError(f"no track with id {instance_id}")


def write_manifest(manifest: ClipManifest, path: str | Path, sidecar: bool = False) -> Path:
    """Write a clip manifest as JSON; masks inline base64 or raw .rle sidecars."""
    path = Path(path)
    instances = []
    for track in manifest.tracks:
        entry = {
            "id": track.instance_id,
            "class": track.class_name,
            "descriptor": track.descriptor,
            "palette_index": track.instance_id,
        }
        frames = [rle_encode_frame(f) for f in track.masks]
        if sidecar:
            rle_path = path.parent / f"{path.stem}_id{track.instance_id}.rle"
            with open(rle_path, "wb") as fh:
                for runs in frames:
                    header = np.asarray([len(runs)], dtype="<u4")
                    fh.write(header.tobytes())
                    fh.write(runs.astype("<u4").tobytes())
            entry["rle_file"] = rle_path.name
        else:
            entry["rle"] = [_rle_to_b64(runs) for runs in frames]
        instances.append(entry)
    doc = {
        "clip_id": manifest.clip_id,
        "F_pix": manifest.f_pix,
        "H_pix": manifest.h_pix,
        "W_pix": manifest.w_pix,
        "instances": instances,
        "triplets": [
            {"verb": t.verb, "k_sub": t.k_sub, "k_obj": t.k_obj, "source_span": t.source_span}
            for t in manifest.triplets
        ],
    }
    if manifest.extras:
        doc["extras"] = manifest.extras
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def read_manifest(path: str | Path) -> ClipManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
    try:
        f_pix, h_pix, w_pix = doc["F_pix"], doc["H_pix"], doc["W_pix"]
        shape = (h_pix, w_pix)
        tracks = []
        for entry in doc["instances"]:
            if "rle" in entry:
                frames = [rle_decode_frame(_rle_from_b64(p), shape) for p in entry["rle"]]
            elif "rle_file" in entry:
                frames = _read_rle_sidecar(path.parent / entry["rle_file"], shape)
            else:
                raise DataError(f"instance {entry.get('id')} carries no mask payload")
            if len(frames) != f_pix:
                raise DataError(
                    f"instance {entry.get('id')} has {len(frames)} frames, manifest says {f_pix}"
                )
            tracks.append(
                MaskTrack(
                    instance_id=entry["id"],
                    class_name=entry["class"],
                    descriptor=entry.get("descriptor", ""),
                    masks=np.stack(frames),
                )
            )
        triplets = [
            InteractionTriplet(
                verb=t["verb"], k_sub=t["k_sub"], k_obj=t["k_obj"],
                source_span=t.get("source_span", ""),
            )
            for t in doc.get("triplets", [])
        ]
    except KeyError as exc:
        raise DataError(f"manifest {path} missing field {exc}") from exc
    return ClipManifest(
        clip_id=doc["clip_id"], f_pix=f_pix, h_pix=h_pix, w_pix=w_pix,
        tracks=tracks, triplets=triplets, extras=doc.get("extras", {}),
    )


def _read_rle_sidecar(path: Path, shape: tuple[int, int]) -> list[np.ndarray]:
    raw = path.read_bytes()
    frames = []
    offset = 0
    while offset < len(raw):
        if offset + 4 > len(raw):
            raise DataError(f"truncated RLE sidecar {path.name}")
        (count,) = np.frombuffer(raw, dtype="<u4", count=1, offset=offset)
        offset += 4
        end = offset + 4 * int(count)
        if end > len(raw):
            raise DataError(f"truncated RLE sidecar {path.name}")
        runs = np.frombuffer(raw, dtype="<u4", count=int(count), offset=offset)
        offset = end
        frames.append(rle_decode_frame(runs, shape))
    return frames
