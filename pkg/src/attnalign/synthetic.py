"""Procedural toy clips: moving colored shapes with exact mask tracks.

Rasterization is the ground truth: each instance's mask is the occupancy of
its own color layer, video frames composite the layers with the smallest id
on top (matching the id-map overlap rule). Scripts are deterministic per seed
and carry the interaction verb, contact frame, and intended outcome; the
success label is recomputed geometrically from the rendered video.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .errors import CapacityError, ConfigurationError, DataError
from .masks import ClipManifest, InteractionTriplet, MaskTrack

VERBS = ("push", "lift", "approach", "hand-over")

# Token vocabulary shared by all synthetic prompts; id 0 is padding.
VOCAB = (
    "<pad>", "the", "is", "a",
    "square", "circle",
    "red", "blue", "green", "yellow", "magenta",
    "pushes", "lifts", "approaches", "hands", "over",
)
_TOKEN = {word: i for i, word in enumerate(VOCAB)}
_VERB_TOKENS = {
    "push": ("pushes",),
    "lift": ("lifts",),
    "approach": ("approaches",),
    "hand-over": ("hands", "over"),
}

PALETTE = {
    "red": (220, 50, 47),
    "blue": (38, 139, 210),
    "green": (133, 193, 39),
    "yellow": (181, 137, 0),
    "magenta": (211, 54, 130),
}
BACKGROUND = (25, 25, 25)


@dataclass
class ShapeSpec:
    instance_id: int
    class_name: str           # "square" or "circle"
    color: str
    size: int
    centers: np.ndarray       # [F_pix, 2] float (row, col) trajectory

    def __post_init__(self):
        if self.class_name not in ("square", "circle"):
            raise DataError(f"unknown shape class {self.class_name!r}")
        if self.color not in PALETTE:
            raise DataError(f"unknown color {self.color!r}")


@dataclass
class SceneScript:
    clip_id: str
    shapes: list[ShapeSpec]
    verb: str
    k_sub: int
    k_obj: int
    contact_frame: int
    seed: int
    succeed: bool = True
    extras: dict = field(default_factory=dict)

    def shape(self, instance_id: int) -> ShapeSpec:
        for s in self.shapes:
            if s.instance_id == instance_id:
                return s
        raise DataError(f"script has no shape {instance_id}")


def make_script(
    clip_id: str,
    seed: int,
    config: ModelConfig,
    verb: str | None = None,
    succeed: bool | None = None,
) -> SceneScript:
    """Draw a two-instance interaction script for the configured pixel grid."""
    rng = np.random.default_rng(seed)
    if verb is None:
        verb = VERBS[int(rng.integers(len(VERBS)))]
    if verb not in VERBS:
        raise ConfigurationError(f"verb must be one of {VERBS}, got {verb!r}")
    if succeed is None:
        succeed = bool(rng.integers(2))

    f_pix = config.pixel_frames
    h, w = config.pixel_height, config.pixel_width
    if h < 32 or w < 32 or f_pix < 9:
        raise ConfigurationError("scripts need at least a 32x32 grid and 9 pixel frames")
    contact_frame = int(rng.integers(f_pix // 3, 2 * f_pix // 3))

    size_sub = int(rng.choice([6, 8]))
    size_obj = int(rng.choice([6, 8]))
    if verb == "approach":
        # small shapes keep the distance-halving target clear of raster noise
        size_sub = size_obj = 6
    colors = rng.choice(list(PALETTE), size=2, replace=False)
    classes = [("square", "circle")[int(rng.integers(2))] for _ in range(2)]

    # Placement leaves each verb enough headroom that an intended success
    # always satisfies its geometric oracle after rasterization.
    if verb == "approach":
        row = float(rng.uniform(h * 0.4, h * 0.6))
        sub0 = np.array([row, float(rng.uniform(5.0, 6.0))])
        obj0 = np.array([row + float(rng.uniform(-2, 2)), float(rng.uniform(w - 7.0, w - 6.0))])
    elif verb == "lift":
        obj0 = np.array([float(rng.uniform(h * 0.4, h * 0.5)), float(rng.uniform(w * 0.4, w * 0.6))])
        sub0 = np.array([obj0[0] + (size_sub + size_obj) / 2 + float(rng.uniform(4, 6)), obj0[1]])
    elif verb == "push":
        row = float(rng.uniform(h * 0.4, h * 0.6))
        sub0 = np.array([row, float(rng.uniform(5.0, 7.0))])
        obj0 = np.array([row + float(rng.uniform(-1, 1)), float(rng.uniform(w * 0.5, w * 0.56))])
    else:  # hand-over
        row = float(rng.uniform(h * 0.4, h * 0.6))
        sub0 = np.array([row, float(rng.uniform(5.0, 7.0))])
        obj0 = np.array([row + float(rng.uniform(-1, 1)), float(rng.uniform(w * 0.42, w * 0.48))])

    sub_path, obj_path = _trajectories(
        verb, succeed, f_pix, contact_frame, sub0, obj0, size_sub, size_obj
    )
    margin = max(size_sub, size_obj) / 2 + 1
    bounds = np.array([[margin, margin], [h - 1 - margin, w - 1 - margin]])
    sub_path = np.clip(sub_path, bounds[0], bounds[1])
    obj_path = np.clip(obj_path, bounds[0], bounds[1])

    shapes = [
        ShapeSpec(1, classes[0], str(colors[0]), size_sub, sub_path),
        ShapeSpec(2, classes[1], str(colors[1]), size_obj, obj_path),
    ]
    return SceneScript(
        clip_id=clip_id, shapes=shapes, verb=verb, k_sub=1, k_obj=2,
        contact_frame=contact_frame, seed=seed, succeed=succeed,
    )


def _trajectories(verb, succeed, f_pix, contact_frame, sub0, obj0, size_sub, size_obj):
    sub = np.tile(sub0, (f_pix, 1)).astype(float)
    obj = np.tile(obj0, (f_pix, 1)).astype(float)
    gap = (size_sub + size_obj) / 2.0  # center distance at contact
    direction = obj0 - sub0
    dist0 = float(np.hypot(*direction))
    unit = direction / max(dist0, 1e-9)

    def _approach_to(target_dist, until):
        for f in range(1, f_pix):
            frac = min(f, until) / until
            reach = dist0 - frac * (dist0 - target_dist)
            sub[f] = obj0 - unit * reach

    if verb == "approach":
        target = max(0.4 * dist0, gap + 1.0) if succeed else 0.85 * dist0
        _approach_to(target, f_pix - 1)
        return sub, obj

    _approach_to(gap, contact_frame)
    if not succeed:
        for f in range(contact_frame + 1, f_pix):
            sub[f] = sub[contact_frame]
            obj[f] = obj[contact_frame]
        return sub, obj

    if verb == "push":
        direction_step, goal = unit, size_obj / 2.0 + 2.0
    elif verb == "lift":
        direction_step, goal = np.array([-1.0, 0.0]), size_obj / 2.0 + 2.0
    else:  # hand-over: carry the object onward past its own size
        direction_step, goal = unit, size_obj + 2.0
    tail = f_pix - 1 - contact_frame
    step = direction_step * (goal / tail)
    for f in range(contact_frame + 1, f_pix):
        k = f - contact_frame
        sub[f] = sub[contact_frame] + step * k
        obj[f] = obj[contact_frame] + step * k
    return sub, obj


def _raster(shape: ShapeSpec, frame: int, h: int, w: int) -> np.ndarray:
    cy, cx = shape.centers[frame]
    yy, xx = np.ogrid[:h, :w]
    half = shape.size / 2.0
    if shape.class_name == "square":
        return ((np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)).astype(np.uint8)
    return (((yy - cy) ** 2 + (xx - cx) ** 2) <= half * half).astype(np.uint8)


def render(script: SceneScript, config: ModelConfig) -> tuple[np.ndarray, ClipManifest]:
    """Rasterize a script into (pixel video [F,3,H,W] float in [0,1], manifest)."""
    if len(script.shapes) > 5:
        raise CapacityError("at most 5 instances per clip")
    f_pix, h, w = config.pixel_frames, config.pixel_height, config.pixel_width
    video = np.empty((f_pix, 3, h, w), dtype=np.float64)
    video[:] = (np.asarray(BACKGROUND, dtype=np.float64) / 255.0)[None, :, None, None]

    tracks = []
    for shape in script.shapes:
        if shape.centers.shape != (f_pix, 2):
            raise DataError(f"shape {shape.instance_id} trajectory length mismatch")
        masks = np.stack([_raster(shape, f, h, w) for f in range(f_pix)])
        tracks.append(
            MaskTrack(
                instance_id=shape.instance_id,
                class_name=shape.class_name,
                descriptor=f"{shape.color} {shape.class_name}",
                masks=masks,
            )
        )
    # smallest id painted last so it stays on top, matching the id-map rule
    for shape, track in sorted(zip(script.shapes, tracks), key=lambda p: -p[0].instance_id):
        rgb = np.asarray(PALETTE[shape.color], dtype=np.float64) / 255.0
        for f in range(f_pix):
            sel = track.masks[f] == 1
            for c in range(3):
                video[f, c][sel] = rgb[c]

    manifest = ClipManifest(
        clip_id=script.clip_id, f_pix=f_pix, h_pix=h, w_pix=w,
        tracks=tracks,
        triplets=[InteractionTriplet(script.verb, script.k_sub, script.k_obj,
                                     source_span=_prompt_text(script))],
        extras=_manifest_extras(script, config),
    )
    manifest.extras["label_success"] = label_success(script, video)
    return video, manifest


def _prompt_text(script: SceneScript) -> str:
    sub = script.shape(script.k_sub)
    obj = script.shape(script.k_obj)
    verb_words = " ".join(_VERB_TOKENS[script.verb])
    return f"the {sub.color} {sub.class_name} {verb_words} the {obj.color} {obj.class_name}"


def _manifest_extras(script: SceneScript, config: ModelConfig) -> dict:
    sub = script.shape(script.k_sub)
    obj = script.shape(script.k_obj)
    words = ["the", sub.color, sub.class_name]
    sub_pos = [1, 2]
    verb_pos = list(range(len(words), len(words) + len(_VERB_TOKENS[script.verb])))
    words += list(_VERB_TOKENS[script.verb])
    obj_pos = [len(words) + 1, len(words) + 2]
    words += ["the", obj.color, obj.class_name]
    ids = [_TOKEN[wd] for wd in words]
    if len(ids) > config.text_len:
        raise ConfigurationError("prompt longer than the configured text length")
    ids += [0] * (config.text_len - len(ids))
    return {
        "text_ids": ids,
        "token_specs": {"sub": sub_pos, "obj": obj_pos, "verb": verb_pos},
        "colors": {str(s.instance_id): s.color for s in script.shapes},
        "verb": script.verb,
        "contact_frame": script.contact_frame,
        "seed": script.seed,
    }


# -- geometric success oracle -------------------------------------------------

def _instance_masks_from_video(video: np.ndarray, colors: dict[int, str]) -> dict[int, np.ndarray]:
    """Nearest-palette segmentation of a rendered or generated video."""
    f_pix = video.shape[0]
    refs = {k: np.asarray(PALETTE[c], dtype=np.float64) / 255.0 for k, c in colors.items()}
    bg = np.asarray(BACKGROUND, dtype=np.float64) / 255.0
    out = {k: np.zeros((f_pix,) + video.shape[2:], dtype=np.uint8) for k in refs}
    keys = sorted(refs)
    stack = np.stack([refs[k] for k in keys] + [bg])          # [K+1, 3]
    for f in range(f_pix):
        pix = video[f].transpose(1, 2, 0)                      # [H, W, 3]
        d = ((pix[None] - stack[:, None, None]) ** 2).sum(-1)  # [K+1, H, W]
        owner = d.argmin(axis=0)
        for i, k in enumerate(keys):
            out[k][f] = (owner == i).astype(np.uint8)
    return out


def mask_centroid(mask: np.ndarray) -> np.ndarray | None:
    ys, xs = mask.nonzero()
    if len(ys) == 0:
        return None
    return np.array([ys.mean(), xs.mean()])


def boxes_adjacent(a: np.ndarray, b: np.ndarray, slack: int = 1) -> bool:
    """Bounding boxes touch or overlap within `slack` pixels on both axes."""
    if not a.any() or not b.any():
        return False
    ay, ax = a.nonzero()
    by, bx = b.nonzero()
    return (
        ay.min() <= by.max() + slack and by.min() <= ay.max() + slack
        and ax.min() <= bx.max() + slack and bx.min() <= ax.max() + slack
    )


def verb_outcome(verb: str, sub_masks: np.ndarray, obj_masks: np.ndarray, size_obj: float) -> bool:
    """Per-verb geometric postcondition on a pair of mask tracks."""
    cents_sub = [mask_centroid(m) for m in sub_masks]
    cents_obj = [mask_centroid(m) for m in obj_masks]
    if any(c is None for c in cents_sub + cents_obj):
        return False
    c_sub0, c_obj0 = cents_sub[0], cents_obj[0]
    c_objF = cents_obj[-1]
    contact = any(
        boxes_adjacent(sub_masks[f], obj_masks[f]) for f in range(len(sub_masks))
    )
    if verb == "approach":
        d0 = float(np.hypot(*(c_obj0 - c_sub0)))
        dF = float(np.hypot(*(cents_obj[-1] - cents_sub[-1])))
        return bool(dF < 0.5 * d0)
    if verb == "lift":
        return bool(contact and float(c_obj0[0] - c_objF[0]) >= size_obj / 2.0)
    if verb == "push":
        axis = c_obj0 - c_sub0
        axis = axis / max(float(np.hypot(*axis)), 1e-9)
        return bool(contact and float((c_objF - c_obj0) @ axis) >= size_obj / 2.0)
    if verb == "hand-over":
        return bool(contact and float(np.hypot(*(c_objF - c_obj0))) >= size_obj)
    raise ConfigurationError(f"unknown verb {verb!r}")


def label_success(script: SceneScript, video: np.ndarray) -> bool:
    """Deterministic geometric verdict on whether the scripted verb happened."""
    colors = {s.instance_id: s.color for s in script.shapes}
    masks = _instance_masks_from_video(video, colors)
    return verb_outcome(
        script.verb,
        masks[script.k_sub],
        masks[script.k_obj],
        script.shape(script.k_obj).size,
    )


def make_dataset(
    n_clips: int,
    seed: int,
    config: ModelConfig,
    verbs: tuple[str, ...] = VERBS,
    balanced: bool = True,
) -> list[tuple[SceneScript, np.ndarray, ClipManifest]]:
    """Generate n clips; `balanced` alternates intended success/failure."""
    out = []
    for i in range(n_clips):
        succeed = (i % 2 == 0) if balanced else None
        script = make_script(
            clip_id=f"clip{i:04d}", seed=seed + i, config=config,
            verb=verbs[i % len(verbs)], succeed=succeed,
        )
        video, manifest = render(script, config)
        out.append((script, video, manifest))
    return out
