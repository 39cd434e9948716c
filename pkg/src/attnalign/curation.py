"""Simulated mask-track curation: interaction filtering, verifier-driven anchor
selection with mutual exclusion for same-class ids, and track propagation with
drop semantics. Detector, verifier, and propagator are injectable oracles so
fixtures fully script every decision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError
from .masks import ClipManifest, InteractionTriplet, MaskTrack, read_manifest

DEFAULT_CONTACT_THRESHOLD = 3
DEFAULT_DYNAMISM_THRESHOLD = 3


@dataclass(frozen=True)
class Candidate:
    instance_id: int
    frame: int
    slot: int
    box: tuple[float, float, float, float]
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise DataError(f"confidence must be in [0, 1], got {self.confidence}")

    def key(self) -> tuple:
        """Identity of the underlying detector box, shared across same-class pools."""
        return (self.frame, self.slot, self.box)


@dataclass(frozen=True)
class InteractionScore:
    contactness: int
    dynamism: int
    justification: str = ""
    confidence: str = ""

    def __post_init__(self):
        for name in ("contactness", "dynamism"):
            value = getattr(self, name)
            if not 1 <= value <= 5:
                raise DataError(f"{name} must be an integer 1..5, got {value}")


@dataclass
class FilterResult:
    retained: list[InteractionTriplet]
    retained_ids: set[int]
    discarded: bool


def filter_interactions(
    scored: list[tuple[InteractionTriplet, InteractionScore]],
    contact_threshold: int = DEFAULT_CONTACT_THRESHOLD,
    dynamism_threshold: int = DEFAULT_DYNAMISM_THRESHOLD,
) -> FilterResult:
    """Keep triplets meeting both thresholds; prune ids orphaned by the cut."""
    retained = [
        t for t, s in scored
        if s.contactness >= contact_threshold and s.dynamism >= dynamism_threshold
    ]
    ids = {k for t in retained for k in (t.k_sub, t.k_obj)}
    return FilterResult(retained=retained, retained_ids=ids, discarded=not retained)


class ScriptedVerifier:
    """Accept/reject table over candidate identities; counts every call."""

    def __init__(self, accept: set[tuple]):
        self.accept = accept
        self.calls = 0

    @classmethod
    def from_entries(cls, entries: list) -> "ScriptedVerifier":
        return cls({(int(k), int(f), int(s)) for k, f, s in entries})

    def verify(self, candidate: Candidate) -> bool:
        self.calls += 1
        return (candidate.instance_id, candidate.frame, candidate.slot) in self.accept


def _scan_order(candidates: list[Candidate]) -> list[Candidate]:
    return sorted(candidates, key=lambda c: (-c.confidence, c.frame, c.slot))


def select_anchor(candidates: list[Candidate], verifier) -> Candidate | None:
    """First verifier-accepted candidate in descending-confidence order."""
    for candidate in _scan_order(candidates):
        if verifier.verify(candidate):
            return candidate
    return None


def assign_exclusive(
    pools: dict[int, list[Candidate]],
    verifier,
) -> dict[int, Candidate | None]:
    """One-to-one anchor assignment over same-class ids sharing candidate boxes.

    Ids are processed in ascending numeric order; a box accepted for one id is
    removed from the other pools without spending verifier calls on it.
    """
    taken: set[tuple] = set()
    assignment: dict[int, Candidate | None] = {}
    for instance_id in sorted(pools):
        anchor = None
        for candidate in _scan_order(pools[instance_id]):
            if candidate.key() in taken:
                continue
            if verifier.verify(candidate):
                anchor = candidate
                taken.add(candidate.key())
                break
        assignment[instance_id] = anchor
    return assignment


class SyntheticPropagator:
    """Copies ground-truth fixture tracks; scripted failures drop the id."""

    def __init__(self, manifest: ClipManifest, failures: dict[int, int] | None = None):
        self.manifest = manifest
        self.failures = failures or {}

    def propagate(self, anchor: Candidate) -> MaskTrack | None:
        if anchor.instance_id in self.failures:
            return None
        return self.manifest.track(anchor.instance_id)


def propagate_track(anchor: Candidate, propagator) -> MaskTrack | None:
    """Full-length track from a verified anchor, or None when propagation fails."""
    return propagator.propagate(anchor)


@dataclass
class CurationReport:
    clip_id: str
    retained_triplets: list[InteractionTriplet]
    dropped_ids: list[int]
    verifier_calls: int
    naive_calls: int
    discarded: bool
    manifest: ClipManifest | None = None


@dataclass
class ClipFixture:
    manifest: ClipManifest
    scores: list[tuple[InteractionTriplet, InteractionScore]]
    pools: dict[int, list[Candidate]]
    verifier: ScriptedVerifier
    propagator: SyntheticPropagator
    qc: dict[int, str] = field(default_factory=dict)

    @classmethod
    def from_file(cls, path: str | Path) -> "ClipFixture":
        path = Path(path)
        doc = json.loads(path.read_text())
        manifest = read_manifest(path.parent / doc["clip_manifest"])
        scores = []
        for entry in doc["scores"]:
            triplet = InteractionTriplet(entry["verb"], entry["k_sub"], entry["k_obj"])
            scores.append(
                (triplet, InteractionScore(
                    contactness=entry["contactness"], dynamism=entry["dynamism"],
                    justification=entry.get("justification", ""),
                    confidence=entry.get("confidence", ""),
                ))
            )
        pools = {
            int(k): [
                Candidate(int(k), c["frame"], c["slot"], tuple(c["box"]), c["confidence"])
                for c in cands
            ]
            for k, cands in doc["candidates"].items()
        }
        verifier = ScriptedVerifier.from_entries(doc.get("verifier_accept", []))
        failures = {int(k): int(v) for k, v in doc.get("propagation_failures", {}).items()}
        return cls(
            manifest=manifest, scores=scores, pools=pools, verifier=verifier,
            propagator=SyntheticPropagator(manifest, failures),
            qc={int(k): v for k, v in doc.get("qc", {}).items()},
        )


def naive_call_budget(pools: dict[int, list[Candidate]]) -> int:
    """The |K| * J * T bound a full scan would spend."""
    if not pools:
        return 0
    frames = {c.frame for cands in pools.values() for c in cands}
    slots_per_frame: dict[tuple[int, int], int] = {}
    for k, cands in pools.items():
        for c in cands:
            key = (k, c.frame)
            slots_per_frame[key] = slots_per_frame.get(key, 0) + 1
    j = max(slots_per_frame.values(), default=0)
    return len(pools) * j * max(len(frames), 1)


def curate_clip(fixture: ClipFixture) -> CurationReport:
    """Run the full curation pipeline on one scripted fixture."""
    filtered = filter_interactions(fixture.scores)
    dropped: list[int] = []
    triplets = list(filtered.retained)

    qc_dropped = {k for k, verdict in fixture.qc.items() if verdict == "drop"}
    active_ids = sorted(filtered.retained_ids - qc_dropped)
    dropped.extend(sorted(qc_dropped & filtered.retained_ids))

    by_class: dict[str, list[int]] = {}
    for k in active_ids:
        by_class.setdefault(fixture.manifest.track(k).class_name, []).append(k)

    anchors: dict[int, Candidate | None] = {}
    for ids in by_class.values():
        pools = {k: fixture.pools.get(k, []) for k in ids}
        anchors.update(assign_exclusive(pools, fixture.verifier))

    tracks: list[MaskTrack] = []
    for k in active_ids:
        anchor = anchors.get(k)
        track = propagate_track(anchor, fixture.propagator) if anchor else None
        if track is None:
            dropped.append(k)
        else:
            tracks.append(track)
    kept_ids = {t.instance_id for t in tracks}
    triplets = [t for t in triplets if t.k_sub in kept_ids and t.k_obj in kept_ids]

    manifest = None
    discarded = not triplets
    if not discarded:
        used_ids = {k for t in triplets for k in (t.k_sub, t.k_obj)}
        manifest = ClipManifest(
            clip_id=fixture.manifest.clip_id,
            f_pix=fixture.manifest.f_pix,
            h_pix=fixture.manifest.h_pix,
            w_pix=fixture.manifest.w_pix,
            tracks=[t for t in tracks if t.instance_id in used_ids],
            triplets=triplets,
            extras=dict(fixture.manifest.extras),
        )
    return CurationReport(
        clip_id=fixture.manifest.clip_id,
        retained_triplets=triplets,
        dropped_ids=sorted(set(dropped)),
        verifier_calls=fixture.verifier.calls,
        naive_calls=naive_call_budget(fixture.pools),
        discarded=discarded,
        manifest=manifest,
    )
