"""Interaction-aware scoring: templated questions, answer sheets, and the
KISA / SGI / SPI / IF arithmetic.

Ten yes/no questions per interaction: Q1 checks the pre-interaction state,
Q2-Q5 the during stages, Q6 the post state (their yes-fraction is KISA_raw);
Q7-Q10 check grounding (yes-fraction is SGI_raw). SPI penalizes instance
emergence/disappearance across stride-sampled frames with weight lambda=5 and
reweights both raw scores; IF is the mean of the reweighted pair. Negative
SPI products are reported unclamped.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .masks import ClipManifest, InteractionTriplet
from .synthetic import boxes_adjacent, mask_centroid, verb_outcome

SPI_LAMBDA = 5.0
FRAME_STRIDE = 5

_STAGES = ("pre", "during", "during", "during", "during", "post",
           "grounding", "grounding", "grounding", "grounding")

_INFLECTIONS = {
    "push": ("pushing", "pushed"),
    "lift": ("lifting", "lifted"),
    "approach": ("approaching", "approached"),
    "hand-over": ("handing over", "handed over"),
}


def _inflect(verb: str) -> tuple[str, str]:
    if verb in _INFLECTIONS:
        return _INFLECTIONS[verb]
    stem = verb[:-1] if verb.endswith("e") else verb
    return stem + "ing", stem + "ed"


@dataclass
class Question:
    index: int          # 1-based
    stage: str
    text: str


@dataclass
class QuestionSet:
    interaction: InteractionTriplet
    questions: list[Question]

    def __post_init__(self):
        if len(self.questions) != 10:
            raise DataError(f"a question set has exactly 10 questions, got {len(self.questions)}")
        stages = tuple(q.stage for q in self.questions)
        if stages != _STAGES:
            raise DataError(f"stage assignment must be {_STAGES}, got {stages}")


def expand_templates(
    triplet: InteractionTriplet,
    descriptors: dict[int, str],
    colors: dict[int, str],
) -> QuestionSet:
    """Deterministic substitution of role phrases into the ten fixed templates."""
    for k in (triplet.k_sub, triplet.k_obj):
        if k not in descriptors:
            raise DataError(f"missing descriptor for instance {k}")
        if k not in colors:
            raise DataError(f"missing bounding-box color for instance {k}")
    sub = f"the {descriptors[triplet.k_sub]} ({colors[triplet.k_sub]} bounding box)"
    obj = f"the {descriptors[triplet.k_obj]} ({colors[triplet.k_obj]} bounding box)"
    prog, past = _inflect(triplet.verb)
    texts = [
        f"Before the interaction, is {sub} not yet in contact with {obj}?",
        f"Does {sub} move toward {obj}?",
        f"Does {sub} make contact with {obj}?",
        f"Does {sub} stay engaged with {obj} after contact?",
        f"Does {sub} start to act on {obj}?",
        f"Is the outcome of {prog} visibly achieved on {obj}?",
        f"Is {sub} taking action?",
        f"Is {sub} the one {prog} {obj}?",
        f"Is {obj} being {past} by {sub}?",
        f"Is {obj} being {past}?",
    ]
    questions = [Question(i + 1, _STAGES[i], t) for i, t in enumerate(texts)]
    return QuestionSet(interaction=triplet, questions=questions)


# -- answer sheets -------------------------------------------------------------

@dataclass(frozen=True)
class FrameFlags:
    index: int
    emerged: bool = False
    disappeared: bool = False


@dataclass
class AnswerSheet:
    answers: list[bool]
    frames: list[FrameFlags]

    def __post_init__(self):
        if len(self.answers) != 10:
            raise DataError(f"an answer sheet has exactly 10 answers, got {len(self.answers)}")
        if not self.frames:
            raise DataError("an answer sheet needs at least the anchor frame")
        anchor = self.frames[0]
        if anchor.emerged or anchor.disappeared:
            raise DataError("the anchor frame is the reference and is never flagged")


def sample_frames(n_frames: int, stride: int = FRAME_STRIDE) -> list[int]:
    """Stride sampling that always contains the first and last frames."""
    if n_frames < 1:
        raise DataError("cannot sample frames from an empty video")
    idx = list(range(0, n_frames, stride))
    if idx[-1] != n_frames - 1:
        idx.append(n_frames - 1)
    return idx


def score_raw(answers: list[bool]) -> tuple[float, float]:
    """Yes-fractions of the stage questions (Q1-Q6) and grounding questions (Q7-Q10)."""
    if len(answers) != 10:
        raise DataError(f"score_raw needs 10 answers, got {len(answers)}")
    kisa_raw = sum(bool(a) for a in answers[:6]) / 6.0
    sgi_raw = sum(bool(a) for a in answers[6:]) / 4.0
    return kisa_raw, sgi_raw


def score_spi(frames: list[FrameFlags], lam: float = SPI_LAMBDA) -> float:
    """Temporal-consistency score from emergence/disappearance flags.

    Ratios are taken over non-anchor sampled frames; each is weighted by lam
    and subtracted from 1; SPI is the mean of the two scores.
    """
    if len(frames) < 2:
        raise DataError("SPI needs the anchor plus at least one sampled frame")
    if frames[0].emerged or frames[0].disappeared:
        raise DataError("the anchor frame is never flagged")
    rest = frames[1:]
    emergence = sum(f.emerged for f in rest) / len(rest)
    disappearance = sum(f.disappeared for f in rest) / len(rest)
    return ((1.0 - lam * emergence) + (1.0 - lam * disappearance)) / 2.0


@dataclass
class InteractionScoreRow:
    kisa_raw: float
    sgi_raw: float


@dataclass
class ScoreLedger:
    clip_id: str
    interactions: list[InteractionScoreRow]
    spi: float
    kisa: float = 0.0
    sgi: float = 0.0
    if_score: float = 0.0


def finalize(ledger: ScoreLedger) -> ScoreLedger:
    """Reweight raw scores by SPI and average: KISA, SGI, IF = (KISA+SGI)/2.

    Multi-interaction clips average the raw scores before reweighting.
    """
    if not ledger.interactions:
        raise DataError("ledger has no interactions to score")
    kisa_raw = float(np.mean([r.kisa_raw for r in ledger.interactions]))
    sgi_raw = float(np.mean([r.sgi_raw for r in ledger.interactions]))
    ledger.kisa = kisa_raw * ledger.spi
    ledger.sgi = sgi_raw * ledger.spi
    ledger.if_score = (ledger.kisa + ledger.sgi) / 2.0
    return ledger


# -- judges --------------------------------------------------------------------

class FixtureJudge:
    """Replays recorded answers/flags from the scoring input JSON."""

    def __init__(self, document: dict):
        self.document = document

    @classmethod
    def from_file(cls, path: str | Path) -> "FixtureJudge":
        return cls(json.loads(Path(path).read_text()))

    def answer_sheets(self) -> list[AnswerSheet]:
        frames = [
            FrameFlags(
                index=f["index"], emerged=bool(f.get("emerged", False)),
                disappeared=bool(f.get("disappeared", False)),
            )
            for f in self.document["frames"]
        ]
        sheets = []
        for interaction in self.document["interactions"]:
            sheets.append(AnswerSheet(answers=[bool(a) for a in interaction["answers"]],
                                      frames=frames))
        return sheets


class SyntheticOracleJudge:
    """Answers the ten questions from ground-truth tracks of a procedural clip."""

    def __init__(self, manifest: ClipManifest, stride: int = FRAME_STRIDE):
        self.manifest = manifest
        self.stride = stride

    def answer_sheets(self) -> list[AnswerSheet]:
        frames = self._frame_flags()
        return [
            AnswerSheet(answers=self._answers(t), frames=frames)
            for t in self.manifest.triplets
        ]

    def _answers(self, triplet: InteractionTriplet) -> list[bool]:
        sub = self.manifest.track(triplet.k_sub).masks
        obj = self.manifest.track(triplet.k_obj).masks
        n = sub.shape[0]
        size_obj = float(np.sqrt(obj[0].sum())) if obj[0].any() else 0.0

        contact = [boxes_adjacent(sub[f], obj[f]) for f in range(n)]
        first_contact = next((f for f, c in enumerate(contact) if c), None)
        c_sub = [mask_centroid(m) for m in sub]
        c_obj = [mask_centroid(m) for m in obj]
        visible = all(c is not None for c in c_sub + c_obj)
        if not visible:
            return [False] * 10

        def dist(f):
            return float(np.hypot(*(c_obj[f] - c_sub[f])))

        mid = first_contact if first_contact is not None else n // 2
        moved_toward = dist(max(mid, 1)) < dist(0) - 0.5
        sub_moved = float(np.hypot(*(c_sub[-1] - c_sub[0]))) >= 1.0 or moved_toward
        outcome = verb_outcome(triplet.verb, sub, obj, size_obj)
        if triplet.verb == "approach":
            engaged = moved_toward
            onset = dist(n - 1) < dist(0) - 1.0
            affected = dist(n - 1) < 0.5 * dist(0)
        else:
            engaged = first_contact is not None and all(contact[first_contact:])
            after = first_contact if first_contact is not None else n - 1
            obj_shift = float(np.hypot(*(c_obj[-1] - c_obj[after])))
            onset = first_contact is not None and obj_shift >= 1.0
            affected = outcome
        sub_drives = moved_toward and (
            float(np.hypot(*(c_sub[mid] - c_sub[0])))
            >= float(np.hypot(*(c_obj[mid] - c_obj[0])))
        )
        return [
            not contact[0],                                    # Q1 pre
            moved_toward,                                      # Q2
            first_contact is not None or triplet.verb == "approach" and affected,  # Q3
            engaged,                                           # Q4
            onset,                                             # Q5
            outcome,                                           # Q6 post
            sub_moved,                                         # Q7
            sub_drives,                                        # Q8
            affected and sub_drives,                           # Q9
            affected,                                          # Q10
        ]

    def _frame_flags(self) -> list[FrameFlags]:
        n = self.manifest.f_pix
        sampled = sample_frames(n, self.stride)
        anchor_visible = {
            t.instance_id: bool(t.masks[0].any()) for t in self.manifest.tracks
        }
        flags = [FrameFlags(index=sampled[0])]
        for f in sampled[1:]:
            emerged = any(
                (not anchor_visible[t.instance_id]) and t.masks[f].any()
                for t in self.manifest.tracks
            )
            disappeared = any(
                anchor_visible[t.instance_id] and not t.masks[f].any()
                for t in self.manifest.tracks
            )
            flags.append(FrameFlags(index=f, emerged=emerged, disappeared=disappeared))
        return flags


# -- file interfaces -----------------------------------------------------------

def score_document(document: dict) -> ScoreLedger:
    """Score one clip's input JSON: interactions with answers plus frame flags."""
    judge = FixtureJudge(document)
    sheets = judge.answer_sheets()
    if not sheets:
        raise DataError("scoring input has no interactions")
    rows = [InteractionScoreRow(*score_raw(s.answers)) for s in sheets]
    spi = score_spi(sheets[0].frames)
    return finalize(ScoreLedger(clip_id=document["clip_id"], interactions=rows, spi=spi))


def write_ledgers(ledgers: list[ScoreLedger], json_path: str | Path, csv_path: str | Path):
    doc = {
        "clips": [
            {
                "clip_id": l.clip_id,
                "interactions": [
                    {"kisa_raw": r.kisa_raw, "sgi_raw": r.sgi_raw} for r in l.interactions
                ],
                "spi": l.spi, "kisa": l.kisa, "sgi": l.sgi, "if": l.if_score,
            }
            for l in ledgers
        ]
    }
    Path(json_path).write_text(json.dumps(doc, indent=1, sort_keys=True))
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["clip_id", "KISA", "SGI", "IF"])
        for l in ledgers:
            writer.writerow([l.clip_id, f"{l.kisa:.6g}", f"{l.sgi:.6g}", f"{l.if_score:.6g}"])
