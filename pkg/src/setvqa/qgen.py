"""Template questions with exact answers, plus 3-annotator answer simulation.

Color and position questions obey a uniqueness rule: the categories they
mention occur exactly once among the scene's true objects, so the answer is
never ambiguous. Count questions count true objects, never duplicate
proposals. A configurable detector-noise rate swaps the mentioned label for a
plausible mis-detection while keeping the true answer, mimicking cascaded
detector errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import center_distance
from .labels import (CATEGORIES, COLORS, CONFUSIONS, CONFUSION_PLURALS,
                     INT_TO_WORD, NO, PLURALS, WORD_TO_INT, YES)
from .scenes import GenConfig, ImageSet, SceneTruth, question_rng

QTYPE_SET = ("color", "position", "count", "existence", "main")

TEMPLATE_PATTERNS = (
    r"^what is the color of the [a-z]+\?$",
    r"^what is to the (left|right) of the [a-z]+\?$",
    r"^what is (above|below) the [a-z]+\?$",
    r"^how many [a-z]+ are there\?$",
    r"^is there a [a-z]+\?$",
)


def tokenize(text: str) -> list[str]:
    """Lowercase whitespace tokens with '?' split off as its own token."""
    return text.lower().replace("?", " ?").split()


@dataclass(frozen=True)
class Question:
    text: str
    qtype: str
    target_categories: frozenset[str] = frozenset()
    numeric_target: int | None = None

    @property
    def tokens(self) -> list[str]:
        return tokenize(self.text)


@dataclass
class QASample:
    image_set_ref: int
    question: Question
    answers: list[str]
    gold: str

    def __post_init__(self) -> None:
        if len(self.answers) != 3:
            raise ValueError(f"expected exactly 3 annotator answers, got {len(self.answers)}")


@dataclass(frozen=True)
class AnswerVocab:
    """Dense label <-> index map, lexicographically ordered for determinism."""

    labels: tuple[str, ...]
    index: dict[str, int] = field(hash=False, compare=False, default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "index", {lab: i for i, lab in enumerate(self.labels)})

    @property
    def size(self) -> int:
        return len(self.labels)

    def lookup(self, label: str) -> int:
        return self.index[label]

    def get(self, label: str) -> int | None:
        return self.index.get(label)


def build_vocab(samples) -> AnswerVocab:
    """All answer labels occurring in the given samples' annotations."""
    labels: set[str] = set()
    for s in samples:
        labels.add(s.gold)
        labels.update(s.answers)
    if not labels:
        raise ValueError("cannot build an answer vocabulary from an empty sample list")
    return AnswerVocab(labels=tuple(sorted(labels)))


def _maybe_corrupt(label: str, cfg: GenConfig, rng: np.random.Generator) -> str:
    if cfg.detector_noise > 0 and rng.random() < cfg.detector_noise:
        return CONFUSIONS[label]
    return label


def _perturb_answer(gold: str, rng: np.random.Generator) -> str:
    if gold in WORD_TO_INT:
        v = WORD_TO_INT[gold]
        options = [w for w in (v - 1, v + 1) if w in INT_TO_WORD]
        return INT_TO_WORD[int(rng.choice(options))]
    if gold in (YES, NO):
        return NO if gold == YES else YES
    if gold in COLORS:
        return str(rng.choice([c for c in COLORS if c != gold]))
    if gold in CATEGORIES:
        return str(rng.choice([c for c in CATEGORIES if c != gold]))
    return str(rng.choice(CATEGORIES))


def simulate_annotators(gold: str, cfg: GenConfig, rng: np.random.Generator) -> list[str]:
    """Three independent annotators, each wrong with probability annotator_error."""
    out = []
    for _ in range(3):
        if cfg.annotator_error > 0 and rng.random() < cfg.annotator_error:
            out.append(_perturb_answer(gold, rng))
        else:
            out.append(gold)
    return out


def gen_color_question(image_set: ImageSet, scene: SceneTruth, cfg: GenConfig,
                       rng: np.random.Generator) -> QASample | None:
    uniques = scene.unique_categories()
    if not uniques:
        return None
    cat = str(rng.choice(uniques))
    obj = next(o for o in scene.true_objects if o.category == cat)
    label = _maybe_corrupt(cat, cfg, rng)
    question = Question(
        text=f"what is the color of the {label}?",
        qtype="color",
        target_categories=frozenset([label]),
    )
    return QASample(
        image_set_ref=scene.sample_id,
        question=question,
        answers=simulate_annotators(obj.color, cfg, rng),
        gold=obj.color,
    )


_DIRECTION_TEXT = {
    "left": "what is to the left of the {}?",
    "right": "what is to the right of the {}?",
    "top": "what is above the {}?",
    "bottom": "what is below the {}?",
}


def _extreme(objs, direction):
    """Extreme-most object by box center; None when the extreme is ambiguous."""
    axis, take_min = {
        "left": (0, True), "right": (0, False), "top": (1, True), "bottom": (1, False),
    }[direction]
    coords = [o.bbox.center[axis] for o in objs]
    best = min(coords) if take_min else max(coords)
    hits = [o for o, c in zip(objs, coords) if c == best]
    return hits[0] if len(hits) == 1 else None


def gen_position_question(image_set: ImageSet, scene: SceneTruth, cfg: GenConfig,
                          rng: np.random.Generator) -> QASample | None:
    counts = scene.category_counts()
    candidates = []
    for img in range(max((o.image_idx for o in scene.true_objects), default=-1) + 1):
        objs = [o for o in scene.true_objects if o.image_idx == img]
        if len(objs) < 2:
            continue
        for direction in ("left", "right", "top", "bottom"):
            extreme = _extreme(objs, direction)
            if extreme is None:
                continue
            others = [o for o in objs if o.obj_id != extreme.obj_id]
            dists = [center_distance(extreme.bbox, o.bbox) for o in others]
            best = min(dists)
            nearest = [o for o, d in zip(others, dists) if d == best]
            if len(nearest) != 1:
                continue
            subject = nearest[0]
            if counts[extreme.category] != 1 or counts[subject.category] != 1:
                continue
            candidates.append((direction, subject.category, extreme.category))
    if not candidates:
        return None
    direction, subject_cat, answer_cat = candidates[int(rng.integers(len(candidates)))]
    label = _maybe_corrupt(subject_cat, cfg, rng)
    question = Question(
        text=_DIRECTION_TEXT[direction].format(label),
        qtype="position",
        target_categories=frozenset([label]),
    )
    return QASample(
        image_set_ref=scene.sample_id,
        question=question,
        answers=simulate_annotators(answer_cat, cfg, rng),
        gold=answer_cat,
    )


def gen_count_question(image_set: ImageSet, scene: SceneTruth, cfg: GenConfig,
                       rng: np.random.Generator) -> QASample | None:
    counts = scene.category_counts()
    askable = sorted(c for c, n in counts.items() if 1 <= n <= len(INT_TO_WORD))
    if not askable:
        return None
    if scene.count_target is not None and scene.count_target in askable:
        cat = scene.count_target
    else:
        cat = str(rng.choice(askable))
    n = counts[cat]
    label = _maybe_corrupt(cat, cfg, rng)
    plural = PLURALS[label] if label in PLURALS else CONFUSION_PLURALS[label]
    question = Question(
        text=f"how many {plural} are there?",
        qtype="count",
        target_categories=frozenset([label]),
        numeric_target=n,
    )
    gold = INT_TO_WORD[n]
    return QASample(
        image_set_ref=scene.sample_id,
        question=question,
        answers=simulate_annotators(gold, cfg, rng),
        gold=gold,
    )


def gen_existence_question(image_set: ImageSet, scene: SceneTruth, cfg: GenConfig,
                           rng: np.random.Generator) -> QASample:
    counts = scene.category_counts()
    present = sorted(counts)
    absent = sorted(set(CATEGORIES) - set(present))
    ask_present = (rng.random() < cfg.existence_yes_rate) or not absent
    if ask_present and present:
        cat, gold = str(rng.choice(present)), YES
    else:
        cat, gold = str(rng.choice(absent)), NO
    label = _maybe_corrupt(cat, cfg, rng)
    question = Question(
        text=f"is there a {label}?",
        qtype="existence",
        target_categories=frozenset([label]),
    )
    return QASample(
        image_set_ref=scene.sample_id,
        question=question,
        answers=simulate_annotators(gold, cfg, rng),
        gold=gold,
    )


_GENERATORS = {
    "color": gen_color_question,
    "position": gen_position_question,
    "count": gen_count_question,
    "existence": gen_existence_question,
}


def generate_qa(image_set: ImageSet, scene: SceneTruth, cfg: GenConfig) -> QASample:
    """Question for the scene's intended type, falling back to existence."""
    rng = question_rng(cfg.seed, scene.sample_id)
    qa = _GENERATORS[scene.intended_qtype](image_set, scene, cfg, rng)
    if qa is None:
        qa = gen_existence_question(image_set, scene, cfg, rng)
    return qa
