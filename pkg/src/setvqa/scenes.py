"""Deterministic generator of synthetic multi-image scenes with exact ground truth.

A scene is a set of ``N_IMAGES`` images, each holding object proposals. True
objects carry category, color, and a box; proposals are what a detector would
emit: one primary proposal per true object, optional cross-image re-detections
of the same object in an adjacent view, and optional jittered duplicate
proposals that cause double counting downstream.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, asdict
from functools import lru_cache

import numpy as np

from .errors import ConfigError
from .geometry import BBox, iou
from .labels import CATEGORIES, COLORS

N_IMAGES = 6

QTYPES = ("color", "position", "count", "existence")

# Seed-stream domain tags; keep values stable so datasets reproduce across versions.
_DOM_SAMPLE = 11
_DOM_CAT_CODE = 12
_DOM_COLOR_CODE = 13
_DOM_NOISE = 14
_DOM_QUESTION = 15

# Counts the skewed draw can produce ("one" .. "nine").
BIASED_COUNTS = (2, 3)
UNBIASED_COUNTS = (1, 4, 5, 6, 7, 8, 9)
MAX_COUNT = 9
# Answer-distribution skew matching a uniform draw over all nine counts.
NEUTRAL_SKEW = len(BIASED_COUNTS) / (len(BIASED_COUNTS) + len(UNBIASED_COUNTS))


@dataclass
class GenConfig:
    """Everything the generator needs; a fixed config reproduces a dataset bitwise."""

    seed: int = 0
    num_samples: int = 100
    objects_per_image: tuple[int, int] = (1, 5)
    dup_proposal_rate: float = 0.3
    dup_jitter: float = 0.03
    dup_iou_min: float = 0.5
    cross_image_rate: float = 0.1
    bias_skew: float = NEUTRAL_SKEW
    detector_noise: float = 0.0
    annotator_error: float = 0.0
    feature_dim: int = 64
    feature_noise_std: float = 0.1
    existence_yes_rate: float = 0.5
    qtype_weights: dict[str, float] = field(
        default_factory=lambda: {"color": 0.25, "position": 0.25, "count": 0.25, "existence": 0.25}
    )

    def validate(self) -> None:
        lo, hi = self.objects_per_image
        if not (isinstance(self.seed, int) and 0 <= self.seed < 2**64):
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")
        if self.num_samples < 0:
            raise ConfigError("num_samples must be non-negative")
        if lo < 1 or hi < lo:
            raise ConfigError(f"objects_per_image must satisfy 1 <= min <= max, got {lo, hi}")
        for name in ("dup_proposal_rate", "cross_image_rate", "bias_skew",
                     "detector_noise", "annotator_error", "existence_yes_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.dup_jitter < 0:
            raise ConfigError("dup_jitter must be non-negative")
        if not 0.0 < self.dup_iou_min <= 1.0:
            raise ConfigError("dup_iou_min must be in (0, 1]")
        if self.feature_dim < 12:
            raise ConfigError("feature_dim must be at least 12")
        if self.feature_noise_std < 0:
            raise ConfigError("feature_noise_std must be non-negative")
        unknown = set(self.qtype_weights) - set(QTYPES)
        if unknown:
            raise ConfigError(f"unknown question types in qtype_weights: {sorted(unknown)}")
        weights = [self.qtype_weights.get(q, 0.0) for q in QTYPES]
        if any(w < 0 for w in weights) or sum(weights) <= 0:
            raise ConfigError("qtype_weights must be non-negative and sum to a positive value")
        if self.qtype_weights.get("count", 0.0) > 0 and N_IMAGES * hi < MAX_COUNT:
            raise ConfigError(
                f"count questions need capacity for {MAX_COUNT} objects; "
                f"raise objects_per_image max above {MAX_COUNT / N_IMAGES:.1f}"
            )
        if self.qtype_weights.get("position", 0.0) > 0 and (hi < 2 or lo > 4):
            raise ConfigError("position questions need 2-4 objects in one image")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objects_per_image"] = list(self.objects_per_image)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown GenConfig keys: {sorted(unknown)}")
        d = dict(d)
        if "objects_per_image" in d:
            d["objects_per_image"] = tuple(d["objects_per_image"])
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class TrueObject:
    """One real object in the scene; proposals are detections of these."""

    obj_id: int
    category: str
    color: str
    image_idx: int
    bbox: BBox


@dataclass
class ObjectProposal:
    """A detected region: what the model sees."""

    id: int
    category: str
    color: str
    image_idx: int
    bbox: BBox
    duplicate_of: int | None
    feature: np.ndarray


@dataclass
class ImageSet:
    sample_id: int
    proposals: list[ObjectProposal]

    @property
    def n(self) -> int:
        return len(self.proposals)

    def feature_matrix(self) -> np.ndarray:
        return np.stack([p.feature for p in self.proposals])

    def boxes(self) -> list[BBox]:
        return [p.bbox for p in self.proposals]

    def image_indices(self) -> np.ndarray:
        return np.array([p.image_idx for p in self.proposals], dtype=np.int64)


@dataclass
class SceneTruth:
    """Exact ground truth the question generator and audits read."""

    sample_id: int
    intended_qtype: str
    true_objects: list[TrueObject]
    count_target: str | None
    # proposal id -> true object id (covers primaries, cross-image views, duplicates)
    proposal_owner: dict[int, int]

    def category_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for obj in self.true_objects:
            counts[obj.category] = counts.get(obj.category, 0) + 1
        return counts

    def unique_categories(self) -> list[str]:
        return sorted(c for c, n in self.category_counts().items() if n == 1)


def _seed_words(seed: int) -> tuple[int, int]:
    return seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF


def sample_rng(seed: int, sample_id: int, domain: int = _DOM_SAMPLE) -> np.random.Generator:
    """Per-sample stream derived from the master seed; serial == parallel."""
    lo, hi = _seed_words(seed)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((lo, hi, domain, sample_id))))


def question_rng(seed: int, sample_id: int) -> np.random.Generator:
    return sample_rng(seed, sample_id, domain=_DOM_QUESTION)


def _float_bits(x: float) -> int:
    return struct.unpack("<Q", struct.pack("<d", x))[0]


def _feature_layout(d_feat: int) -> tuple[int, int, int]:
    d_code = 3 * (d_feat - 4) // 8
    d_noise = d_feat - 4 - 2 * d_code
    return d_code, d_code, d_noise


@lru_cache(maxsize=64)
def _label_codebook(seed: int, domain: int, n_labels: int, dim: int) -> np.ndarray:
    """Seeded random unit code vector per label, mutually orthogonal when dim allows.

    Orthogonality keeps label signals separable under mean pooling over many
    proposals; below n_labels dimensions it falls back to independent unit
    vectors.
    """
    lo, hi = _seed_words(seed)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((lo, hi, domain))))
    g = rng.normal(size=(dim, n_labels))
    if dim >= n_labels:
        q, r = np.linalg.qr(g)
        codes = (q * np.sign(np.diag(r))).T
    else:
        codes = (g / np.linalg.norm(g, axis=0)).T
    codes.setflags(write=False)
    return codes


def _label_code(seed: int, domain: int, label_idx: int, dim: int) -> np.ndarray:
    n_labels = len(CATEGORIES) if domain == _DOM_CAT_CODE else len(COLORS)
    return _label_codebook(seed, domain, n_labels, dim)[label_idx]


def synthesize_feature(
    category: str,
    color: str,
    bbox: BBox,
    seed: int,
    d_feat: int = 64,
    noise_std: float = 0.1,
) -> np.ndarray:
    """Stand-in for detector features: category code + color code + geometry + noise.

    Pure function of its arguments; the noise stream is seeded from
    (seed, category, color, bbox) so regeneration is bitwise reproducible.
    """
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}")
    if color not in COLORS:
        raise ValueError(f"unknown color {color!r}")
    d_cat, d_col, d_noise = _feature_layout(d_feat)
    cat_idx = CATEGORIES.index(category)
    col_idx = COLORS.index(color)
    lo, hi = _seed_words(seed)
    coord_bits = [_float_bits(c) & 0xFFFFFFFF for c in bbox.as_list()]
    coord_bits += [(_float_bits(c) >> 32) & 0xFFFFFFFF for c in bbox.as_list()]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        (lo, hi, _DOM_NOISE, cat_idx, col_idx, *coord_bits)
    )))
    noise = rng.normal(0.0, noise_std, size=d_noise) if noise_std > 0 else np.zeros(d_noise)
    return np.concatenate([
        _label_code(seed, _DOM_CAT_CODE, cat_idx, d_cat),
        _label_code(seed, _DOM_COLOR_CODE, col_idx, d_col),
        np.array(bbox.as_list()),
        noise,
    ])


def _random_box(rng: np.random.Generator) -> BBox:
    w = rng.uniform(0.08, 0.3)
    h = rng.uniform(0.08, 0.3)
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    return BBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def _translated_box(rng: np.random.Generator, box: BBox) -> BBox:
    """Same object seen from an adjacent camera: same size, new position."""
    w, h = box.x2 - box.x1, box.y2 - box.y1
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    return BBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def _jittered_duplicate(rng: np.random.Generator, box: BBox, jitter: float, iou_min: float) -> BBox:
    for scale in (1.0, 0.5, 0.2, 0.05):
        for _ in range(10):
            j = jitter * scale
            coords = [c + rng.uniform(-j, j) for c in box.as_list()]
            x1, y1 = min(coords[0], coords[2]), min(coords[1], coords[3])
            x2, y2 = max(coords[0], coords[2]), max(coords[1], coords[3])
            x1, y1 = max(0.0, x1), max(0.0, y1)
            x2, y2 = min(1.0, x2), min(1.0, y2)
            if x2 - x1 <= 1e-6 or y2 - y1 <= 1e-6:
                continue
            cand = BBox(x1, y1, x2, y2)
            if iou(cand, box) >= iou_min:
                return cand
    return box


def _draw_biased_count(rng: np.random.Generator, skew: float) -> int:
    if rng.random() < skew:
        return int(rng.choice(BIASED_COUNTS))
    return int(rng.choice(UNBIASED_COUNTS))


def _plan_categories(cfg: GenConfig, rng: np.random.Generator) -> tuple[str, list[list[str]], str | None]:
    """Pick the question type and per-image category lists honoring its constraints."""
    lo, hi = cfg.objects_per_image
    weights = np.array([cfg.qtype_weights.get(q, 0.0) for q in QTYPES], dtype=float)
    qtype = str(rng.choice(QTYPES, p=weights / weights.sum()))
    counts = rng.integers(lo, hi + 1, size=N_IMAGES)
    cats_per_image: list[list[str]] = [[] for _ in range(N_IMAGES)]
    count_target: str | None = None

    if qtype == "count":
        target = str(rng.choice(CATEGORIES))
        count_target = target
        c = _draw_biased_count(rng, cfg.bias_skew)
        while counts.sum() < c:
            grow = [i for i in range(N_IMAGES) if counts[i] < hi]
            counts[int(rng.choice(grow))] += 1
        slots = [(img, s) for img in range(N_IMAGES) for s in range(counts[img])]
        chosen = rng.choice(len(slots), size=c, replace=False)
        chosen_set = {slots[int(i)] for i in chosen}
        others = [cat for cat in CATEGORIES if cat != target]
        for img in range(N_IMAGES):
            for s in range(counts[img]):
                if (img, s) in chosen_set:
                    cats_per_image[img].append(target)
                else:
                    cats_per_image[img].append(str(rng.choice(others)))
    elif qtype == "color":
        target = str(rng.choice(CATEGORIES))
        img0 = int(rng.integers(N_IMAGES))
        others = [cat for cat in CATEGORIES if cat != target]
        for img in range(N_IMAGES):
            for s in range(counts[img]):
                cats_per_image[img].append(str(rng.choice(others)))
        slot = int(rng.integers(counts[img0]))
        cats_per_image[img0][slot] = target
    elif qtype == "position":
        img0 = int(rng.integers(N_IMAGES))
        k = int(np.clip(int(rng.integers(2, 4)), lo, min(hi, 4)))
        k = max(k, 2)
        perm = [str(c) for c in rng.permutation(np.array(CATEGORIES))]
        uniques, pool = perm[:k], perm[k:]
        counts[img0] = k
        for img in range(N_IMAGES):
            if img == img0:
                cats_per_image[img] = list(uniques)
            else:
                cats_per_image[img] = [str(rng.choice(pool)) for _ in range(counts[img])]
    else:
        for img in range(N_IMAGES):
            cats_per_image[img] = [str(rng.choice(np.array(CATEGORIES))) for _ in range(counts[img])]

    return qtype, cats_per_image, count_target


def generate_sample(cfg: GenConfig, sample_id: int) -> tuple[ImageSet, SceneTruth]:
    """Build one image set plus its ground truth; pure function of (cfg, sample_id)."""
    rng = sample_rng(cfg.seed, sample_id)
    qtype, cats_per_image, count_target = _plan_categories(cfg, rng)

    true_objects: list[TrueObject] = []
    for img in range(N_IMAGES):
        for cat in cats_per_image[img]:
            true_objects.append(TrueObject(
                obj_id=len(true_objects),
                category=cat,
                color=str(rng.choice(np.array(COLORS))),
                image_idx=img,
                bbox=_random_box(rng),
            ))

    proposals: list[ObjectProposal] = []
    owner: dict[int, int] = {}

    def emit(category, color, image_idx, bbox, duplicate_of, obj_id):
        pid = len(proposals)
        feat = synthesize_feature(category, color, bbox, cfg.seed,
                                  cfg.feature_dim, cfg.feature_noise_std)
        proposals.append(ObjectProposal(pid, category, color, image_idx, bbox, duplicate_of, feat))
        owner[pid] = obj_id
        return pid

    primary_pid = {}
    for obj in true_objects:
        primary_pid[obj.obj_id] = emit(obj.category, obj.color, obj.image_idx, obj.bbox, None, obj.obj_id)

    # The same object re-detected in an adjacent camera view. Not a duplicate_of
    # link (those are same-image by contract); the owner map ties it back.
    for obj in true_objects:
        if rng.random() < cfg.cross_image_rate:
            adj = (obj.image_idx + (1 if rng.random() < 0.5 else -1)) % N_IMAGES
            emit(obj.category, obj.color, adj, _translated_box(rng, obj.bbox), None, obj.obj_id)

    for obj in true_objects:
        if rng.random() < cfg.dup_proposal_rate:
            dup_box = _jittered_duplicate(rng, obj.bbox, cfg.dup_jitter, cfg.dup_iou_min)
            emit(obj.category, obj.color, obj.image_idx, dup_box,
                 primary_pid[obj.obj_id], obj.obj_id)

    image_set = ImageSet(sample_id=sample_id, proposals=proposals)
    scene = SceneTruth(
        sample_id=sample_id,
        intended_qtype=qtype,
        true_objects=true_objects,
        count_target=count_target,
        proposal_owner=owner,
    )
    return image_set, scene


def generate_dataset(cfg: GenConfig) -> list[tuple[ImageSet, SceneTruth]]:
    """All samples for a config. Deterministic; samples are independent streams."""
    cfg.validate()
    return [generate_sample(cfg, i) for i in range(cfg.num_samples)]
