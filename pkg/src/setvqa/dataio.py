"""Dataset assembly and JSON Lines persistence.

Line 1 is a header carrying the generator config; each following line is one
sample. Features are regenerated from the header seed on load unless the file
embeds them explicitly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import SchemaError
from .geometry import BBox
from .qgen import QASample, Question, generate_qa
from .scenes import (GenConfig, ImageSet, ObjectProposal, SceneTruth,
                     TrueObject, generate_sample, synthesize_feature)

DATASET_FORMAT_VERSION = 1


@dataclass
class Record:
    """One dataset sample; image_set is None for imported language-only data."""

    sample_id: int
    qa: QASample
    image_set: ImageSet | None
    scene: SceneTruth | None
    pretrain: bool = False


def build_dataset(cfg: GenConfig, start_id: int = 0, pretrain: bool = False) -> list[Record]:
    """Scenes plus questions for cfg.num_samples samples."""
    cfg.validate()
    records = []
    for i in range(start_id, start_id + cfg.num_samples):
        image_set, scene = generate_sample(cfg, i)
        qa = generate_qa(image_set, scene, cfg)
        records.append(Record(sample_id=i, qa=qa, image_set=image_set,
                              scene=scene, pretrain=pretrain))
    return records


def record_to_dict(rec: Record, embed_features: bool) -> dict:
    q = rec.qa.question
    d = {
        "sample_id": rec.sample_id,
        "question": {
            "text": q.text,
            "qtype": q.qtype,
            "target_categories": sorted(q.target_categories),
            "numeric_target": q.numeric_target,
        },
        "answers": list(rec.qa.answers),
        "gold": rec.qa.gold,
        "pretrain": rec.pretrain,
    }
    if rec.image_set is not None:
        d["proposals"] = [
            {
                "id": p.id, "category": p.category, "color": p.color,
                "image_idx": p.image_idx, "bbox": p.bbox.as_list(),
                "duplicate_of": p.duplicate_of,
            }
            for p in rec.image_set.proposals
        ]
    if rec.scene is not None:
        d["scene"] = {
            "intended_qtype": rec.scene.intended_qtype,
            "count_target": rec.scene.count_target,
            "true_objects": [
                {
                    "obj_id": o.obj_id, "category": o.category, "color": o.color,
                    "image_idx": o.image_idx, "bbox": o.bbox.as_list(),
                }
                for o in rec.scene.true_objects
            ],
            "proposal_owner": {str(k): v for k, v in rec.scene.proposal_owner.items()},
        }
    if embed_features and rec.image_set is not None:
        d["features"] = [p.feature.tolist() for p in rec.image_set.proposals]
    return d


def write_jsonl(path, cfg: GenConfig, records: list[Record], embed_features: bool = False) -> None:
    header = {
        "format_version": DATASET_FORMAT_VERSION,
        "gen_config": cfg.to_dict(),
        "embed_features": embed_features,
    }
    with open(path, "w") as f:
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for rec in records:
            f.write(json.dumps(record_to_dict(rec, embed_features),
                               sort_keys=True, separators=(",", ":")) + "\n")


def _record_from_dict(d: dict, cfg: GenConfig, embed_features: bool, line_no: int) -> Record:
    try:
        qd = d["question"]
        question = Question(
            text=qd["text"], qtype=qd["qtype"],
            target_categories=frozenset(qd.get("target_categories", [])),
            numeric_target=qd.get("numeric_target"),
        )
        qa = QASample(image_set_ref=d["sample_id"], question=question,
                      answers=list(d["answers"]), gold=d["gold"])
        image_set = None
        if "proposals" in d:
            embedded = d.get("features")
            proposals = []
            for j, p in enumerate(d["proposals"]):
                bbox = BBox(*p["bbox"])
                if embed_features and embedded is not None:
                    feat = np.array(embedded[j], dtype=float)
                else:
                    feat = synthesize_feature(p["category"], p["color"], bbox, cfg.seed,
                                              cfg.feature_dim, cfg.feature_noise_std)
                proposals.append(ObjectProposal(
                    id=p["id"], category=p["category"], color=p["color"],
                    image_idx=p["image_idx"], bbox=bbox,
                    duplicate_of=p.get("duplicate_of"), feature=feat,
                ))
            image_set = ImageSet(sample_id=d["sample_id"], proposals=proposals)
        scene = None
        if "scene" in d:
            sd = d["scene"]
            scene = SceneTruth(
                sample_id=d["sample_id"],
                intended_qtype=sd["intended_qtype"],
                count_target=sd.get("count_target"),
                true_objects=[
                    TrueObject(obj_id=o["obj_id"], category=o["category"], color=o["color"],
                               image_idx=o["image_idx"], bbox=BBox(*o["bbox"]))
                    for o in sd["true_objects"]
                ],
                proposal_owner={int(k): v for k, v in sd["proposal_owner"].items()},
            )
        return Record(sample_id=d["sample_id"], qa=qa, image_set=image_set,
                      scene=scene, pretrain=bool(d.get("pretrain", False)))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"line {line_no}: malformed sample record: {exc}") from exc


def read_jsonl(path) -> tuple[GenConfig, list[Record]]:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise SchemaError("empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise SchemaError(f"line 1: invalid JSON header: {exc}") from exc
    if header.get("format_version") != DATASET_FORMAT_VERSION:
        raise SchemaError(f"unsupported dataset format_version "
                          f"{header.get('format_version')!r}")
    cfg = GenConfig.from_dict(header["gen_config"])
    embed = bool(header.get("embed_features", False))
    records = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"line {i}: invalid JSON: {exc}") from exc
        records.append(_record_from_dict(d, cfg, embed, i))
    return cfg, records


def file_hash(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def records_hash(records: list[Record]) -> str:
    """Content hash for in-memory datasets (no file bytes to hash)."""
    digest = hashlib.sha256()
    for rec in records:
        digest.update(json.dumps(record_to_dict(rec, embed_features=False),
                                 sort_keys=True, separators=(",", ":")).encode())
    return digest.hexdigest()
