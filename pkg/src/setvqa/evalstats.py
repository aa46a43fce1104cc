"""VQA-accuracy metric, evaluation breakdowns, and answer-distribution audits.

Predictions are scored against the three annotator answers: 1 with two or
more exact matches, 0.5 with one, 0 otherwise. Matching is exact string
equality, so semantically equivalent answers ("black and white" vs "white and
black") score zero by design.
"""

from __future__ import annotations

import csv
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .dataio import Record
from .errors import SchemaError, VocabMismatchError
from .labels import WORD_TO_INT
from .qgen import QASample, Question, tokenize
from .tape import Tape
from .traincore import wrap_params


def vqa_accuracy(prediction: str, answers: list[str]) -> float:
    """1.0 with >=2 supporting annotators, 0.5 with exactly 1, else 0.0."""
    if len(answers) != 3:
        raise ValueError(f"expected exactly 3 annotator answers, got {len(answers)}")
    support = sum(1 for a in answers if a == prediction)
    if support >= 2:
        return 1.0
    if support == 1:
        return 0.5
    return 0.0


def question_type_key(question) -> str:
    """First three tokens of the question, the grouping key for breakdowns."""
    text = question.text if isinstance(question, Question) else str(question)
    toks = tokenize(text)
    if not toks:
        raise ValueError("cannot key an empty question")
    return " ".join(toks[:3])


@dataclass
class EvalReport:
    overall_accuracy: float
    language_only: bool
    sample_count: int
    checkpoint_id: str
    per_qtype: dict[str, dict]            # qtype -> {count, accuracy}
    count_word_accuracy: dict[str, dict]  # gold count word -> {count, accuracy}
    prefix_table: list[dict]              # top prefixes with answer frequencies
    confusions: dict[str, list]           # qtype -> [(gold, predicted, count)]

    def to_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "language_only": self.language_only,
            "sample_count": self.sample_count,
            "checkpoint_id": self.checkpoint_id,
            "per_qtype": self.per_qtype,
            "count_word_accuracy": self.count_word_accuracy,
            "prefix_table": self.prefix_table,
            "confusions": self.confusions,
        }


def evaluate(bundle, records: list[Record], scrub_visual: bool = False,
             top_prefixes: int = 15) -> EvalReport:
    """Argmax evaluation (ties: lowest answer index) with per-type breakdowns.

    With scrub_visual, every feature row is zeroed before the forward pass and
    count-score scaling is disabled, so predictions depend on tokens alone.
    """
    if not records:
        raise ValueError("cannot evaluate an empty dataset")
    imageless = [r.sample_id for r in records if r.image_set is None]
    if imageless:
        raise SchemaError(
            f"{len(imageless)} samples have no image sets (imported language-only "
            "data supports answer_distribution only)")
    vocab = bundle.answer_vocab
    golds = {r.qa.gold for r in records}
    if not golds & set(vocab.labels):
        raise VocabMismatchError(
            "no dataset answer appears in the model's answer vocabulary")

    per_qtype_scores: dict[str, list[float]] = defaultdict(list)
    count_word_scores: dict[str, list[float]] = defaultdict(list)
    prefix_scores: dict[str, list[float]] = defaultdict(list)
    prefix_answers: dict[str, Counter] = defaultdict(Counter)
    confusion: dict[str, Counter] = defaultdict(Counter)
    total = 0.0

    for rec in records:
        inputs = M.prepare_inputs(rec.image_set, rec.qa.question, bundle.word_vocab)
        mask = np.ones(rec.image_set.n, dtype=bool) if scrub_visual else None
        out = M.forward(Tape(), wrap_params(bundle.store), bundle.model_cfg, inputs,
                        scrub_mask=mask, disable_count_scaling=scrub_visual)
        pred = vocab.labels[int(np.argmax(out.logits))]
        score = vqa_accuracy(pred, rec.qa.answers)
        total += score
        qtype = rec.qa.question.qtype
        per_qtype_scores[qtype].append(score)
        if rec.qa.gold in WORD_TO_INT:
            count_word_scores[rec.qa.gold].append(score)
        key = question_type_key(rec.qa.question)
        prefix_scores[key].append(score)
        prefix_answers[key][rec.qa.gold] += 1
        if pred != rec.qa.gold:
            confusion[qtype][(rec.qa.gold, pred)] += 1

    top = sorted(prefix_scores, key=lambda k: (-len(prefix_scores[k]), k))[:top_prefixes]
    prefix_table = []
    for key in top:
        answers = prefix_answers[key].most_common()
        n = len(prefix_scores[key])
        prefix_table.append({
            "prefix": key,
            "count": n,
            "accuracy": float(np.mean(prefix_scores[key])),
            "answers": [[label, cnt] for label, cnt in answers],
            "top2_share": sum(cnt for _, cnt in answers[:2]) / n,
        })

    return EvalReport(
        overall_accuracy=total / len(records),
        language_only=scrub_visual,
        sample_count=len(records),
        checkpoint_id=getattr(bundle, "checkpoint_id", "") or "",
        per_qtype={
            q: {"count": len(v), "accuracy": float(np.mean(v))}
            for q, v in sorted(per_qtype_scores.items())
        },
        count_word_accuracy={
            w: {"count": len(v), "accuracy": float(np.mean(v))}
            for w, v in sorted(count_word_scores.items())
        },
        prefix_table=prefix_table,
        confusions={
            q: [[gold, pred, cnt] for (gold, pred), cnt in c.most_common(5)]
            for q, c in sorted(confusion.items())
        },
    )


def answer_distribution(records: list[Record], top_prefixes: int = 15) -> dict:
    """Gold-answer frequencies per question prefix; the dataset bias audit."""
    if not records:
        raise ValueError("cannot audit an empty dataset")
    prefix_answers: dict[str, Counter] = defaultdict(Counter)
    for rec in records:
        prefix_answers[question_type_key(rec.qa.question)][rec.qa.gold] += 1
    top = sorted(prefix_answers, key=lambda k: (-sum(prefix_answers[k].values()), k))
    table = []
    for key in top[:top_prefixes]:
        answers = prefix_answers[key].most_common()
        n = sum(cnt for _, cnt in answers)
        table.append({
            "prefix": key,
            "count": n,
            "answers": [[label, cnt] for label, cnt in answers],
            "top2_share": sum(cnt for _, cnt in answers[:2]) / n,
        })
    return {"total": len(records), "num_prefixes": len(prefix_answers), "prefixes": table}


# ---------------------------------------------------------------------------
# external annotation import (language side only)


@dataclass
class ImportResult:
    records: list[Record]
    warnings: list[str] = field(default_factory=list)

    @property
    def padded_or_truncated(self) -> bool:
        return bool(self.warnings)


def import_annotations(path, field_map: dict[str, str]) -> ImportResult:
    """Load external question/answer annotations for bias auditing.

    ``field_map`` names the question, answers, and id fields. The records get
    no image sets; only language-side analyses accept them.
    """
    for required in ("question", "answers", "id"):
        if required not in field_map:
            raise SchemaError(f"field_map must name the {required!r} field")
    raw = Path(path).read_text()
    entries: list[tuple[int, dict]] = []
    whole = None
    try:
        whole = json.loads(raw)
    except json.JSONDecodeError:
        pass
    if isinstance(whole, list):
        entries = [(i + 1, e) for i, e in enumerate(whole)]
    else:
        for i, line in enumerate(raw.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                entries.append((i, json.loads(line)))
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {i}: invalid JSON: {exc}") from exc

    records = []
    warnings = []
    for line_no, entry in entries:
        if not isinstance(entry, dict):
            raise SchemaError(f"line {line_no}: expected an object")
        missing = [name for name, key in field_map.items() if key not in entry]
        if missing:
            raise SchemaError(
                f"line {line_no}: missing mapped field(s) "
                f"{[field_map[m] for m in missing]}")
        question_text = str(entry[field_map["question"]])
        answers = [str(a) for a in entry[field_map["answers"]]]
        sample_id = entry[field_map["id"]]
        if len(answers) != 3:
            warnings.append(f"line {line_no}: {len(answers)} answers "
                            f"padded/truncated to 3")
            if answers:
                answers = (answers + [answers[-1]] * 3)[:3]
            else:
                answers = ["", "", ""]
        majority = Counter(answers).most_common(1)[0]
        gold = majority[0] if majority[1] >= 2 else answers[0]
        qa = QASample(
            image_set_ref=sample_id if isinstance(sample_id, int) else line_no,
            question=Question(text=question_text.lower(), qtype="main"),
            answers=answers,
            gold=gold,
        )
        records.append(Record(sample_id=qa.image_set_ref, qa=qa,
                              image_set=None, scene=None))
    return ImportResult(records=records, warnings=warnings)


# ---------------------------------------------------------------------------
# report files


def write_report(report: EvalReport, out_dir) -> list[Path]:
    """eval_report.json plus one CSV per breakdown; stable column orders."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / "eval_report.json"]
    with open(paths[0], "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)

    def write_csv(name: str, header: list[str], rows) -> None:
        p = out_dir / name
        with open(p, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            w.writerows(rows)
        paths.append(p)

    write_csv("per_qtype.csv", ["qtype", "count", "accuracy"],
              [(q, v["count"], v["accuracy"]) for q, v in report.per_qtype.items()])
    write_csv("count_words.csv", ["answer", "count", "accuracy"],
              [(w_, v["count"], v["accuracy"])
               for w_, v in report.count_word_accuracy.items()])
    write_csv("prefixes.csv",
              ["prefix", "count", "accuracy", "top_answer", "top2_share"],
              [(row["prefix"], row["count"], row["accuracy"],
                row["answers"][0][0] if row["answers"] else "", row["top2_share"])
               for row in report.prefix_table])
    write_csv("confusions.csv", ["qtype", "gold", "predicted", "count"],
              [(q, gold, pred, cnt)
               for q, rows in report.confusions.items()
               for gold, pred, cnt in rows])
    return paths


def write_distribution_report(dist: dict, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "answer_distribution.json"
    with open(json_path, "w") as f:
        json.dump(dist, f, indent=2, sort_keys=True)
    csv_path = out_dir / "answer_distribution.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["prefix", "count", "top_answer", "top_share", "top2_share"])
        for row in dist["prefixes"]:
            top_label, top_cnt = row["answers"][0]
            w.writerow([row["prefix"], row["count"], top_label,
                        top_cnt / row["count"], row["top2_share"]])
    return [json_path, csv_path]
