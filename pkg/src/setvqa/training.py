"""Training schedules for all loss modes, plus two-phase enhanced pre-training."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import model as M
from . import tape as T
from .dataio import Record, records_hash
from .errors import ConfigError, DivergenceError, VocabMismatchError
from .evalstats import vqa_accuracy
from .qgen import AnswerVocab, build_vocab
from .tape import Tape
from .traincore import (OptimizerState, ParamStore, collect_grads, load_checkpoint,
                        save_checkpoint, step, wrap_params)

MODES = ("baseline", "count_aware", "regression", "advreg_ce", "advreg_bce")

_DOM_ORDER = 31


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0
    mode: str = "baseline"
    lambda_r: float = 0.1
    lambda_reg: float = 0.1
    tau: float = 10.0
    pretrain_path: str | None = None
    pretrain_epochs: int = 3
    patience: int = 0  # 0 disables early stopping on the train-loss plateau
    optimizer: str = "adam"
    d_word: int = 32
    d_hidden: int = 64
    pwl_intervals: int = 8

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown training mode {self.mode!r}; pick one of {MODES}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.lambda_r < 0 or self.lambda_reg < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


def model_config_for(cfg: TrainConfig, d_feat: int, num_answers: int) -> M.ModelConfig:
    mc = M.ModelConfig(
        d_feat=d_feat, num_answers=num_answers, d_word=cfg.d_word, d_hidden=cfg.d_hidden,
        count_aware=cfg.mode == "count_aware",
        regression_head=cfg.mode == "regression",
        pwl_intervals=cfg.pwl_intervals,
    )
    mc.validate()
    return mc


@dataclass
class TrainResult:
    store: ParamStore
    model_cfg: M.ModelConfig
    word_vocab: M.WordVocab
    answer_vocab: AnswerVocab
    train_cfg: TrainConfig
    manifest: dict


def _check_vocab_covers(answer_vocab: AnswerVocab, records: list[Record], what: str) -> None:
    missing = sorted({r.qa.gold for r in records} - set(answer_vocab.labels))
    if missing:
        raise VocabMismatchError(f"{what} gold answers missing from vocabulary: {missing}")


def _sample_loss(tape: Tape, params, model_cfg: M.ModelConfig, cfg: TrainConfig,
                 rec: Record, inputs: M.ModelInputs, gold_idx: int):
    out = M.forward(tape, params, model_cfg, inputs)
    if cfg.mode in ("advreg_ce", "advreg_bce"):
        mask = M.scrub_objects(rec.qa.question, rec.image_set)
        out_adv = M.forward(tape, params, model_cfg, inputs, scrub_mask=mask)
        loss = M.loss_adversarial(tape, out, out_adv, gold_idx, cfg.mode,
                                  cfg.lambda_r, cfg.tau)
    elif cfg.mode == "regression" and rec.qa.question.qtype == "count" \
            and rec.qa.question.numeric_target is not None:
        ce = M.loss_classification(tape, out, gold_idx)
        mse = M.loss_regression(tape, out, rec.qa.question.numeric_target,
                                rec.qa.question.qtype)
        loss = T.sadd(tape, ce, T.smul(tape, mse, cfg.lambda_reg))
    else:
        loss = M.loss_classification(tape, out, gold_idx)
    return out, loss


def _dataset_accuracy(records, prepared, store, model_cfg, answer_vocab) -> float:
    total = 0.0
    for rec, inputs in zip(records, prepared):
        out = M.forward(Tape(), wrap_params(store), model_cfg, inputs)
        pred = answer_vocab.labels[int(np.argmax(out.logits))]
        total += vqa_accuracy(pred, rec.qa.answers)
    return total / max(len(records), 1)


def train(records: list[Record], cfg: TrainConfig,
          word_vocab: M.WordVocab | None = None,
          answer_vocab: AnswerVocab | None = None,
          init_store: ParamStore | None = None,
          dataset_hash: str | None = None) -> TrainResult:
    """One training run; bitwise deterministic for fixed (records, cfg)."""
    cfg.validate()
    if not records:
        raise ConfigError("cannot train on an empty dataset")
    for rec in records:
        if rec.image_set is None:
            raise VocabMismatchError(
                "dataset contains language-only samples without image sets")

    if answer_vocab is None:
        answer_vocab = build_vocab([r.qa for r in records])
    else:
        _check_vocab_covers(answer_vocab, records, "training")
    if word_vocab is None:
        word_vocab = M.WordVocab.from_texts(r.qa.question.text for r in records)

    d_feat = records[0].image_set.proposals[0].feature.shape[0]
    model_cfg = model_config_for(cfg, d_feat, answer_vocab.size)
    store = init_store if init_store is not None \
        else M.init_model_params(cfg.seed, model_cfg, word_vocab.size)
    opt = OptimizerState(kind=cfg.optimizer, learning_rate=cfg.learning_rate)

    prepared = [M.prepare_inputs(r.image_set, r.qa.question, word_vocab) for r in records]
    gold_idx = np.array([answer_vocab.lookup(r.qa.gold) for r in records])

    lo, hi = cfg.seed & 0xFFFFFFFF, (cfg.seed >> 32) & 0xFFFFFFFF
    order_rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((lo, hi, _DOM_ORDER))))

    started = time.monotonic()
    manifest = {
        "config": cfg.to_dict(),
        "model_config": model_cfg.to_dict(),
        "dataset_hash": dataset_hash if dataset_hash is not None else records_hash(records),
        "num_samples": len(records),
        "seed": cfg.seed,
        "epochs": [],
        "diverged": False,
        "checkpoint_path": None,
    }

    best_loss = float("inf")
    stall = 0
    n = len(records)
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(n)
        epoch_loss = 0.0
        epoch_acc = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            scale = 1.0 / len(batch)
            batch_loss = 0.0
            for i in batch:
                rec = records[int(i)]
                tape = Tape()
                params = wrap_params(store)
                out, loss = _sample_loss(tape, params, model_cfg, cfg, rec,
                                         prepared[int(i)], int(gold_idx[int(i)]))
                tape.backward([(loss, scale)])
                collect_grads(store, params)
                batch_loss += loss.v * scale
                pred = answer_vocab.labels[int(np.argmax(out.logits))]
                epoch_acc += vqa_accuracy(pred, rec.qa.answers)
            if not np.isfinite(batch_loss):
                manifest["diverged"] = True
                manifest["wall_clock_sec"] = time.monotonic() - started
                err = DivergenceError(f"non-finite loss at epoch {epoch}")
                err.manifest = manifest
                raise err
            epoch_loss += batch_loss * len(batch)
            step(store, opt)
        epoch_loss /= n
        manifest["epochs"].append({
            "epoch": epoch,
            "loss": epoch_loss,
            "train_vqa_accuracy": epoch_acc / n,
        })
        if cfg.patience > 0:
            if epoch_loss < best_loss - 1e-9:
                best_loss = epoch_loss
                stall = 0
            else:
                stall += 1
                if stall >= cfg.patience:
                    break
        else:
            best_loss = min(best_loss, epoch_loss)

    manifest["final_train_accuracy"] = _dataset_accuracy(
        records, prepared, store, model_cfg, answer_vocab)
    manifest["wall_clock_sec"] = time.monotonic() - started
    return TrainResult(store=store, model_cfg=model_cfg, word_vocab=word_vocab,
                       answer_vocab=answer_vocab, train_cfg=cfg, manifest=manifest)


def pretrain_then_finetune(pretrain_records: list[Record], main_records: list[Record],
                           cfg: TrainConfig) -> TrainResult:
    """Phase 1 on generated color/position questions, phase 2 on the main set.

    Vocabularies are merged up front so the classifier head never resizes;
    no parameters are frozen in phase 2.
    """
    cfg.validate()
    bad = sorted({r.qa.question.qtype for r in pretrain_records}
                 - {"color", "position"})
    if bad:
        raise ConfigError(f"pretrain set must contain only color/position "
                          f"questions, found {bad}")
    answer_vocab = build_vocab([r.qa for r in pretrain_records + main_records])
    word_vocab = M.WordVocab.from_texts(
        r.qa.question.text for r in pretrain_records + main_records)

    phases = []
    store = None
    if cfg.pretrain_epochs > 0 and pretrain_records:
        phase1_cfg = TrainConfig.from_dict({**cfg.to_dict(), "epochs": cfg.pretrain_epochs})
        res1 = train(pretrain_records, phase1_cfg, word_vocab=word_vocab,
                     answer_vocab=answer_vocab)
        store = res1.store
        phases.append({"phase": "pretrain", **res1.manifest})
    res2 = train(main_records, cfg, word_vocab=word_vocab,
                 answer_vocab=answer_vocab, init_store=store)
    phases.append({"phase": "finetune", **res2.manifest})
    res2.manifest = {
        "config": cfg.to_dict(),
        "two_phase": True,
        "phases": phases,
        "seed": cfg.seed,
        "diverged": any(p.get("diverged") for p in phases),
        "checkpoint_path": None,
        "final_train_accuracy": phases[-1]["final_train_accuracy"],
        "wall_clock_sec": sum(p["wall_clock_sec"] for p in phases),
    }
    return res2


# ---------------------------------------------------------------------------
# persistence


def checkpoint_meta(result: TrainResult) -> dict:
    return {
        "model_config": result.model_cfg.to_dict(),
        "train_config": result.train_cfg.to_dict(),
        "answer_vocab": list(result.answer_vocab.labels),
        "word_vocab": list(result.word_vocab.words),
    }


def write_run(out_dir, result: TrainResult) -> tuple[Path, Path]:
    """Write checkpoint.json and manifest.json side by side."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.json"
    manifest_path = out_dir / "manifest.json"
    save_checkpoint(ckpt_path, result.store, checkpoint_meta(result))
    result.manifest["checkpoint_path"] = str(ckpt_path)
    with open(manifest_path, "w") as f:
        json.dump(result.manifest, f, indent=2, sort_keys=True)
    return ckpt_path, manifest_path


@dataclass
class ModelBundle:
    store: ParamStore
    model_cfg: M.ModelConfig
    word_vocab: M.WordVocab
    answer_vocab: AnswerVocab
    checkpoint_id: str = ""


def bundle_from_result(result: TrainResult) -> ModelBundle:
    return ModelBundle(store=result.store, model_cfg=result.model_cfg,
                       word_vocab=result.word_vocab, answer_vocab=result.answer_vocab)


def load_model(checkpoint_path) -> ModelBundle:
    store, meta = load_checkpoint(checkpoint_path)
    from .dataio import file_hash

    return ModelBundle(
        store=store,
        model_cfg=M.ModelConfig.from_dict(meta["model_config"]),
        word_vocab=M.WordVocab(words=tuple(meta["word_vocab"])),
        answer_vocab=AnswerVocab(labels=tuple(meta["answer_vocab"])),
        checkpoint_id=file_hash(checkpoint_path)[:16],
    )
