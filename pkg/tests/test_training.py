import json

import numpy as np
import pytest

from setvqa import model as M
from setvqa import tape as T
from setvqa.dataio import build_dataset, records_hash
from setvqa.errors import ConfigError, DivergenceError, VocabMismatchError
from setvqa.qgen import build_vocab
from setvqa.scenes import GenConfig
from setvqa.tape import Tape
from setvqa.training import (MODES, TrainConfig, bundle_from_result, load_model,
                             pretrain_then_finetune, train, write_run)
from setvqa.traincore import OptimizerState, collect_grads, step, wrap_params


def tiny_records(seed=5, n=12, **kw):
    cfg = GenConfig(seed=seed, num_samples=n, objects_per_image=(1, 2),
                    feature_dim=16, **kw)
    return build_dataset(cfg)


def pretrain_records(seed=6, n=10):
    cfg = GenConfig(seed=seed, num_samples=n, objects_per_image=(2, 3),
                    feature_dim=16, qtype_weights={"color": 0.5, "position": 0.5})
    return [r for r in build_dataset(cfg, start_id=1000, pretrain=True)]


SMALL = dict(d_word=6, d_hidden=8, batch_size=4)


class TestTrain:
    def test_one_epoch_records_metrics(self, tmp_path):
        res = train(tiny_records(), TrainConfig(epochs=1, seed=0, **SMALL))
        assert len(res.manifest["epochs"]) == 1
        assert np.isfinite(res.manifest["epochs"][0]["loss"])
        assert 0.0 <= res.manifest["epochs"][0]["train_vqa_accuracy"] <= 1.0
        ckpt, manifest = write_run(tmp_path / "run", res)
        assert ckpt.exists() and manifest.exists()
        bundle = load_model(ckpt)
        assert bundle.answer_vocab.labels == res.answer_vocab.labels

    def test_same_seed_identical_parameters(self):
        records = tiny_records()
        cfg = TrainConfig(epochs=2, seed=9, **SMALL)
        r1 = train(records, cfg)
        r2 = train(records, cfg)
        for name in r1.store.tensors:
            assert np.array_equal(r1.store.tensors[name], r2.store.tensors[name])

    def test_all_modes_run(self):
        records = tiny_records(n=8)
        for mode in MODES:
            res = train(records, TrainConfig(epochs=1, seed=0, mode=mode, **SMALL))
            assert np.isfinite(res.manifest["epochs"][0]["loss"]), mode

    def test_empty_dataset_rejected(self):
        with pytest.raises(ConfigError):
            train([], TrainConfig(epochs=1))

    def test_imageless_records_rejected(self):
        records = tiny_records(n=4)
        records[0].image_set = None
        with pytest.raises(VocabMismatchError):
            train(records, TrainConfig(epochs=1, **SMALL))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_with_flagged_manifest(self):
        # the unbounded regression head overflows under an absurd step size
        records = tiny_records(n=6, qtype_weights={"count": 1.0})
        cfg = TrainConfig(epochs=200, seed=0, learning_rate=1e30, optimizer="sgd",
                          mode="regression", lambda_reg=1.0, **SMALL)
        with pytest.raises(DivergenceError) as exc_info:
            train(records, cfg)
        manifest = getattr(exc_info.value, "manifest", None)
        assert manifest is not None and manifest["diverged"]

    def test_early_stop_on_plateau(self):
        records = tiny_records(n=6)
        cfg = TrainConfig(epochs=40, seed=0, learning_rate=1e-12, optimizer="sgd",
                          patience=2, **SMALL)
        res = train(records, cfg)
        assert len(res.manifest["epochs"]) == 3  # first epoch + two stalled

    def test_manifest_hash_tracks_dataset_bytes(self):
        r1 = tiny_records(seed=5)
        r2 = tiny_records(seed=7)
        cfg = TrainConfig(epochs=1, seed=0, **SMALL)
        m1 = train(r1, cfg).manifest
        m1_again = train(r1, cfg).manifest
        m2 = train(r2, cfg).manifest
        assert m1["dataset_hash"] == m1_again["dataset_hash"] == records_hash(r1)
        assert m1["dataset_hash"] != m2["dataset_hash"]

    def test_unknown_config_keys_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"epochs": 1, "wizardry": True})


class TestBaselineEquivalence:
    def test_baseline_trajectory_matches_stripped_loop(self):
        """Refactoring guard: mode=baseline must equal a loop with the
        adversarial/regression code paths absent altogether."""
        records = tiny_records(n=8)
        cfg = TrainConfig(epochs=2, seed=3, lambda_r=0.0, lambda_reg=0.0, **SMALL)
        res = train(records, cfg)

        answer_vocab = build_vocab([r.qa for r in records])
        word_vocab = M.WordVocab.from_texts(r.qa.question.text for r in records)
        from setvqa.training import model_config_for

        model_cfg = model_config_for(cfg, 16, answer_vocab.size)
        store = M.init_model_params(cfg.seed, model_cfg, word_vocab.size)
        opt = OptimizerState(kind=cfg.optimizer, learning_rate=cfg.learning_rate)
        prepared = [M.prepare_inputs(r.image_set, r.qa.question, word_vocab)
                    for r in records]
        lo, hi = cfg.seed & 0xFFFFFFFF, (cfg.seed >> 32) & 0xFFFFFFFF
        order_rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence((lo, hi, 31))))
        n = len(records)
        for _ in range(cfg.epochs):
            order = order_rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                for i in batch:
                    tape = Tape()
                    params = wrap_params(store)
                    out = M.forward(tape, params, model_cfg, prepared[int(i)])
                    loss = M.loss_classification(
                        tape, out, answer_vocab.lookup(records[int(i)].qa.gold))
                    tape.backward([(loss, 1.0 / len(batch))])
                    collect_grads(store, params)
                step(store, opt)

        for name in res.store.tensors:
            assert np.array_equal(res.store.tensors[name], store.tensors[name]), name


class TestTwoPhase:
    def test_zero_pretrain_epochs_equals_single_phase(self):
        pre = pretrain_records()
        main = tiny_records(n=10)
        cfg = TrainConfig(epochs=2, seed=4, pretrain_epochs=0, **SMALL)
        two = pretrain_then_finetune(pre, main, cfg)
        answer_vocab = build_vocab([r.qa for r in pre + main])
        word_vocab = M.WordVocab.from_texts(r.qa.question.text for r in pre + main)
        one = train(main, cfg, word_vocab=word_vocab, answer_vocab=answer_vocab)
        for name in two.store.tensors:
            assert np.array_equal(two.store.tensors[name], one.store.tensors[name])

    def test_merged_vocabulary_superset(self):
        pre = pretrain_records()
        main = tiny_records(n=10)
        cfg = TrainConfig(epochs=1, seed=4, pretrain_epochs=1, **SMALL)
        res = pretrain_then_finetune(pre, main, cfg)
        pre_labels = {r.qa.gold for r in pre}
        main_labels = {r.qa.gold for r in main}
        assert pre_labels | main_labels <= set(res.answer_vocab.labels)
        assert res.manifest["two_phase"]
        assert [p["phase"] for p in res.manifest["phases"]] == ["pretrain", "finetune"]

    def test_non_pretrain_qtypes_rejected(self):
        main = tiny_records(n=10)
        cfg = TrainConfig(epochs=1, seed=4, **SMALL)
        with pytest.raises(ConfigError):
            pretrain_then_finetune(main, main, cfg)

    def test_vocab_not_covering_rejected(self):
        records = tiny_records(n=8)
        from setvqa.qgen import AnswerVocab

        with pytest.raises(VocabMismatchError):
            train(records, TrainConfig(epochs=1, **SMALL),
                  answer_vocab=AnswerVocab(labels=("nothing",)))


class TestDeterministicArtifacts:
    def test_checkpoint_bytes_identical_across_runs(self, tmp_path):
        records = tiny_records(n=8)
        cfg = TrainConfig(epochs=2, seed=11, **SMALL)
        p1 = write_run(tmp_path / "a", train(records, cfg))[0]
        p2 = write_run(tmp_path / "b", train(records, cfg))[0]
        assert p1.read_bytes() == p2.read_bytes()

    def test_manifests_identical_modulo_wall_clock(self, tmp_path):
        records = tiny_records(n=8)
        cfg = TrainConfig(epochs=2, seed=11, **SMALL)
        m1 = train(records, cfg).manifest
        m2 = train(records, cfg).manifest
        m1.pop("wall_clock_sec")
        m2.pop("wall_clock_sec")
        assert json.dumps(m1, sort_keys=True) == json.dumps(m2, sort_keys=True)
