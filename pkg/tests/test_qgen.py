import re
from collections import Counter

import numpy as np
import pytest

from setvqa.dataio import build_dataset
from setvqa.geometry import BBox
from setvqa.labels import INT_TO_WORD, WORD_TO_INT
from setvqa.qgen import (TEMPLATE_PATTERNS, QASample, Question, build_vocab,
                         gen_color_question, gen_count_question,
                         gen_existence_question, gen_position_question,
                         simulate_annotators, tokenize)
from setvqa.scenes import (GenConfig, ImageSet, ObjectProposal, SceneTruth,
                           TrueObject, synthesize_feature)


def make_scene(objs, sample_id=0, qtype="existence", count_target=None):
    """objs: list of (category, color, image_idx, BBox)."""
    true_objects = [TrueObject(i, c, col, img, box)
                    for i, (c, col, img, box) in enumerate(objs)]
    proposals = [
        ObjectProposal(i, o.category, o.color, o.image_idx, o.bbox, None,
                       synthesize_feature(o.category, o.color, o.bbox, seed=0))
        for i, o in enumerate(true_objects)
    ]
    scene = SceneTruth(sample_id=sample_id, intended_qtype=qtype,
                       true_objects=true_objects, count_target=count_target,
                       proposal_owner={i: i for i in range(len(objs))})
    return ImageSet(sample_id=sample_id, proposals=proposals), scene


def rng():
    return np.random.default_rng(0)


CFG = GenConfig(seed=0)


class TestColorQuestion:
    def test_unique_green_sign(self):
        image_set, scene = make_scene([
            ("sign", "green", 0, BBox(0.1, 0.1, 0.3, 0.3)),
            ("car", "red", 1, BBox(0.2, 0.2, 0.5, 0.5)),
            ("car", "blue", 2, BBox(0.4, 0.4, 0.7, 0.7)),
        ])
        qa = gen_color_question(image_set, scene, CFG, rng())
        assert qa.question.text == "what is the color of the sign?"
        assert qa.gold == "green"
        assert qa.question.qtype == "color"

    def test_no_unique_object_no_question(self):
        image_set, scene = make_scene([
            ("car", "red", 0, BBox(0.1, 0.1, 0.3, 0.3)),
            ("car", "blue", 1, BBox(0.2, 0.2, 0.5, 0.5)),
        ])
        assert gen_color_question(image_set, scene, CFG, rng()) is None

    def test_detector_noise_corrupts_label_keeps_answer(self):
        image_set, scene = make_scene([
            ("bus", "orange", 0, BBox(0.1, 0.1, 0.3, 0.3)),
        ])
        noisy = GenConfig(seed=0, detector_noise=1.0)
        qa = gen_color_question(image_set, scene, noisy, rng())
        assert qa.question.text == "what is the color of the train?"
        assert qa.gold == "orange"
        assert "train" in qa.question.target_categories


class TestPositionQuestion:
    def test_wall_above_sidewalk_style_pair(self):
        # wall above sign in one image, nearest pair: bottom-most is the sign
        image_set, scene = make_scene([
            ("wall", "white", 0, BBox(0.2, 0.1, 0.6, 0.3)),
            ("sign", "green", 0, BBox(0.2, 0.5, 0.6, 0.7)),
        ])
        found = set()
        for k in range(20):
            qa = gen_position_question(image_set, scene, CFG, np.random.default_rng(k))
            found.add((qa.question.text, qa.gold))
        assert ("what is below the wall?", "sign") in found
        assert ("what is above the sign?", "wall") in found

    def test_single_object_per_image_no_question(self):
        image_set, scene = make_scene([
            ("wall", "white", 0, BBox(0.2, 0.1, 0.6, 0.3)),
            ("sign", "green", 1, BBox(0.2, 0.5, 0.6, 0.7)),
        ])
        assert gen_position_question(image_set, scene, CFG, rng()) is None

    def test_identical_centers_skipped(self):
        image_set, scene = make_scene([
            ("wall", "white", 0, BBox(0.2, 0.2, 0.6, 0.6)),
            ("sign", "green", 0, BBox(0.3, 0.3, 0.5, 0.5)),  # same center
        ])
        assert gen_position_question(image_set, scene, CFG, rng()) is None

    def test_non_unique_categories_skipped(self):
        image_set, scene = make_scene([
            ("wall", "white", 0, BBox(0.2, 0.1, 0.6, 0.3)),
            ("sign", "green", 0, BBox(0.2, 0.5, 0.6, 0.7)),
            ("wall", "red", 3, BBox(0.1, 0.1, 0.2, 0.2)),  # second wall elsewhere
        ])
        qa = gen_position_question(image_set, scene, CFG, rng())
        assert qa is None or "wall" not in (qa.gold, *qa.question.target_categories)


class TestCountQuestion:
    def test_counts_true_objects_not_proposals(self):
        image_set, scene = make_scene([
            ("car", "red", 0, BBox(0.1, 0.1, 0.3, 0.3)),
            ("car", "blue", 1, BBox(0.2, 0.2, 0.5, 0.5)),
            ("car", "white", 2, BBox(0.4, 0.4, 0.7, 0.7)),
        ], count_target="car")
        # add two duplicate proposals of the first car
        base = image_set.proposals[0]
        for k in (3, 4):
            image_set.proposals.append(ObjectProposal(
                k, "car", "red", 0, base.bbox, base.id, base.feature))
            scene.proposal_owner[k] = 0
        qa = gen_count_question(image_set, scene, CFG, rng())
        assert qa.gold == "three"
        assert qa.question.numeric_target == 3
        assert qa.question.text == "how many cars are there?"

    def test_zero_count_categories_not_asked(self):
        image_set, scene = make_scene([("car", "red", 0, BBox(0.1, 0.1, 0.3, 0.3))])
        for k in range(50):
            qa = gen_count_question(image_set, scene, CFG, np.random.default_rng(k))
            assert qa.question.target_categories <= {"car"}

    def test_word_integer_map(self):
        assert WORD_TO_INT["fifteen"] == 15
        assert INT_TO_WORD[15] == "fifteen"
        assert WORD_TO_INT["one"] == 1 and WORD_TO_INT["twenty"] == 20

    def test_person_pluralizes_to_people(self):
        image_set, scene = make_scene([
            ("person", "red", 0, BBox(0.1, 0.1, 0.3, 0.3)),
            ("person", "blue", 1, BBox(0.2, 0.2, 0.5, 0.5)),
        ], count_target="person")
        qa = gen_count_question(image_set, scene, CFG, rng())
        assert qa.question.text == "how many people are there?"
        assert qa.gold == "two"


class TestExistenceQuestion:
    def test_present_category_yes(self):
        image_set, scene = make_scene([("car", "red", 0, BBox(0.1, 0.1, 0.3, 0.3))])
        cfg = GenConfig(seed=0, existence_yes_rate=1.0)
        qa = gen_existence_question(image_set, scene, cfg, rng())
        assert qa.question.text == "is there a car?"
        assert qa.gold == "yes"

    def test_absent_category_no(self):
        image_set, scene = make_scene([("car", "red", 0, BBox(0.1, 0.1, 0.3, 0.3))])
        cfg = GenConfig(seed=0, existence_yes_rate=0.0)
        qa = gen_existence_question(image_set, scene, cfg, rng())
        assert qa.gold == "no"
        assert "car" not in qa.question.target_categories

    def test_vocab_contains_yes_and_no(self):
        cfg = GenConfig(seed=2, num_samples=40, qtype_weights={"existence": 1.0})
        vocab = build_vocab([r.qa for r in build_dataset(cfg)])
        assert "yes" in vocab.labels and "no" in vocab.labels


class TestAnnotators:
    def test_zero_error_returns_gold_thrice(self):
        cfg = GenConfig(seed=0, annotator_error=0.0)
        assert simulate_annotators("three", cfg, rng()) == ["three", "three", "three"]

    def test_full_error_count_perturbs_by_one(self):
        cfg = GenConfig(seed=0, annotator_error=1.0)
        r = rng()
        for _ in range(50):
            for ans in simulate_annotators("three", cfg, r):
                assert ans in ("two", "four")

    def test_color_perturbation_stays_in_palette(self):
        cfg = GenConfig(seed=0, annotator_error=1.0)
        r = rng()
        for _ in range(20):
            for ans in simulate_annotators("red", cfg, r):
                assert ans != "red"
                assert ans in ("black", "blue", "green", "orange", "white")

    def test_mean_accuracy_matches_binomial_expectation(self):
        # annotators agree with gold independently w.p. 1-e; predicting gold scores
        # 1 with >=2 agreements and 0.5 with exactly 1
        e = 0.2
        p = 1.0 - e
        expected = (p**3 + 3 * p**2 * e) + 0.5 * (3 * p * e**2)
        cfg = GenConfig(seed=0, annotator_error=e)
        r = np.random.default_rng(123)
        from setvqa.evalstats import vqa_accuracy

        scores = [vqa_accuracy("three", simulate_annotators("three", cfg, r))
                  for _ in range(10000)]
        assert np.mean(scores) == pytest.approx(expected, abs=0.01)


class TestVocab:
    def test_alphabetical_dense_indices(self):
        samples = [
            QASample(0, Question("is there a car?", "existence"), ["yes", "yes", "yes"], "yes"),
            QASample(1, Question("is there a bus?", "existence"), ["no", "no", "no"], "no"),
            QASample(2, Question("how many cars are there?", "count"),
                     ["two", "two", "two"], "two"),
        ]
        vocab = build_vocab(samples)
        assert vocab.labels == ("no", "two", "yes")
        assert vocab.size == 3
        assert [vocab.lookup(x) for x in vocab.labels] == [0, 1, 2]

    def test_idempotent(self):
        samples = [QASample(0, Question("is there a car?", "existence"),
                            ["yes", "yes", "no"], "yes")]
        assert build_vocab(samples).labels == build_vocab(samples).labels

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            build_vocab([])


class TestDatasetInvariants:
    def test_gold_consistent_with_truth_without_noise(self):
        cfg = GenConfig(seed=21, num_samples=120, detector_noise=0.0,
                        dup_proposal_rate=0.6, cross_image_rate=0.3)
        for rec in build_dataset(cfg):
            q, scene = rec.qa.question, rec.scene
            counts = scene.category_counts()
            if q.qtype == "count":
                (cat,) = q.target_categories
                assert rec.qa.gold == INT_TO_WORD[counts[cat]]
                assert q.numeric_target == counts[cat]
            elif q.qtype == "color":
                (cat,) = q.target_categories
                assert counts[cat] == 1  # uniqueness rule
                obj = next(o for o in scene.true_objects if o.category == cat)
                assert rec.qa.gold == obj.color
            elif q.qtype == "existence":
                (cat,) = q.target_categories
                assert rec.qa.gold == ("yes" if counts.get(cat, 0) > 0 else "no")
            elif q.qtype == "position":
                assert counts[rec.qa.gold] == 1
                for cat in q.target_categories:
                    assert counts[cat] == 1

    def test_templates_regex_checkable(self):
        cfg = GenConfig(seed=22, num_samples=100, detector_noise=0.3)
        patterns = [re.compile(p) for p in TEMPLATE_PATTERNS]
        for rec in build_dataset(cfg):
            text = rec.qa.question.text
            assert any(p.match(text) for p in patterns), text

    def test_target_categories_in_vocab_or_confusions(self):
        from setvqa.labels import CATEGORIES, CONFUSIONS

        allowed = set(CATEGORIES) | set(CONFUSIONS.values())
        cfg = GenConfig(seed=24, num_samples=80, detector_noise=0.5)
        for rec in build_dataset(cfg):
            assert rec.qa.question.target_categories <= allowed

    def test_token_counts_in_template_range(self):
        cfg = GenConfig(seed=23, num_samples=100)
        for rec in build_dataset(cfg):
            assert 5 <= len(rec.qa.question.tokens) <= 10

    def test_bias_skew_fraction(self):
        # Monte Carlo over the generator's own draws: with skew 0.75, three
        # quarters of count answers land in {two, three}
        cfg = GenConfig(seed=31, num_samples=10000, bias_skew=0.75,
                        feature_dim=12, objects_per_image=(1, 2),
                        qtype_weights={"count": 1.0})
        records = build_dataset(cfg)
        counts = Counter(r.qa.gold for r in records)
        frac = (counts["two"] + counts["three"]) / len(records)
        assert frac == pytest.approx(0.75, abs=0.02)

    def test_three_answers_always(self):
        with pytest.raises(ValueError):
            QASample(0, Question("is there a car?", "existence"), ["yes"], "yes")

    def test_tokenize_splits_question_mark(self):
        assert tokenize("is there a car?") == ["is", "there", "a", "car", "?"]
