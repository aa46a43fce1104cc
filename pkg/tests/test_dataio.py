import numpy as np
import pytest

from setvqa.dataio import (build_dataset, file_hash, read_jsonl, records_hash,
                           write_jsonl)
from setvqa.errors import SchemaError
from setvqa.scenes import GenConfig


def dataset(seed=4, n=15, **kw):
    cfg = GenConfig(seed=seed, num_samples=n, dup_proposal_rate=0.4,
                    cross_image_rate=0.2, annotator_error=0.1, **kw)
    return cfg, build_dataset(cfg)


class TestRoundTrip:
    def test_header_then_samples(self, tmp_path):
        cfg, records = dataset()
        path = tmp_path / "d.jsonl"
        write_jsonl(path, cfg, records)
        lines = path.read_text().splitlines()
        assert len(lines) == len(records) + 1
        import json

        header = json.loads(lines[0])
        assert header["format_version"] == 1
        assert header["gen_config"]["seed"] == cfg.seed

    def test_features_regenerated_from_seed(self, tmp_path):
        cfg, records = dataset()
        path = tmp_path / "d.jsonl"
        write_jsonl(path, cfg, records, embed_features=False)
        _, loaded = read_jsonl(path)
        for orig, back in zip(records, loaded):
            assert back.qa.question.text == orig.qa.question.text
            assert back.qa.answers == orig.qa.answers
            assert back.image_set.n == orig.image_set.n
            for p_orig, p_back in zip(orig.image_set.proposals, back.image_set.proposals):
                assert np.array_equal(p_orig.feature, p_back.feature)
                assert p_orig.duplicate_of == p_back.duplicate_of

    def test_embedded_features_identical(self, tmp_path):
        cfg, records = dataset(n=5)
        path = tmp_path / "d.jsonl"
        write_jsonl(path, cfg, records, embed_features=True)
        _, loaded = read_jsonl(path)
        for orig, back in zip(records, loaded):
            for p_orig, p_back in zip(orig.image_set.proposals, back.image_set.proposals):
                assert np.array_equal(p_orig.feature, p_back.feature)

    def test_scene_truth_round_trip(self, tmp_path):
        cfg, records = dataset(n=6)
        path = tmp_path / "d.jsonl"
        write_jsonl(path, cfg, records)
        _, loaded = read_jsonl(path)
        for orig, back in zip(records, loaded):
            assert back.scene.intended_qtype == orig.scene.intended_qtype
            assert back.scene.proposal_owner == orig.scene.proposal_owner
            assert back.scene.category_counts() == orig.scene.category_counts()

    def test_same_config_same_bytes(self, tmp_path):
        cfg, records = dataset()
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_jsonl(p1, cfg, records)
        write_jsonl(p2, cfg, build_dataset(cfg))
        assert p1.read_bytes() == p2.read_bytes()
        assert file_hash(p1) == file_hash(p2)

    def test_records_hash_tracks_content(self):
        _, r1 = dataset(seed=4)
        _, r1b = dataset(seed=4)
        _, r2 = dataset(seed=5)
        assert records_hash(r1) == records_hash(r1b)
        assert records_hash(r1) != records_hash(r2)


class TestSchemaErrors:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "e.jsonl"
        p.write_text("")
        with pytest.raises(SchemaError):
            read_jsonl(p)

    def test_bad_header(self, tmp_path):
        p = tmp_path / "e.jsonl"
        p.write_text("not json\n")
        with pytest.raises(SchemaError, match="line 1"):
            read_jsonl(p)

    def test_bad_version(self, tmp_path):
        p = tmp_path / "e.jsonl"
        p.write_text('{"format_version": 9, "gen_config": {}}\n')
        with pytest.raises(SchemaError):
            read_jsonl(p)

    def test_malformed_sample_names_line(self, tmp_path):
        cfg, records = dataset(n=2)
        p = tmp_path / "d.jsonl"
        write_jsonl(p, cfg, records)
        lines = p.read_text().splitlines()
        lines[2] = '{"sample_id": 99}'
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(SchemaError, match="line 3"):
            read_jsonl(p)

    def test_unknown_config_key_rejected(self, tmp_path):
        p = tmp_path / "e.jsonl"
        p.write_text('{"format_version": 1, "gen_config": {"seed": 1, "bogus": 2}}\n')
        from setvqa.errors import ConfigError

        with pytest.raises(ConfigError):
            read_jsonl(p)


class TestPretrainFlag:
    def test_pretrain_records_marked(self, tmp_path):
        cfg = GenConfig(seed=6, num_samples=8, objects_per_image=(2, 3),
                        qtype_weights={"color": 0.5, "position": 0.5})
        records = build_dataset(cfg, start_id=100, pretrain=True)
        assert all(r.pretrain for r in records)
        assert all(r.qa.question.qtype in ("color", "position") for r in records)
        path = tmp_path / "p.jsonl"
        write_jsonl(path, cfg, records)
        _, loaded = read_jsonl(path)
        assert all(r.pretrain for r in loaded)
