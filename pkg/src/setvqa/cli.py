"""Command-line entry point: gen | train | eval | analyze | gradcheck.

Config files are TOML or JSON by extension; explicit flags override file
values; every run writes its fully-resolved config next to its outputs.
Distinct exit codes: 0 ok, 2 config, 3 missing file, 4 schema, 5 vocabulary
mismatch, 6 divergence, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import dataio, evalstats, model as M, training
from .errors import ConfigError, DivergenceError, SchemaError, VocabMismatchError
from .qgen import generate_qa
from .scenes import GenConfig, generate_sample
from .tape import Tape
from .traincore import collect_grads, gradcheck, wrap_params

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_SCHEMA = 4
EXIT_VOCAB = 5
EXIT_DIVERGED = 6

OUT_DIR_ENV = "SETVQA_OUT_DIR"


def _load_config_file(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    if p.suffix == ".toml":
        import tomli

        with open(p, "rb") as f:
            cfg = tomli.load(f)
    elif p.suffix == ".json":
        with open(p) as f:
            cfg = json.load(f)
    else:
        raise ConfigError(f"config file must end in .toml or .json, got {p.name}")
    # resolved-config files carry the subcommand tag; tolerate re-feeding them
    cfg.pop("subcommand", None)
    return cfg


def _resolve(cls, file_cfg: dict, overrides: dict):
    merged = dict(file_cfg)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return cls.from_dict(merged)


def _write_resolved(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def _out_dir(args) -> Path:
    out = getattr(args, "out_dir", None) or os.environ.get(OUT_DIR_ENV)
    if not out:
        raise ConfigError(f"--out-dir required (or set {OUT_DIR_ENV})")
    return Path(out)


# ---------------------------------------------------------------------------
# gen


def _gen_chunk(cfg_dict: dict, start: int, stop: int, pretrain: bool, embed: bool) -> list[str]:
    cfg = GenConfig.from_dict(cfg_dict)
    lines = []
    for i in range(start, stop):
        image_set, scene = generate_sample(cfg, i)
        qa = generate_qa(image_set, scene, cfg)
        rec = dataio.Record(sample_id=i, qa=qa, image_set=image_set,
                            scene=scene, pretrain=pretrain)
        lines.append(json.dumps(dataio.record_to_dict(rec, embed),
                                sort_keys=True, separators=(",", ":")))
    return lines


def _write_gen_file(path: str, cfg: GenConfig, pretrain: bool, embed: bool,
                    threads: int, start: int = 0) -> None:
    header = {
        "format_version": dataio.DATASET_FORMAT_VERSION,
        "gen_config": cfg.to_dict(),
        "embed_features": embed,
    }
    n = cfg.num_samples
    if threads > 1 and n > 1:
        bounds = np.linspace(start, start + n, threads + 1).astype(int)
        jobs = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(_gen_chunk, [cfg.to_dict()] * len(jobs),
                                   [a for a, _ in jobs], [b for _, b in jobs],
                                   [pretrain] * len(jobs), [embed] * len(jobs)))
        lines = [line for chunk in chunks for line in chunk]
    else:
        lines = _gen_chunk(cfg.to_dict(), start, start + n, pretrain, embed)
    with open(path, "w") as f:
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for line in lines:
            f.write(line + "\n")


def _cmd_gen(args) -> int:
    file_cfg = _load_config_file(args.config) if args.config else {}
    overrides = {
        "seed": args.seed, "num_samples": args.num_samples,
        "bias_skew": args.bias_skew, "dup_proposal_rate": args.dup_rate,
        "cross_image_rate": args.cross_image_rate,
        "detector_noise": args.detector_noise,
        "annotator_error": args.annotator_error,
        "existence_yes_rate": args.existence_yes_rate,
    }
    cfg = _resolve(GenConfig, file_cfg, overrides)
    _write_gen_file(args.out, cfg, pretrain=False, embed=args.embed_features,
                    threads=args.threads)
    print(f"wrote {cfg.num_samples} samples to {args.out}")
    next_id = cfg.num_samples
    if args.test_out:
        test_cfg = GenConfig.from_dict({
            **cfg.to_dict(),
            "num_samples": args.test_samples or max(cfg.num_samples // 4, 1),
        })
        # held-out split: same seed (same feature space), fresh sample ids
        _write_gen_file(args.test_out, test_cfg, pretrain=False,
                        embed=args.embed_features, threads=args.threads,
                        start=next_id)
        next_id += test_cfg.num_samples
        print(f"wrote {test_cfg.num_samples} test samples to {args.test_out}")
    if args.pretrain_out:
        pre_cfg = GenConfig.from_dict({
            **cfg.to_dict(),
            "num_samples": args.pretrain_samples or cfg.num_samples,
            "qtype_weights": {"color": 0.5, "position": 0.5},
        })
        # sample ids continue after the main/test sets: distinct generator
        # streams, shared feature space
        _write_gen_file(args.pretrain_out, pre_cfg, pretrain=True,
                        embed=args.embed_features, threads=args.threads,
                        start=next_id)
        print(f"wrote {pre_cfg.num_samples} pretrain samples to {args.pretrain_out}")
    out_parent = Path(args.out).resolve().parent
    _write_resolved(out_parent, {"subcommand": "gen", **cfg.to_dict()})
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config) if args.config else {}
    overrides = {
        "learning_rate": args.learning_rate, "epochs": args.epochs,
        "batch_size": args.batch_size, "seed": args.seed, "mode": args.mode,
        "lambda_r": args.lambda_r, "lambda_reg": args.lambda_reg, "tau": args.tau,
        "patience": args.patience, "optimizer": args.optimizer,
        "d_hidden": args.d_hidden, "pretrain_epochs": args.pretrain_epochs,
        "pretrain_path": args.pretrain_dataset,
    }
    cfg = _resolve(training.TrainConfig, file_cfg, overrides)
    if not Path(args.dataset).exists():
        raise FileNotFoundError(f"dataset not found: {args.dataset}")
    _, records = dataio.read_jsonl(args.dataset)
    out_dir = _out_dir(args)

    try:
        if cfg.pretrain_path:
            if not Path(cfg.pretrain_path).exists():
                raise FileNotFoundError(f"pretrain dataset not found: {cfg.pretrain_path}")
            _, pre_records = dataio.read_jsonl(cfg.pretrain_path)
            result = training.pretrain_then_finetune(pre_records, records, cfg)
        else:
            result = training.train(records, cfg,
                                     dataset_hash=dataio.file_hash(args.dataset))
    except DivergenceError as err:
        manifest = getattr(err, "manifest", {"diverged": True})
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "manifest.json", "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        raise

    ckpt, manifest = training.write_run(out_dir, result)
    _write_resolved(out_dir, {"subcommand": "train", **cfg.to_dict()})
    final = result.manifest.get("final_train_accuracy")
    print(f"checkpoint: {ckpt}")
    print(f"manifest: {manifest}")
    print(f"final train VQA-accuracy: {final:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _cmd_eval(args) -> int:
    for path in (args.checkpoint, args.dataset):
        if not Path(path).exists():
            raise FileNotFoundError(f"file not found: {path}")
    bundle = training.load_model(args.checkpoint)
    _, records = dataio.read_jsonl(args.dataset)
    report = evalstats.evaluate(bundle, records, scrub_visual=args.scrub_visual)
    out_dir = _out_dir(args)
    paths = evalstats.write_report(report, out_dir)
    _write_resolved(out_dir, {
        "subcommand": "eval", "checkpoint": str(args.checkpoint),
        "dataset": str(args.dataset), "scrub_visual": bool(args.scrub_visual),
    })
    print(f"overall VQA-accuracy: {report.overall_accuracy:.4f} "
          f"(language_only={report.language_only}, n={report.sample_count})")
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze


def _cmd_analyze(args) -> int:
    if bool(args.dataset) == bool(getattr(args, "import_path", None)):
        raise ConfigError("analyze needs exactly one of --dataset or --import")
    warnings: list[str] = []
    if args.dataset:
        if not Path(args.dataset).exists():
            raise FileNotFoundError(f"dataset not found: {args.dataset}")
        _, records = dataio.read_jsonl(args.dataset)
    else:
        if not Path(args.import_path).exists():
            raise FileNotFoundError(f"annotation file not found: {args.import_path}")
        fm = args.field_map or '{"question":"question","answers":"answers","id":"id"}'
        if fm.lstrip().startswith("{"):
            field_map = json.loads(fm)
        else:
            field_map = json.loads(Path(fm).read_text())
        imported = evalstats.import_annotations(args.import_path, field_map)
        records, warnings = imported.records, imported.warnings
    dist = evalstats.answer_distribution(records)
    if warnings:
        dist["import_warnings"] = warnings
    out_dir = _out_dir(args)
    paths = evalstats.write_distribution_report(dist, out_dir)
    _write_resolved(out_dir, {
        "subcommand": "analyze",
        "dataset": str(args.dataset) if args.dataset else None,
        "import": str(args.import_path) if args.import_path else None,
    })
    top = dist["prefixes"][0] if dist["prefixes"] else None
    if top:
        print(f"top prefix: {top['prefix']!r} ({top['count']} samples, "
              f"top-2 answer share {top['top2_share']:.3f})")
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def _cmd_gradcheck(args) -> int:
    from .qgen import build_vocab

    cfg = GenConfig(seed=args.seed, num_samples=8, objects_per_image=(1, 2),
                    dup_proposal_rate=0.5, feature_dim=16)
    records = dataio.build_dataset(cfg)
    answer_vocab = build_vocab([r.qa for r in records])
    word_vocab = M.WordVocab.from_texts(r.qa.question.text for r in records)
    modes = list(training.MODES) if args.mode == "all" else [args.mode]
    worst = 0.0
    failed = []
    for mode in modes:
        tcfg = training.TrainConfig(mode=mode, seed=args.seed, d_word=6, d_hidden=8)
        model_cfg = training.model_config_for(tcfg, cfg.feature_dim, answer_vocab.size)
        store = M.init_model_params(args.seed, model_cfg, word_vocab.size)
        prepared = [M.prepare_inputs(r.image_set, r.qa.question, word_vocab)
                    for r in records[:2]]

        def loss_fn(s, with_grad, _prepared=prepared, _mode=mode, _mc=model_cfg, _tc=tcfg):
            total = 0.0
            for rec, inputs in zip(records[:2], _prepared):
                tape = Tape()
                params = wrap_params(s)
                gold = answer_vocab.lookup(rec.qa.gold)
                _, loss = training._sample_loss(tape, params, _mc, _tc, rec, inputs, gold)
                if with_grad:
                    tape.backward([(loss, 0.5)])
                    collect_grads(s, params)
                total += loss.v * 0.5
            return total

        report = gradcheck(loss_fn, store, tolerance=args.tolerance)
        worst = max(worst, report.max_rel_error)
        status = "PASS" if report.passed else "FAIL"
        print(f"{mode}: {status} max rel error {report.max_rel_error:.3e}")
        if not report.passed:
            failed.append(mode)
            print(report.summary())
    if failed:
        print(f"gradcheck FAILED for modes: {failed}")
        return EXIT_ERROR
    print(f"gradcheck passed for all modes (worst {worst:.3e} < {args.tolerance:.1e})")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="setvqa",
                                     description="Image-set VQA workbench")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset (JSON Lines)")
    g.add_argument("--config", help="TOML or JSON file with GenConfig fields")
    g.add_argument("--out", required=True)
    g.add_argument("--test-out", help="also write a held-out split (same feature space)")
    g.add_argument("--test-samples", type=int)
    g.add_argument("--pretrain-out", help="also write a color/position pretrain set")
    g.add_argument("--pretrain-samples", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--num-samples", type=int)
    g.add_argument("--bias-skew", type=float)
    g.add_argument("--dup-rate", type=float, dest="dup_rate")
    g.add_argument("--cross-image-rate", type=float)
    g.add_argument("--detector-noise", type=float)
    g.add_argument("--annotator-error", type=float)
    g.add_argument("--existence-yes-rate", type=float)
    g.add_argument("--embed-features", action="store_true")
    g.add_argument("--threads", type=int, default=1)
    g.set_defaults(func=_cmd_gen)

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--config", help="TOML or JSON file with TrainConfig fields")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out-dir")
    t.add_argument("--mode", choices=training.MODES)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--learning-rate", "--lr", type=float, dest="learning_rate")
    t.add_argument("--seed", type=int)
    t.add_argument("--lambda-r", type=float, dest="lambda_r")
    t.add_argument("--lambda-reg", type=float, dest="lambda_reg")
    t.add_argument("--tau", type=float)
    t.add_argument("--patience", type=int)
    t.add_argument("--optimizer", choices=("sgd", "adam"))
    t.add_argument("--d-hidden", type=int, dest="d_hidden")
    t.add_argument("--pretrain-dataset", help="enables two-phase training")
    t.add_argument("--pretrain-epochs", type=int)
    t.add_argument("--threads", type=int, default=1)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--scrub-visual", action="store_true",
                   help="zero all visual features (language-only ablation)")
    e.add_argument("--out-dir")
    e.add_argument("--threads", type=int, default=1)
    e.set_defaults(func=_cmd_eval)

    a = sub.add_parser("analyze", help="answer-distribution bias report")
    a.add_argument("--dataset")
    a.add_argument("--import", dest="import_path",
                   help="external JSON/JSONL annotation file")
    a.add_argument("--field-map",
                   help='JSON object or file naming question/answers/id fields')
    a.add_argument("--out-dir")
    a.add_argument("--threads", type=int, default=1)
    a.set_defaults(func=_cmd_analyze)

    c = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    c.add_argument("--mode", default="all", choices=(*training.MODES, "all"))
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=_cmd_gradcheck)
    return parser


_ERROR_CODES = [
    (ConfigError, EXIT_CONFIG, "config"),
    (SchemaError, EXIT_SCHEMA, "schema"),
    (VocabMismatchError, EXIT_VOCAB, "vocab-mismatch"),
    (DivergenceError, EXIT_DIVERGED, "divergence"),
    (FileNotFoundError, EXIT_MISSING, "missing-file"),
]


def run(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - map to exit codes at the boundary
        for klass, code, tag in _ERROR_CODES:
            if isinstance(exc, klass):
                print(f"setvqa: error={tag} exit={code} msg={exc}", file=sys.stderr)
                return code
        print(f"setvqa: error=internal exit={EXIT_ERROR} msg={exc}", file=sys.stderr)
        return EXIT_ERROR


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
