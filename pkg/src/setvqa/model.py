"""Multimodal fusion model over object proposals with soft attention.

Question tokens are mean-pooled embeddings; proposal features are projected
and optionally rescaled by deduplicated count scores; a question-conditioned
soft attention pools them into a context vector feeding the answer classifier
and the optional count regression head. Adversarial training scrubs the
features of question-mentioned objects and penalizes confident answers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as T
from .counting import build_count_graph, distance_matrix
from .errors import ConfigError
from .labels import normalize_category_token
from .qgen import Question, tokenize
from .scenes import ImageSet
from .tape import Tape, Var, const
from .traincore import ParamStore, init_params

UNK_TOKEN = "<unk>"

ADVERSARIAL_PROB_CLAMP = 1.0 - 1e-7


@dataclass(frozen=True)
class WordVocab:
    words: tuple[str, ...]  # index 0 is the reserved unknown token

    @classmethod
    def from_texts(cls, texts) -> "WordVocab":
        seen: set[str] = set()
        for text in texts:
            seen.update(tokenize(text))
        return cls(words=(UNK_TOKEN, *sorted(seen)))

    @property
    def size(self) -> int:
        return len(self.words)

    def encode(self, tokens: list[str]) -> np.ndarray:
        index = {w: i for i, w in enumerate(self.words)}
        return np.array([index.get(t, 0) for t in tokens], dtype=np.int64)


@dataclass
class ModelConfig:
    d_feat: int
    num_answers: int
    d_word: int = 32
    d_hidden: int = 64
    count_aware: bool = False
    regression_head: bool = False
    pwl_intervals: int = 8

    def validate(self) -> None:
        for name in ("d_feat", "num_answers", "d_word", "d_hidden", "pwl_intervals"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.num_answers < 2:
            raise ConfigError("num_answers must be at least 2")

    def to_dict(self) -> dict:
        return {
            "d_feat": self.d_feat, "num_answers": self.num_answers,
            "d_word": self.d_word, "d_hidden": self.d_hidden,
            "count_aware": self.count_aware, "regression_head": self.regression_head,
            "pwl_intervals": self.pwl_intervals,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


def param_shapes(cfg: ModelConfig, vocab_size: int) -> dict[str, tuple[int, ...]]:
    d_w, d_h = cfg.d_word, cfg.d_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "emb": (vocab_size, d_w),
        "q_proj_w": (d_h, d_w), "q_proj_b": (d_h,),
        "feat_proj_w": (d_h, cfg.d_feat), "feat_proj_b": (d_h,),
        "count_gate_u": (d_h,),
        "att_q_w": (d_h, d_h), "att_v_w": (d_h, d_h), "att_score_w": (d_h,),
        "fuse_w": (d_h, 2 * d_h), "fuse_b": (d_h,),
        "cls_w": (cfg.num_answers, d_h), "cls_b": (cfg.num_answers,),
    }
    if cfg.regression_head:
        shapes["reg_w"] = (1, d_h)
        shapes["reg_b"] = (1,)
    if cfg.count_aware:
        for name in ("count_f1", "count_f2", "count_f3"):
            shapes[name] = (cfg.pwl_intervals,)
    return shapes


def init_model_params(seed: int, cfg: ModelConfig, vocab_size: int) -> ParamStore:
    store = init_params(seed, param_shapes(cfg, vocab_size))
    # equal raw weights make each piecewise-linear edge function the identity
    for name in ("count_f1", "count_f2", "count_f3"):
        if name in store.tensors:
            store.tensors[name][...] = 0.0
    return store


@dataclass
class ModelInputs:
    features: np.ndarray          # (n, d_feat)
    distance: np.ndarray          # (n, n), constant per sample
    token_ids: np.ndarray


def prepare_inputs(image_set: ImageSet, question: Question, vocab: WordVocab) -> ModelInputs:
    return ModelInputs(
        features=image_set.feature_matrix(),
        distance=distance_matrix(image_set.boxes(), image_set.image_indices()),
        token_ids=vocab.encode(question.tokens),
    )


@dataclass
class ForwardOutput:
    logits: np.ndarray
    probabilities: np.ndarray
    attention: np.ndarray         # fusion attention over proposals, sums to 1
    count_attention: np.ndarray   # per-proposal sigmoid gate in (0, 1)
    count_scores: np.ndarray | None
    c_hat: float | None
    r: float | None
    logits_var: Var
    r_var: Var | None


def encode_question(tape: Tape, params: dict[str, Var], token_ids: np.ndarray) -> Var:
    """Mean of word embeddings, affine-projected through tanh."""
    if len(token_ids) == 0:
        raise ValueError("cannot encode an empty token list")
    pooled = T.embed_mean(tape, params["emb"], token_ids)
    return T.tanh(tape, T.affine_vec(tape, params["q_proj_w"], pooled, params["q_proj_b"]))


def scrub_objects(question: Question, image_set: ImageSet) -> np.ndarray:
    """Boolean mask over proposals whose category the question mentions."""
    mentioned = {normalize_category_token(tok) for tok in question.tokens}
    mentioned.discard(None)
    return np.array([p.category in mentioned for p in image_set.proposals], dtype=bool)


def forward(tape: Tape, params: dict[str, Var], cfg: ModelConfig, inputs: ModelInputs,
            scrub_mask: np.ndarray | None = None,
            disable_count_scaling: bool = False) -> ForwardOutput:
    feats = inputs.features
    if feats.ndim != 2 or feats.shape[1] != cfg.d_feat:
        raise ValueError(f"features must be (n, {cfg.d_feat}), got {feats.shape}")
    if feats.shape[0] == 0:
        raise ValueError("forward needs at least one proposal")
    if not np.all(np.isfinite(feats)):
        raise ValueError("non-finite values in features")
    if scrub_mask is not None and scrub_mask.any():
        feats = feats.copy()
        feats[scrub_mask] = 0.0

    q = encode_question(tape, params, inputs.token_ids)
    V = T.tanh(tape, T.affine_rows(tape, const(feats), params["feat_proj_w"],
                                   params["feat_proj_b"]))
    gate = T.rows_dot_vec(tape, T.mul_rows_vec(tape, V, q), params["count_gate_u"])
    a = T.sigmoid(tape, gate)

    count_scores = c_hat = None
    if cfg.count_aware and not disable_count_scaling:
        graph = build_count_graph(tape, a, inputs.distance,
                                  params["count_f1"], params["count_f2"], params["count_f3"])
        v_used = T.rowscale(tape, V, graph["C"])
        count_scores, c_hat = graph["C"].v, float(graph["c_hat"].v)
    else:
        v_used = V

    q_att = T.affine_vec(tape, params["att_q_w"], q)
    H = T.tanh(tape, T.add_rows_vec(tape, T.affine_rows(tape, v_used, params["att_v_w"]), q_att))
    alpha = T.softmax(tape, T.rows_dot_vec(tape, H, params["att_score_w"]))
    context = T.weighted_rowsum(tape, v_used, alpha)

    h = T.tanh(tape, T.affine_vec(tape, params["fuse_w"],
                                  T.concat_vec(tape, q, context), params["fuse_b"]))
    logits = T.affine_vec(tape, params["cls_w"], h, params["cls_b"])

    r_var = None
    r = None
    if cfg.regression_head:
        r_var = T.vsum(tape, T.affine_vec(tape, params["reg_w"], h, params["reg_b"]))
        r = float(r_var.v)

    z = logits.v - logits.v.max()
    probs = np.exp(z)
    probs /= probs.sum()
    return ForwardOutput(
        logits=logits.v, probabilities=probs, attention=alpha.v,
        count_attention=a.v, count_scores=count_scores, c_hat=c_hat, r=r,
        logits_var=logits, r_var=r_var,
    )


# ---------------------------------------------------------------------------
# losses


def loss_classification(tape: Tape, out: ForwardOutput, gold: int) -> Var:
    """Cross entropy: -log p(gold)."""
    if not 0 <= gold < out.logits.shape[0]:
        raise ValueError(f"gold index {gold} out of range")
    return T.softmax_cross_entropy(tape, out.logits_var, gold)


def loss_regression(tape: Tape, out: ForwardOutput, numeric_target: float, qtype: str) -> Var:
    """Squared error of the count regression head; count questions only."""
    if qtype != "count":
        raise ValueError(f"regression loss applies to count questions, got qtype {qtype!r}")
    if out.r_var is None:
        raise ConfigError("regression loss requires a model with the regression head enabled")
    return T.squared_error(tape, out.r_var, float(numeric_target))


def loss_adversarial(tape: Tape, out_true: ForwardOutput, out_adv: ForwardOutput,
                     gold: int, mode: str, lambda_r: float, tau: float = 10.0) -> Var:
    """Combined loss whose single backward pass reverses gradients on the
    scrubbed example: CE mode maximizes the adversarial cross entropy (capped
    at tau); BCE mode minimizes per-class confidence on the scrubbed example."""
    if lambda_r < 0:
        raise ConfigError("lambda_r must be non-negative")
    ce_true = loss_classification(tape, out_true, gold)
    if mode == "advreg_ce":
        ce_adv = loss_classification(tape, out_adv, gold)
        return T.sadd(tape, ce_true, T.smul(tape, T.min_const(tape, ce_adv, tau), -lambda_r))
    if mode == "advreg_bce":
        p_adv = T.softmax(tape, out_adv.logits_var)
        bce = T.neglog1m_sum(tape, p_adv, ADVERSARIAL_PROB_CLAMP)
        return T.sadd(tape, ce_true, T.smul(tape, bce, lambda_r))
    raise ConfigError(f"unknown adversarial mode {mode!r}")
