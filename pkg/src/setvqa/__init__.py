"""setvqa: a desk-scale workbench for visual question answering over image sets.

Synthetic multi-image scenes with exact ground truth, template questions,
a from-scratch trained fusion model with hand-derived gradients, graph-based
deduplicated counting, adversarial debiasing losses, and bias audits.
"""

from .geometry import BBox, iou
from .scenes import GenConfig, ImageSet, ObjectProposal, SceneTruth, generate_dataset
from .qgen import AnswerVocab, QASample, Question, build_vocab
from .counting import (CountModuleParams, CountOutput, PiecewiseLinearFn,
                       adjacency, count_aware_features, count_backward,
                       count_forward, dedup_scores, distance_matrix, prune_intra)
from .traincore import (OptimizerState, ParamStore, backward, gradcheck,
                        init_params, step)
from .model import (ForwardOutput, ModelConfig, WordVocab, encode_question,
                    forward, loss_adversarial, loss_classification,
                    loss_regression, scrub_objects)
from .training import TrainConfig, pretrain_then_finetune, train
from .evalstats import (answer_distribution, evaluate, import_annotations,
                        question_type_key, vqa_accuracy)

__version__ = "0.1.0"

__all__ = [
    "BBox", "iou",
    "GenConfig", "ImageSet", "ObjectProposal", "SceneTruth", "generate_dataset",
    "AnswerVocab", "QASample", "Question", "build_vocab",
    "CountModuleParams", "CountOutput", "PiecewiseLinearFn",
    "adjacency", "count_aware_features", "count_backward", "count_forward",
    "dedup_scores", "distance_matrix", "prune_intra",
    "OptimizerState", "ParamStore", "backward", "gradcheck", "init_params", "step",
    "ForwardOutput", "ModelConfig", "WordVocab", "encode_question", "forward",
    "loss_adversarial", "loss_classification", "loss_regression", "scrub_objects",
    "TrainConfig", "pretrain_then_finetune", "train",
    "answer_distribution", "evaluate", "import_annotations", "question_type_key",
    "vqa_accuracy",
    "__version__",
]
