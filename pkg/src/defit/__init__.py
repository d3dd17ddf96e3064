"""Decoupled few-shot fine-tuning for dual-encoder vision-language models.

The package adapts a frozen two-tower encoder with low-rank attention
adapters, deep prompts, and invariant/spurious feature-splitting heads, and
trains them with a three-part objective (contrastive cross-entropy, spurious
neutralization, class-conditional independence). A procedural benchmark with
a controllable spurious cue exercises the robustness claims end to end.
"""

from .configs import (
    BackboneConfig,
    CaptionerEndpoint,
    CurationRules,
    HsicConfig,
    LossWeights,
    SyntheticBenchConfig,
    TrainConfig,
)
from .encoder import (
    ClassEmbeddings,
    DecoupledEmbedding,
    DualEncoder,
    ProjectionHeads,
    class_text_embeddings,
    decouple,
)
from .estimator import DecoupledFewShotClassifier
from .evaluation import (
    CrossEvalResult,
    CrossEvalSpec,
    Metrics,
    cross_eval,
    evaluate,
    macro_f1,
    predict,
    roc_auc,
    top1_accuracy,
)
from .lora import LoraAdapter, LoraTarget, lora_forward, lora_merge
from .losses import (
    class_probs,
    conditional_hsic,
    invariant_ce,
    similarity,
    spurious_kl,
    total_loss,
    uniform_reference,
)
from .manifest import (
    DatasetManifest,
    ExampleRecord,
    load_image,
    load_manifest,
    sample_few_shot,
    save_manifest,
)
from .prompts import PromptBank, inject_prompts
from .reports import emit_report, parse_report
from .synthetic import generate_synthetic_benchmark, spurious_agreement_rate
from .trainer import (
    AdaptedModel,
    TrainLogEntry,
    TrainResult,
    init_prompts,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .captions import curate_captions, fetch_caption

__version__ = "0.1.0"

__all__ = [
    "AdaptedModel",
    "BackboneConfig",
    "CaptionerEndpoint",
    "ClassEmbeddings",
    "CrossEvalResult",
    "CrossEvalSpec",
    "CurationRules",
    "DatasetManifest",
    "DecoupledEmbedding",
    "DecoupledFewShotClassifier",
    "DualEncoder",
    "ExampleRecord",
    "HsicConfig",
    "LoraAdapter",
    "LoraTarget",
    "LossWeights",
    "Metrics",
    "ProjectionHeads",
    "PromptBank",
    "SyntheticBenchConfig",
    "TrainConfig",
    "TrainLogEntry",
    "TrainResult",
    "class_probs",
    "class_text_embeddings",
    "conditional_hsic",
    "cross_eval",
    "curate_captions",
    "decouple",
    "emit_report",
    "evaluate",
    "fetch_caption",
    "generate_synthetic_benchmark",
    "init_prompts",
    "inject_prompts",
    "invariant_ce",
    "load_checkpoint",
    "load_image",
    "load_manifest",
    "lora_forward",
    "lora_merge",
    "macro_f1",
    "parse_report",
    "predict",
    "roc_auc",
    "sample_few_shot",
    "save_checkpoint",
    "save_manifest",
    "similarity",
    "spurious_agreement_rate",
    "spurious_kl",
    "top1_accuracy",
    "total_loss",
    "train",
    "uniform_reference",
]
