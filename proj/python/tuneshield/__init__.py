"""Defense pipeline against toxicity injection in conversational fine-tuning."""

from ._core import (
    TabularPolicy,
    align,
    classify,
    compare,
    evaluate,
    finetune,
    frechet_distance,
    heal,
    induce_bias,
    injected_count,
    perplexity,
    poison,
    precision_tune,
    refusal_p_no,
    run,
    word_modification_ratio,
)

__all__ = [
    "TabularPolicy",
    "align",
    "classify",
    "compare",
    "evaluate",
    "finetune",
    "frechet_distance",
    "heal",
    "induce_bias",
    "injected_count",
    "perplexity",
    "poison",
    "precision_tune",
    "refusal_p_no",
    "run",
    "word_modification_ratio",
]
