"""Dynamic multi-token generation toolkit.

A numpy/scipy library implementing confidence-gated multi-token decoding:
a shared-stem transformer with one head per future token offset, joint
distributions over top-k candidates reweighted by corpus co-occurrence
statistics, static plus Otsu-adaptive thresholding with dynamic back-off,
and a perplexity/speed-up evaluation harness.
"""

__version__ = "0.1.0"

from .vocab import (  # noqa: F401
    CorpusSplit,
    UnknownSymbolError,
    Vocab,
    build_vocab,
    corpus_sequences,
    load_corpus_text,
    split_corpus,
)
from .ngram import (  # noqa: F401
    CooccurrenceMask,
    MaskFormatError,
    NgramCounts,
    apply_transparency,
    build_mask,
    count_ngrams,
    load_mask,
    save_mask,
)
from .decoder import (  # noqa: F401
    DecoderConfig,
    GenerationTrace,
    HeadDistribution,
    JointDistribution,
    StepResult,
    adaptive_threshold,
    backoff_check,
    build_joint,
    decode_step,
    gaussian_blur,
    generate,
    otsu_threshold,
    penalize_repetition,
    sample_joint,
    static_threshold,
    topk_truncate,
)
from .model import (  # noqa: F401
    CheckpointError,
    ModelConfig,
    MultiHeadModel,
    load_checkpoint,
    save_checkpoint,
    transfer_from_base,
)
from .training import (  # noqa: F401
    AdamW,
    TrainingConfig,
    TrainingDiverged,
    TrainingReport,
    lr_schedule,
    three_rate_sgd_step,
    train,
)
from .metrics import (  # noqa: F401
    MetricsReport,
    dynamic_eval,
    full_report,
    ppl_dynamic,
    ppl_joint,
    ppl_n,
    speedup_and_mix,
    sweep_epsilon,
)
from .ot import (  # noqa: F401
    OtProblem,
    closed_form_solution,
    cost_from_ratio,
    numeric_minimizer,
    theorem_check,
    total_variation,
)
