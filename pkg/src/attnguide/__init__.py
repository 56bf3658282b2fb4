"""Syntax-aware attention guiding for a small transformer encoder over Java.

The package lexes a Java subset into classified tokens and statement spans,
builds guiding target matrices over aligned subword sequences, trains a
from-scratch encoder whose selected heads are pulled toward those targets by
an auxiliary Frobenius loss with a linearly decaying weight, and analyzes
attention bias between correct and incorrect predictions.
"""

from .javacode import (
    AstKind,
    AstSpan,
    CodeUnit,
    MalformedStatement,
    SourceToken,
    SyntaxClass,
    UnsupportedConstruct,
    extract_ast_spans,
    lex,
    parse,
)
from .subtok import (
    AlignedSequence,
    EmptyCorpus,
    LengthMismatch,
    Vocab,
    aggregate_to_source,
    build_vocab,
    encode,
    encode_pair,
    merge_units,
)
from .patterns import (
    HeadAssignment,
    InvalidLambda,
    PatternMatrix,
    PatternSpec,
    SequenceUnitMismatch,
    assign_heads,
    ast_pattern_specs,
    build_pattern,
    dump_pattern_csv,
    global_pattern_specs,
    local_pattern_specs,
    syntax_pattern_specs,
)
from .model import (
    DimMismatch,
    ForwardTrace,
    GuidedModel,
    Hyper,
    ModelConfig,
    NonFiniteLoss,
    ag_loss,
    apply_mlm_mask,
    forward,
    gradient_check,
    load_model,
    mlm_loss,
    positional_encoding,
    sag_loss,
    save_model,
    total_loss,
    train,
)
from .analysis import (
    AttentionRecord,
    EmptyGroup,
    PartitionLabel,
    TestResult,
    ZeroVariance,
    bonferroni,
    collect,
    fix_accounting,
    mann_whitney,
    metrics,
    paired_t,
    partition_from_weights,
    partition_high_low,
    stratified_accuracy,
)
from .report import BiasReport, build_bias_report, validate_report
from .corpus import CorpusParams, gen_clone_pairs, gen_corpus, read_corpus_jsonl, write_corpus_jsonl
from .experiments import (
    ExperimentSpec,
    run_clone_toy,
    run_cloze,
    run_directional_experiment,
    sweep,
)

__version__ = "0.1.0"
