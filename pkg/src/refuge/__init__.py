"""Relational feature generation engine.

Enriches the target table of a relational database with automatically
generated relational features for a binary prediction task. Candidate
features are proposed by pluggable agents, filtered by reasoning and by
validation AUROC in an iterative feedback loop, and the enriched table is
scored with an in-engine gradient-boosted tree classifier.
"""

from refuge.rdb import (
    ColumnType,
    DataError,
    ForeignKey,
    RelationalDatabase,
    SchemaSubset,
    Table,
    TaskSpec,
    apply_subset,
    load_database,
    schema_descriptor,
)
from refuge.dsl import (
    AggTerm,
    Aggregation,
    FeatureSpec,
    SpecParseError,
    canonical_key,
    extract_specs,
    parse_spec,
    validate_spec,
)
from refuge.executor import Executor, FeatureColumn, execute, execute_batch
from refuge.metrics import auroc
from refuge.gbdt import GBDTModel, TrainConfig, predict, train_gbdt
from refuge.evaluator import EvalResult, evaluate, fit_predictor, score_split
from refuge.orchestrator import RunConfig, RunReport, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "AggTerm",
    "Aggregation",
    "ColumnType",
    "DataError",
    "EvalResult",
    "Executor",
    "FeatureColumn",
    "FeatureSpec",
    "ForeignKey",
    "GBDTModel",
    "RelationalDatabase",
    "RunConfig",
    "RunReport",
    "SchemaSubset",
    "SpecParseError",
    "Table",
    "TaskSpec",
    "TrainConfig",
    "apply_subset",
    "auroc",
    "canonical_key",
    "evaluate",
    "execute",
    "execute_batch",
    "extract_specs",
    "fit_predictor",
    "load_database",
    "parse_spec",
    "predict",
    "run_pipeline",
    "schema_descriptor",
    "score_split",
    "train_gbdt",
    "validate_spec",
]
