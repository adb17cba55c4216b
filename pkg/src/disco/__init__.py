"""Semantically distinct, temporally coherent visual tokens from a query resampler."""

from .concepts import Caption, ConceptSet, embed_concepts, extract_rule_based
from .errors import (ConfigError, ContractError, DiscoError, FormatError, NotFoundError,
                     NumericOverflowError, ParseError, PartitionMismatchError, ShapeError,
                     TransportError)
from .resampler import QuerySet, ResamplerConfig, VideoFeatures, init_queries, resample
from .synth import SynthSpec, generate_dataset
from .tensor import Graph, GradientReport, backward, evaluate, finite_diff_check
from .tfc import centroids, ffa_loss, focus_features
from .vcd import Assignment, brute_force_assign, cost_matrix, hungarian_assign, vsc_loss, vsm_loss

__version__ = "0.1.0"
