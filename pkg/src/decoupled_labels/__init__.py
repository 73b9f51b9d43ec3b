"""Decoupled label learning for long-tailed multi-label predicate classification."""
from .config import ExperimentConfig, load_config
from .data import SegmentRecord, SyntheticConfig, generate
from .kdl import CorrelationMatrix, KDLConfig
from .labels import PredicateVocabulary, load_vocabulary
from .pdl import PDLConfig, PDLModel, predict
from .trainer import compare, evaluate, train

__version__ = "0.1.0"
