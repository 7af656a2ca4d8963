"""Memory-bank anomaly detection with robust transport-based feature adaptation."""
from .alignment import AdaptConfig, AffineAdapter, adapt
from .errors import (ConfigError, FormatError, LabelError, NumericError, RodaError, ShapeError,
                     SizeError, ValidationError)
from .evaluation import EvalReport, ablation_runner, auroc, evaluate, sweep
from .feature_store import FeatureSet, Sample, load_feature_set, save_feature_set, split_target
from .memory_bank import MemoryBank, build_coreset, score_sample
from .shiftlab import ShiftSpec, WorldSpec, apply_shift, generate_world
from .transport import discretize, exact_ot, hungarian_assignment, sinkhorn

__version__ = "0.1.0"
