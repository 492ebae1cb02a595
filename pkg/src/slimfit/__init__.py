"""Memory-frugal transformer fine-tuning at desk scale.

Iterative layer freezing scheduled by per-layer update distances, cached
activation compression (8-bit / 4-bit fixed point, top-k pruning), frozen
layer gradient skipping, and an analytic activation-memory model that
quantifies what those mechanisms save.
"""

import os as _os

# Cap kernel parallelism before any numeric library initializes its pools.
_threads = _os.environ.get("SLIMFIT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .compression import (  # noqa: E402
    CompressedActivation, FixedPointSpec, PrunedSparse, Q2_2, Q4_4,
    dequantize, pack4, prune_topk, quantize, restore, unpack4,
)
from .data import SyntheticTask, gen_synthetic  # noqa: E402
from .errors import (  # noqa: E402
    CodecError, ConfigError, RegistryError, ShapeError, SlimfitError, TrainingDiverged,
)
from .memory import (  # noqa: E402
    MemoryReport, account_budget, account_iteration, audit_runtime,
    enumerate_records, imbalance_ratio,
)
from .model import Batch, LayerRegistry, Model, ModelConfig, build_model  # noqa: E402
from .scheduler import (  # noqa: E402
    DistanceVector, FreezeDecision, Scheduler, baseline_progressive,
    baseline_random, init_distances, select_frozen, update_distances,
)
from .tensor import (  # noqa: E402
    CompressionConfig, Parameter, SavedValue, Tape, TapeNode, Tensor,
    backward, no_grad, record,
)
from .trainer import (  # noqa: E402
    OptimizerState, RunConfig, RunLog, evaluate, fine_tune, pretrain_synthetic,
)

__version__ = "0.1.0"
