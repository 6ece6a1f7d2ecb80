"""stflow: spatio-temporal city-flow prediction on grid inflow/outflow data.

A gated convolutional autoencoder (time-distributed encoder, cascading
multiplicative-unit bridge, attention-equipped decoder) built on an in-house
numpy-backed reverse-mode autodiff engine, plus dataset tooling, training,
metrics, a historical-average baseline, and parameter/FLOP accounting.
"""
import os as _os

# BLAS thread cap for bit-reproducible reductions; set before numpy loads.
_threads = _os.environ.get("STFLOW_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

from . import blocks, data, model, nnops, tensor, trainer  # noqa: E402
from .data import (  # noqa: E402
    EXTERNAL_SCHEMA, FlowDataset, ExternalTable, Normalizer, Sample,
    SynthSpec, load_dataset, make_samples, save_dataset, synth_generate,
)
from .model import (  # noqa: E402
    Model, ModelConfig, ModelSummary, build, count_flops, count_params, load,
    save, summarize,
)
from .tensor import Rng, Tensor, Tape, tape, gradcheck, forward_op  # noqa: E402
from .trainer import (  # noqa: E402
    Adam, MetricsReport, TrainConfig, ape, evaluate, ha_baseline, mape, rmse,
    run_replicas, train,
)

__all__ = [
    "__version__", "blocks", "data", "model", "nnops", "tensor", "trainer",
    "EXTERNAL_SCHEMA", "FlowDataset", "ExternalTable", "Normalizer", "Sample",
    "SynthSpec", "load_dataset", "make_samples", "save_dataset",
    "synth_generate", "Model", "ModelConfig", "ModelSummary", "build",
    "count_flops", "count_params", "load", "save", "summarize", "Rng",
    "Tensor", "Tape", "tape", "gradcheck", "forward_op", "Adam",
    "MetricsReport", "TrainConfig", "ape", "evaluate", "ha_baseline", "mape",
    "rmse", "run_replicas", "train",
]
