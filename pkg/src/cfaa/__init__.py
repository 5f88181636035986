"""Cross-domain recommendation with vertical (optimal-transport) and horizontal
(attribution-graph) embedding alignment, built on a small numpy autodiff core."""
from . import cli, data, evaluate, experiment, model, ndmath, ot, subspace, typical
from .model import LossReport, LossWeights, TrainConfig

__all__ = ["cli", "data", "evaluate", "experiment", "model", "ndmath", "ot", "subspace",
           "typical", "LossReport", "LossWeights", "TrainConfig"]
__version__ = "0.1.0"
