"""seedet: a single-stage 3D nodule detector, self-contained.

The package is three layers: a numpy-backed reverse-mode autodiff engine
(`seedet.tensor`), the detection model and its training/evaluation
machinery (`network`, `losses`, `boxes`, `trainer`, `evaluation`), and a
synthetic data pipeline (`phantom`, `data`) so the whole system runs and
scores end to end on a desk machine.
"""

from .boxes import Box3, decode_box, encode_box, iou, nms
from .config import RunConfig
from .evaluation import Candidate, FrocCurve, froc
from .network import DetectorNet, NetworkConfig, build_network
from .tensor import NumericError, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "Box3",
    "Candidate",
    "DetectorNet",
    "FrocCurve",
    "NetworkConfig",
    "NumericError",
    "RunConfig",
    "Tensor",
    "backward",
    "build_network",
    "decode_box",
    "encode_box",
    "froc",
    "iou",
    "nms",
    "no_grad",
    "__version__",
]
