from .config import ModelConfig  # noqa: F401
from .network import ForwardResult, OccupancyModel, SparseFeatureSet  # noqa: F401
