"""Column-lattice image classifier with contrastive pretraining and
part-whole interpretability exports."""

from .config import TrainConfig, desk_profile, paper_profile
from .model import Agglomerator
from .rng import RngStreams

__all__ = ["Agglomerator", "TrainConfig", "RngStreams", "desk_profile", "paper_profile"]
__version__ = "0.1.0"
