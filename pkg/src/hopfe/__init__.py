"""Knowledge-graph embeddings on Hopf fibers.

Entities are per-dimension 3D points lifted to circles on S³ and carrying
attribute phases; relations are quaternion rotations plus a phase offset.
"""

from .errors import (HopfEError, ZeroQuaternion, NotOnSphere, ShapeMismatch, InvalidConfig,
                     NumericalOverflow, NonFiniteGradient, ParseError, EmptySplit,
                     WidthMismatch, UnknownEntity, UnknownRelation)
from .model import ModelConfig, ModelParams, init_model, load_checkpoint, save_checkpoint
from .training import TrainConfig, train
from .evaluation import EvalReport, evaluate_split

__version__ = "0.1.0"
