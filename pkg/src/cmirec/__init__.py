"""Contrastive multi-interest recall for sequential recommendation.

Numpy implementation with hand-written gradients: a cosine-routed
multi-interest encoder plus a GRU general interest, trained with an in-batch
sampled softmax, a contrastive loss between augmented views and an
orthogonality penalty on the category matrix.
"""

from .data import (InteractionLog, InteractionRecord, SplitLog, SyntheticSpec, UserSequence,
                   build_sequences, chronological_split, generate_synthetic, parse_interactions)
from .evaluation import MetricsReport, RankMode, Recommendation, evaluate_split, recommend
from .losses import (contrastive_multi_interest_loss, main_loss, orthogonality_loss,
                     total_loss)
from .model import (Hyperparams, ModelParameters, forward_user, init_parameters, load_checkpoint,
                    save_checkpoint)
from .training import TrainConfig, fit, gradient_check

__version__ = "0.1.0"
