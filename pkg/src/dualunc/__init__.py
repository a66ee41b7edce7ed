"""Labels vs. epistemic uncertainty for classifiers trained on disagreeing annotators."""

from .data import (
    ConflictSet,
    LabeledImageSet,
    MultiExpertDataset,
    expert_minibatches,
    load_dataset,
    load_idx,
    make_conflicts,
    save_dataset,
    simulate_experts,
)
from .model import (
    DiagonalGaussian,
    DualUncertaintyModel,
    LossBreakdown,
    ModelConfig,
    kl_diag_gaussians,
    load_checkpoint,
    sample_latent,
    save_checkpoint,
    train,
)
from .uncertainty import (
    UncertaintyReport,
    decompose,
    predictive_mean,
    predictive_variance,
    referral_curve,
)

__version__ = "0.1.0"
