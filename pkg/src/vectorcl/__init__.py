"""Desk-scale vector contrastive learning: affine view pairs, pyramid vector heads, analysis."""

from .analysis import bound_report, dice, dispersion_delta, endpoint_error, flops_estimate, linear_probe
from .backbone import BackboneParams, forward, init_backbone
from .corpus import Corpus, make_synthetic_corpus
from .geometry import AffineParams, AffineRanges, AppearanceConfig, dvf_from_affine, validity_mask, warp
from .losses import cover_loss
from .pyramid import HeadConfig, fuse, vpa
from .trainer import Checkpoint, TrainConfig, load_checkpoint, pretrain, save_checkpoint, sevr_step
from .vectorhead import make_template, mov, veu

__version__ = "0.1.0"
