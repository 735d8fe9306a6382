"""Conditional invertible network between carbon skeletons and 13C spectrum codes."""

from .chemdata import (
    Bond,
    BondList,
    DatasetRow,
    bin_peaks,
    bonds_to_channels,
    channels_to_bonds,
    compress_code,
    estimate_entropy,
    parse_row,
    read_dataset,
    rows_to_arrays,
    serialize_row,
    synth_dataset,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluate import MetricReport, PerturbationConfig, f1_bits
from .invnet import InvertibleNet, LatentSplit, merge_latent, net_forward, net_inverse, split_latent
from .loss import LossBreakdown, LossWeights, total_loss
from .train import EpochLog, TrainConfig, fit, split_dataset

__version__ = "0.1.0"
