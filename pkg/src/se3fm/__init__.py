"""Sequence-conditioned SE(3) flow matching for protein backbones, desk scale."""

from .geometry import (
    FrameChain,
    TangentField,
    conditional_field,
    geodesic_interpolant,
    remove_com,
    rotation_distance,
    sample_noise_chain,
    so3_exp,
    so3_exp_at,
    so3_log,
    so3_log_at,
)
from .backbone import (
    SequenceRecord,
    atoms_to_frames,
    backbone_dihedrals,
    frames_to_atoms,
    mask_sequence,
)
from .coupling import Assignment, couple, pairwise_cost, solve_assignment
from .model import ModelConfig, ModelParams, forward, init_params
from .training import TrainConfig, TrainState, fm_loss, make_epoch_plan, reft_filter, reft_loss, train_step
from .sampling import SampleConfig, TaskSpec, euler_sample, fold, scaffold
from .metrics import (
    assign_secondary,
    diversity_reward,
    diversity_stats,
    ensemble_stats,
    greedy_cluster,
    kabsch_rmsd,
    novelty_stats,
    sc_rmsd_eval,
    tm_score,
)

__version__ = "0.1.0"
