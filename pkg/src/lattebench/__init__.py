"""Desk-scale streaming benchmark for spatial-temporal multi-modal
test-time adaptation with optional human-in-the-loop prompting."""

__version__ = "0.1.0"

from .geometry import (ClassSet, MultiModalFrame, Pose, PredictionFrame,
                       WindowConfig, relative_pose, transform_points)
from .models import AdamW, ModelPair, backward, ema_update, forward, init_mlp_params
from .voxels import STVoxel, VoxelGrid, aggregate_window, build_st_voxels, voxelize
from .reliability import (entropy, fuse_predictions, merge_windows,
                          nearest_rank_quantile, quantile_filter, st_entropy,
                          window_priors, xm_consistency_loss)
from .synth import (ShiftSchedule, ShiftSegment, StreamSpec, WorldConfig,
                    generate_world, pretrain_source, render_frame, render_stream)
from .itta import IttaConfig, Prompt, SimulatedPrompter, extract_instances, warmup_head
from .adapt import AdaptConfig, IttaState, RunLog, evaluate_miou, run_adaptation

__all__ = [k for k in dir() if not k.startswith("_")]
