"""Second-stage 3D detection refinement on point clouds.

Proposal boxes are grouped against the scene with a patch index, sampled
with distance-aware voxel FPS, encoded as local graphs refined by EdgeConv
message passing, fused across iterations with channel attention and decoded
into a score and a box residual.
"""

from ._accel import available_backends, backend, set_backend, use_backend
from .config import PipelineConfig, load_config, loads_config
from .geom import Box3D, PointCloud, from_canonical, iou_3d, iou_bev, point_in_box, to_canonical
from .grouping import PatchOverflow, ProposalGroup, exhaustive_group, patch_search
from .head import InvalidResidual, Refinement, decode_box
from .objectives import assign_targets, score_target, wrap_residual
from .pipeline import RoiGraphModel, forward_proposal, refine_scene, sgd_train
from .sampling import EmptyGroup, SampleResult, dfvs, dynamic_voxel_size, fps, sample
from .scene_io import Scene, SynthSpec, synth_scene

__version__ = "0.1.0"
