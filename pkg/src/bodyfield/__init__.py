"""Pose-conditioned radiance fields anchored to a skinned body surface.

Observation-space points are projected onto the posed reference mesh and
re-expressed as (u, v, l): the texel coordinate of the closest surface point
plus the distance to it. Small networks conditioned on the skeletal pose
predict density and color there, and volumetric quadrature renders images.
The package also ships a synthetic multi-view scene generator, a trainer
with ablation wirings, and PSNR/SSIM evaluation.
"""

from .body import (PoseParams, PosedMesh, ShapeParams, SkinnedBodyModel,
                   ToyBodySpec, forward_kinematics, generate_toy_body,
                   load_body, pose_body, rodrigues, save_body)
from .fields import (AdamHyper, AdamState, FieldConfig, FieldNets,
                     GradientStore, Mlp, PositionalEncoder, adam_step)
from .metrics import EvalReport, evaluate, psnr, ssim
from .projection import (ProjectionResult, TriangleBvh, accept_sample,
                         brute_force_closest, build_bvh, closest_point,
                         project_points)
from .rendering import (Camera, Ray, RenderOptions, SampleBatch, composite,
                        generate_rays, ray_bounds, render_image, sample_ray,
                        sample_rays)
from .scene import (FrameDataset, MotionSpec, SceneSpec, TextureSpec,
                    generate_dataset, load_dataset, procedural_texture,
                    raytrace_frame, script_pose)
from .training import (DatasetCache, LossRecord, TrainingConfig, TrainState,
                       apply_ablation, held_out_loss, load_checkpoint,
                       photometric_loss, save_checkpoint, train, train_step)

__version__ = "0.1.0"
