"""Dynamic 3D photoacoustic reconstruction with deformable Gaussian balls.

A time-varying acoustic source is represented as a point cloud of Gaussian
balls whose attributes (peak pressure, size, center) evolve over normalized
time through learnable Gaussian-basis curves.  The cloud is fitted to
multi-frame sensor data by gradient descent on an L2 signal loss using a
closed-form differentiable forward model, and compared against a universal
back-projection baseline with SSIM metrics.
"""

from .core import (Box, DeformField, DynamicCloud, GaussBall, ReconConfig,
                   SensorArray, SignalSet, Violation, VoxelGrid, frame_times,
                   validate_cloud)
from .deformation import (BallStateAtT, CloudState, ball_state_at,
                          ball_state_grad, cloud_state_grads, cloud_states_at,
                          eval_H, eval_basis)
from .evaluation import (GridSpec, MapImage, eval_report, map_project,
                         normalize_pair, ssim, voxelize)
from .fileio import (RunConfig, read_cloud, read_tensor, write_cloud,
                     write_tensor)
from .geometry import (Phantom, PhantomSpec, build_phantom, fibonacci_sphere,
                       simulate_dataset, spherical_array)
from .radiator import (accumulate_frame_grads, compute_time_window,
                       forward_frame, frame_state_grads, pressure_kernel,
                       pressure_kernel_grad)
from .reconstruction import (adam_step, dynamic_reconstruct, l2_loss,
                             scheduled_lr, static_reconstruct,
                             ubp_reconstruct)

__version__ = "0.1.0"
