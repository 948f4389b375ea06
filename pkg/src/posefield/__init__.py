"""Neural unsigned distance fields on SO(3)^K as a pose prior."""
from .errors import *  # noqa: F401,F403
from .field import FieldModel, init_model, input_gradient, load_model, loss_and_param_grads, save_model
from .project import ProjectionConfig, TargetDistanceField, project, project_batch
from .skeleton import Skeleton, binary_tree, forward_kinematics, mean_joint_distance
from .so3 import joint_geodesic, normalize, perturb_pose, pose_distance, random_pose

__version__ = "0.1.0"
