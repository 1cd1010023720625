from .prior import (
    BodyPrior,
    KnnIndex,
    bone_softmax_weights,
    build_body_prior,
    capsule_union_sdf,
    default_body_config,
    knn_vertices,
    lbs_forward,
    load_body_config,
    pose_mesh,
    single_capsule_config,
)
from .skeleton import Pose, Skeleton, forward_kinematics, interpolate_pose, rodrigues
