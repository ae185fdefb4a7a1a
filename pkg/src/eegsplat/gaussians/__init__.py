from .camera import Camera, camera_ring, look_at, make_camera
from .primitives import (
    PARAM_NAMES,
    Gaussian3D,
    GaussianBatch,
    covariance_from_rs,
    gaussian_eval,
    quat_multiply,
    quat_to_rotmat,
    rotmat_to_quat,
    yaw_quaternion,
)
from .raster import (
    RenderedImage,
    composite_pixel,
    composite_stack,
    compositing_weights,
    project,
    project_gaussian,
    render,
    render_backward,
    render_with_grad,
    support_mask,
    transmittance,
)

__all__ = [
    "Camera", "camera_ring", "look_at", "make_camera",
    "PARAM_NAMES", "Gaussian3D", "GaussianBatch", "covariance_from_rs", "gaussian_eval",
    "quat_multiply", "quat_to_rotmat", "rotmat_to_quat", "yaw_quaternion",
    "RenderedImage", "composite_pixel", "composite_stack", "compositing_weights", "project",
    "project_gaussian", "render", "render_backward", "render_with_grad", "support_mask",
    "transmittance",
]
