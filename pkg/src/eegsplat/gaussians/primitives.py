"""Anisotropic 3-D Gaussian primitives and their covariance parameterisation.

Quaternions are stored scalar-first, ``(w, x, y, z)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from ..errors import NumericError, ValidationError

PARAM_NAMES = ("mu", "rotation", "scale", "color", "opacity")
PARAM_SHAPES = {"mu": 3, "rotation": 4, "scale": 3, "color": 3, "opacity": None}


@dataclass(frozen=True)
class Gaussian3D:
    mu: tuple
    rotation: tuple = (1.0, 0.0, 0.0, 0.0)
    scale: tuple = (1.0, 1.0, 1.0)
    color: tuple = (0.5, 0.5, 0.5)
    opacity: float = 1.0

    def __post_init__(self):
        mu = tuple(float(v) for v in self.mu)
        q = tuple(float(v) for v in self.rotation)
        s = tuple(float(v) for v in self.scale)
        c = tuple(float(v) for v in self.color)
        if len(mu) != 3 or len(q) != 4 or len(s) != 3 or len(c) != 3:
            raise ValidationError("Gaussian3D fields have wrong lengths")
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValidationError(f"rotation must be a unit quaternion, |q| = {np.linalg.norm(q)}")
        if min(s) <= 0:
            raise ValidationError(f"scales must be positive, got {s}")
        if not all(0.0 <= v <= 1.0 for v in c):
            raise ValidationError(f"color must lie in [0, 1], got {c}")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValidationError(f"opacity must lie in [0, 1], got {self.opacity}")
        if not np.isfinite(mu + q + s + c).all():
            raise ValidationError("Gaussian3D has non-finite fields")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "color", c)
        object.__setattr__(self, "opacity", float(self.opacity))


@dataclass
class GaussianBatch:
    """Struct-of-arrays view of ``N`` Gaussians.

    Unlike :class:`Gaussian3D` no invariants are enforced, so the same
    container also carries gradients and optimiser state.
    """

    mu: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    owner: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1, 3)
        n = self.mu.shape[0]
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(n, 4)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(n, 3)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(n, 3)
        self.opacity = np.asarray(self.opacity, dtype=np.float64).reshape(n)
        if self.owner is not None:
            self.owner = np.asarray(self.owner, dtype=np.int64).reshape(n)

    def __len__(self):
        return self.mu.shape[0]

    @classmethod
    def empty(cls) -> "GaussianBatch":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))

    @classmethod
    def from_list(cls, gaussians) -> "GaussianBatch":
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty()
        return cls(
            np.array([g.mu for g in gaussians]),
            np.array([g.rotation for g in gaussians]),
            np.array([g.scale for g in gaussians]),
            np.array([g.color for g in gaussians]),
            np.array([g.opacity for g in gaussians]),
        )

    @classmethod
    def coerce(cls, scene) -> "GaussianBatch":
        if isinstance(scene, GaussianBatch):
            return scene
        return cls.from_list(scene)

    def to_list(self) -> list[Gaussian3D]:
        return [Gaussian3D(tuple(self.mu[i]), tuple(self.rotation[i]), tuple(self.scale[i]),
                           tuple(self.color[i]), float(self.opacity[i])) for i in range(len(self))]

    def params(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "GaussianBatch":
        return GaussianBatch(**{k: v.copy() for k, v in self.params().items()},
                             owner=None if self.owner is None else self.owner.copy())

    def zeros_like(self) -> "GaussianBatch":
        return GaussianBatch(**{k: np.zeros_like(v) for k, v in self.params().items()})

    def subset(self, idx) -> "GaussianBatch":
        return GaussianBatch(**{k: v[idx] for k, v in self.params().items()},
                             owner=None if self.owner is None else self.owner[idx])

    @staticmethod
    def concat(batches) -> "GaussianBatch":
        batches = list(batches)
        if not batches:
            return GaussianBatch.empty()
        owners = None
        if all(b.owner is not None for b in batches):
            owners = np.concatenate([b.owner for b in batches])
        return GaussianBatch(**{k: np.concatenate([getattr(b, k) for b in batches]) for k in PARAM_NAMES},
                             owner=owners)


def normalize_quaternion(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise NumericError("zero quaternion cannot be normalised")
    return q / n


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrices for (normalised) quaternions, shape ``(..., 3, 3)``."""
    w, x, y, z = np.moveaxis(normalize_quaternion(q), -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def quat_to_rotmat_backward(q, dR) -> np.ndarray:
    """Pull ``dL/dR`` back to the raw (unnormalised) quaternion."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    d = dR
    dw = 2 * (-z * d[..., 0, 1] + y * d[..., 0, 2] + z * d[..., 1, 0]
              - x * d[..., 1, 2] - y * d[..., 2, 0] + x * d[..., 2, 1])
    dx = 2 * (y * d[..., 0, 1] + z * d[..., 0, 2] + y * d[..., 1, 0] - 2 * x * d[..., 1, 1]
              - w * d[..., 1, 2] + z * d[..., 2, 0] + w * d[..., 2, 1] - 2 * x * d[..., 2, 2])
    dy = 2 * (-2 * y * d[..., 0, 0] + x * d[..., 0, 1] + w * d[..., 0, 2] + x * d[..., 1, 0]
              + z * d[..., 1, 2] - w * d[..., 2, 0] + z * d[..., 2, 1] - 2 * y * d[..., 2, 2])
    dz = 2 * (-2 * z * d[..., 0, 0] - w * d[..., 0, 1] + x * d[..., 0, 2] + w * d[..., 1, 0]
              - 2 * z * d[..., 1, 1] + y * d[..., 1, 2] + x * d[..., 2, 0] + y * d[..., 2, 1])
    dqn = np.stack([dw, dx, dy, dz], -1)
    qn = q / norm
    return (dqn - qn * np.sum(dqn * qn, axis=-1, keepdims=True)) / norm


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], -1)


def rotmat_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q / np.linalg.norm(q)


def yaw_quaternion(theta: float) -> np.ndarray:
    """Rotation by ``theta`` about +y."""
    return np.array([np.cos(theta / 2), 0.0, np.sin(theta / 2), 0.0])


def covariance_from_rs(rotation, scale) -> np.ndarray:
    """``R S S^T R^T`` for one Gaussian or a stack of them."""
    R = quat_to_rotmat(rotation)
    s2 = np.asarray(scale, dtype=np.float64) ** 2
    M = R * s2[..., None, :]
    cov = M @ np.swapaxes(R, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def gaussian_eval(mu, cov, p) -> float:
    """Unnormalised density ``exp(-0.5 (p - mu)^T cov^-1 (p - mu))``."""
    cov = np.asarray(cov, dtype=np.float64)
    d = np.asarray(p, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise NumericError("covariance is singular or not positive definite") from None
    if np.min(np.diag(L)) < 1e-150:
        raise NumericError("covariance is numerically singular")
    y = solve_triangular(L, d, lower=True)
    return float(np.exp(-0.5 * (y @ y)))
