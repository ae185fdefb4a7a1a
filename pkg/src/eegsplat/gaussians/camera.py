"""Pinhole cameras.

Camera space follows the computer-vision convention: +x right, +y down,
+z forward.  The world frame is right-handed and y-up.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ..errors import LoadError, ValidationError


@dataclass(frozen=True)
class Camera:
    world_to_camera: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01

    def __post_init__(self):
        T = np.asarray(self.world_to_camera, dtype=np.float64)
        if T.shape != (4, 4):
            raise ValidationError(f"world_to_camera must be 4x4, got {T.shape}")
        R = T[:3, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or np.linalg.det(R) < 0:
            raise ValidationError("world_to_camera rotation block is not a proper rotation")
        if np.abs(T[3] - [0, 0, 0, 1]).max() > 0:
            raise ValidationError("world_to_camera bottom row must be [0, 0, 0, 1]")
        if not self.near > 0:
            raise ValidationError(f"near plane must be positive, got {self.near}")
        if self.width < 1 or self.height < 1:
            raise ValidationError("resolution must be positive")
        T = T.copy()
        T.setflags(write=False)
        object.__setattr__(self, "world_to_camera", T)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def R(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def to_dict(self) -> dict:
        return {
            "world_to_camera": self.world_to_camera.tolist(),
            "focal": [self.fx, self.fy],
            "principal": [self.cx, self.cy],
            "resolution": [self.width, self.height],
            "near": self.near,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Camera":
        try:
            return cls(np.asarray(doc["world_to_camera"], dtype=np.float64),
                       float(doc["focal"][0]), float(doc["focal"][1]),
                       float(doc["principal"][0]), float(doc["principal"][1]),
                       int(doc["resolution"][0]), int(doc["resolution"][1]),
                       float(doc.get("near", 0.01)))
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise LoadError(f"bad camera description: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "Camera":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise LoadError(f"camera file is not JSON: {exc}") from None


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera matrix for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    right = np.cross(f, up)
    if np.linalg.norm(right) < 1e-12:
        raise ValidationError("view direction is parallel to the up vector")
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    T = np.eye(4)
    T[:3, :3] = np.stack([right, down, f])
    T[:3, 3] = -T[:3, :3] @ eye
    return T


def make_camera(eye, target=(0.0, 0.0, 0.0), *, width=32, height=32, fov_deg=45.0, near=0.01) -> Camera:
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return Camera(look_at(eye, target), f, f, width / 2, height / 2, width, height, near)


def camera_ring(n_views=8, radius=4.0, elevation_deg=15.0, target=(0.0, 0.0, 0.0),
                azimuth_offset_deg=0.0, **kw) -> list[Camera]:
    """Cameras evenly spaced in azimuth about ``target``, all looking at it."""
    target = np.asarray(target, dtype=np.float64)
    el = np.radians(elevation_deg)
    cams = []
    for k in range(n_views):
        az = 2 * np.pi * k / n_views + np.radians(azimuth_offset_deg)
        offset = radius * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        cams.append(make_camera(target + offset, target, **kw))
    return cams
