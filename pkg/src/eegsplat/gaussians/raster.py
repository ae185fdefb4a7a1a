"""Reference CPU splatting rasteriser with an analytic backward pass.

Every pixel gathers the Gaussians whose screen-space Mahalanobis distance
is within ``cutoff`` (3 sigma by default), composites them front to back by
camera-space depth of their means, and blends the background with the
residual transmittance.  Pixel ``(row, col)`` samples the image plane at
``(col + 0.5, row + 0.5)``.

The implementation is dense over ``pixels x gaussians``; Gaussians outside
a pixel's support simply contribute an effective alpha of zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera
from .primitives import (
    Gaussian3D,
    GaussianBatch,
    covariance_from_rs,
    quat_to_rotmat,
    quat_to_rotmat_backward,
)

LOWPASS = 0.3
CUTOFF_SIGMA = 3.0


@dataclass
class RenderedImage:
    pixels: np.ndarray  # H x W x 3
    alpha: np.ndarray  # H x W


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float


@dataclass
class Projection:
    cam_xyz: np.ndarray
    mean2d: np.ndarray
    J: np.ndarray
    M: np.ndarray
    rotmats: np.ndarray
    cov3d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    valid: np.ndarray

    @property
    def depth(self) -> np.ndarray:
        return self.cam_xyz[:, 2]


def project(batch: GaussianBatch, cam: Camera, lowpass: float = LOWPASS) -> Projection:
    """EWA projection of every Gaussian; ``valid`` is False for culled ones."""
    Rw, tw = cam.R, cam.t
    t = batch.mu @ Rw.T + tw
    valid = t[:, 2] > cam.near
    z = np.where(valid, t[:, 2], 1.0)
    x, y = t[:, 0], t[:, 1]
    n = len(batch)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / z**2
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / z**2
    mean2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], -1)
    rotmats = quat_to_rotmat(batch.rotation) if n else np.zeros((0, 3, 3))
    cov3d = covariance_from_rs(batch.rotation, batch.scale) if n else np.zeros((0, 3, 3))
    M = J @ Rw
    cov2d = M @ cov3d @ np.swapaxes(M, 1, 2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2)) + lowpass * np.eye(2)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([np.stack([c, -b], -1), np.stack([-b, a], -1)], -2) / det[:, None, None]
    return Projection(t, mean2d, J, M, rotmats, cov3d, cov2d, conic, valid)


def project_gaussian(g: Gaussian3D, cam: Camera, lowpass: float = LOWPASS) -> ProjectedGaussian | None:
    """Project a single Gaussian; returns ``None`` when it lies in front of the near plane."""
    p = project(GaussianBatch.from_list([g]), cam, lowpass)
    if not p.valid[0]:
        return None
    return ProjectedGaussian(p.mean2d[0], p.cov2d[0], float(p.depth[0]))


def composite_pixel(contribs, background=(0.0, 0.0, 0.0)):
    """Front-to-back compositing of ``(color, effective_alpha)`` pairs.

    Returns ``(rgb, accumulated_alpha)``; ``rgb`` includes the background
    weighted by the residual transmittance.
    """
    colors = np.array([c for c, _ in contribs], dtype=np.float64).reshape(-1, 3)
    alphas = np.array([a for _, a in contribs], dtype=np.float64)
    w, T_final = compositing_weights(alphas)
    rgb = w @ colors + T_final * np.asarray(background, dtype=np.float64)
    return rgb, 1.0 - T_final


def compositing_weights(alphas):
    """Blend weights ``alpha_i * prod_{j<i}(1 - alpha_j)`` and the final transmittance."""
    alphas = np.asarray(alphas, dtype=np.float64)
    T = transmittance(alphas)
    return alphas * T[:-1], T[-1]


def transmittance(alphas) -> np.ndarray:
    """Transmittance in front of each contributor, plus the residual at the end."""
    alphas = np.asarray(alphas, dtype=np.float64)
    return np.concatenate([[1.0], np.cumprod(1.0 - alphas)])


def composite_stack(colors, alphas, depths, background=(0.0, 0.0, 0.0)):
    """Composite an unordered stack after sorting it by depth."""
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    alphas = np.asarray(alphas, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    order = np.lexsort((alphas, *colors.T[::-1], depths))
    return composite_pixel(list(zip(colors[order], alphas[order])), background)


def depth_order(batch: GaussianBatch, depth: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Indices ``idx`` sorted by depth, then by parameter values, then by index.

    Breaking ties on the parameters keeps the result independent of the
    order in which Gaussians were listed.
    """
    keys = [idx, batch.opacity[idx]]
    for arr in (batch.color, batch.scale, batch.rotation, batch.mu):
        keys.extend(arr[idx].T[::-1])
    keys.append(depth[idx])
    return idx[np.lexsort(keys)]


def pixel_centers(cam: Camera) -> np.ndarray:
    cols, rows = np.meshgrid(np.arange(cam.width) + 0.5, np.arange(cam.height) + 0.5)
    return np.stack([cols.ravel(), rows.ravel()], -1)


@dataclass
class _Raster:
    batch: GaussianBatch
    cam: Camera
    background: np.ndarray
    proj: Projection
    order: np.ndarray
    d: np.ndarray
    support: np.ndarray
    G: np.ndarray
    alpha: np.ndarray
    T: np.ndarray
    T_final: np.ndarray
    pixels: np.ndarray


def _forward(scene, cam: Camera, background, lowpass, cutoff) -> _Raster:
    batch = GaussianBatch.coerce(scene)
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,)).copy()
    proj = project(batch, cam, lowpass)
    order = depth_order(batch, proj.depth, np.flatnonzero(proj.valid))
    pix = pixel_centers(cam)
    n_pix = pix.shape[0]

    m = proj.mean2d[order]
    Q = proj.conic[order]
    d = pix[:, None, :] - m[None, :, :]
    dx, dy = d[..., 0], d[..., 1]
    q = Q[:, 0, 0] * dx * dx + 2.0 * Q[:, 0, 1] * dx * dy + Q[:, 1, 1] * dy * dy
    support = q <= cutoff * cutoff
    G = np.exp(-0.5 * q)
    alpha = np.where(support, batch.opacity[order] * G, 0.0)
    T_incl = np.cumprod(1.0 - alpha, axis=1)
    T = np.concatenate([np.ones((n_pix, 1)), T_incl[:, :-1]], axis=1)
    T_final = T_incl[:, -1] if order.size else np.ones(n_pix)
    rgb = (alpha * T) @ batch.color[order] + T_final[:, None] * bg
    return _Raster(batch, cam, bg, proj, order, d, support, G, alpha, T, T_final, rgb)


def render(scene, cam: Camera, background=(0.0, 0.0, 0.0), *, lowpass: float = LOWPASS,
           cutoff: float = CUTOFF_SIGMA) -> RenderedImage:
    """Render a list of :class:`Gaussian3D` (or a :class:`GaussianBatch`)."""
    r = _forward(scene, cam, background, lowpass, cutoff)
    h, w = cam.height, cam.width
    return RenderedImage(r.pixels.reshape(h, w, 3), (1.0 - r.T_final).reshape(h, w))


def render_backward(scene, cam: Camera, background, dL_dpixels, *, lowpass: float = LOWPASS,
                    cutoff: float = CUTOFF_SIGMA) -> GaussianBatch:
    """Gradients of ``sum(dL_dpixels * pixels)`` with respect to every parameter.

    The returned batch holds ``dL/dmu``, ``dL/drotation`` (w.r.t. the raw
    quaternion, which the forward pass normalises), ``dL/dscale``,
    ``dL/dcolor`` and ``dL/dopacity`` for each input Gaussian in input
    order.  Culled Gaussians get zero gradient.
    """
    r = _forward(scene, cam, background, lowpass, cutoff)
    return _backward(r, np.asarray(dL_dpixels, dtype=np.float64))


def render_with_grad(scene, cam: Camera, background, grad_fn, *, lowpass: float = LOWPASS,
                     cutoff: float = CUTOFF_SIGMA):
    """Forward render, ask ``grad_fn(image)`` for ``dL/dpixels``, then backprop.

    Returns ``(image, dL_dpixels, grads)`` sharing a single forward pass.
    """
    r = _forward(scene, cam, background, lowpass, cutoff)
    h, w = cam.height, cam.width
    image = RenderedImage(r.pixels.reshape(h, w, 3), (1.0 - r.T_final).reshape(h, w))
    dpix = np.asarray(grad_fn(image), dtype=np.float64)
    return image, dpix, _backward(r, dpix)


def _backward(r: _Raster, dpix: np.ndarray) -> GaussianBatch:
    batch, cam, proj, order = r.batch, r.cam, r.proj, r.order
    grads = batch.zeros_like()
    n_pix = r.pixels.shape[0]
    if dpix.size != n_pix * 3:
        raise ValueError(f"dL_dpixels has {dpix.size} entries, expected {n_pix * 3}")
    if order.size == 0:
        return grads
    g = dpix.reshape(n_pix, 3)
    colors = batch.color[order]
    opac = batch.opacity[order]
    alpha, T = r.alpha, r.T

    grads.color[order] = (alpha * T).T @ g

    # g . (color composited behind splat k), built back to front
    gc = g @ colors.T
    behind = np.empty_like(alpha)
    acc = g @ r.background
    for k in range(order.size - 1, -1, -1):
        behind[:, k] = acc
        acc = gc[:, k] * alpha[:, k] + (1.0 - alpha[:, k]) * acc
    d_alpha = T * (gc - behind)

    d_alpha = np.where(r.support, d_alpha, 0.0)
    grads.opacity[order] = np.sum(d_alpha * r.G, axis=0)
    dq = -0.5 * d_alpha * opac * r.G

    Q = proj.conic[order]
    dx, dy = r.d[..., 0], r.d[..., 1]
    Qd_x = Q[:, 0, 0] * dx + Q[:, 0, 1] * dy
    Qd_y = Q[:, 0, 1] * dx + Q[:, 1, 1] * dy
    d_mean = -2.0 * np.stack([np.sum(dq * Qd_x, 0), np.sum(dq * Qd_y, 0)], -1)
    dQ = np.empty((order.size, 2, 2))
    dQ[:, 0, 0] = np.sum(dq * dx * dx, 0)
    dQ[:, 1, 1] = np.sum(dq * dy * dy, 0)
    dQ[:, 0, 1] = dQ[:, 1, 0] = np.sum(dq * dx * dy, 0)
    d_cov2d = -Q @ dQ @ Q

    M = proj.M[order]
    cov3d = proj.cov3d[order]
    d_cov3d = np.swapaxes(M, 1, 2) @ d_cov2d @ M
    d_M = 2.0 * d_cov2d @ M @ cov3d
    d_J = d_M @ cam.R.T

    x, y, z = proj.cam_xyz[order].T
    fx, fy = cam.fx, cam.fy
    d_t = np.empty((order.size, 3))
    d_t[:, 0] = d_mean[:, 0] * fx / z - d_J[:, 0, 2] * fx / z**2
    d_t[:, 1] = d_mean[:, 1] * fy / z - d_J[:, 1, 2] * fy / z**2
    d_t[:, 2] = (-d_mean[:, 0] * fx * x / z**2 - d_mean[:, 1] * fy * y / z**2
                 - d_J[:, 0, 0] * fx / z**2 - d_J[:, 1, 1] * fy / z**2
                 + d_J[:, 0, 2] * 2.0 * fx * x / z**3 + d_J[:, 1, 2] * 2.0 * fy * y / z**3)
    grads.mu[order] = d_t @ cam.R

    R = proj.rotmats[order]
    s = batch.scale[order]
    RtdR = np.swapaxes(R, 1, 2) @ d_cov3d @ R
    grads.scale[order] = 2.0 * s * np.diagonal(RtdR, axis1=1, axis2=2)
    d_R = 2.0 * d_cov3d @ R * (s**2)[:, None, :]
    grads.rotation[order] = quat_to_rotmat_backward(batch.rotation[order], d_R)
    return grads


def support_mask(scene, cam: Camera, *, lowpass: float = LOWPASS, cutoff: float = CUTOFF_SIGMA) -> np.ndarray:
    """``pixels x gaussians`` boolean footprint in input order (culled columns are False).

    Finite-difference checks compare masks before and after a perturbation
    to skip parameters whose footprint crosses the cutoff.
    """
    r = _forward(scene, cam, (0.0, 0.0, 0.0), lowpass, cutoff)
    mask = np.zeros((r.pixels.shape[0], len(r.batch)), dtype=bool)
    mask[:, r.order] = r.support
    return mask
