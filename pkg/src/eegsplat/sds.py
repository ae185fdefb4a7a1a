"""Layout-constrained two-stage optimisation of Gaussian scenes.

Each step renders the current Gaussians, asks a *guidance provider* for a
residual image, backpropagates ``lambda_weight * residual`` through the
rasteriser and applies one adaptive update.  With a diffusion prior the
residual is the denoiser's noise error ``eps_hat - eps``; the shipped
:class:`PhotometricGuidance` instead returns ``render - target`` so the
update is the gradient of ``0.5 * ||render - target||^2``.

Stage one optimises every object in isolation inside its box; stage two
optimises the assembled scene jointly with the boxes held fixed.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from .errors import ValidationError
from .gaussians.camera import Camera, camera_ring
from .gaussians.primitives import PARAM_NAMES, GaussianBatch
from .gaussians.raster import RenderedImage, render, render_with_grad
from .layout import SceneLayout, init_layout, rasterize_layout

log = logging.getLogger(__name__)

DEFAULT_LR = {"mu": 1e-3, "color": 5e-2, "opacity": 2e-2, "scale": 5e-3, "rotation": 1e-3}
SCALE_FLOOR = 1e-6


@dataclass(frozen=True)
class Condition:
    """Everything a provider may condition on for one step."""

    stage: str
    step: int
    view: int
    camera: Camera
    guidance_scale: float
    object_name: str | None = None
    prompt: str | None = None
    layout_ids: np.ndarray | None = None
    timestep: float | None = None


class GuidanceProvider(Protocol):
    def __call__(self, image: RenderedImage, cond: Condition) -> np.ndarray:
        ...


class ZeroGuidance:
    """Provider whose residual is identically zero."""

    def __call__(self, image, cond):
        return np.zeros_like(image.pixels)


class PhotometricGuidance:
    """Residual ``render - target`` against fixed target views.

    ``cond.view`` selects the target; the conditioning camera must be the
    one the target was captured with.
    """

    def __init__(self, views: Sequence[tuple[Camera, np.ndarray]]):
        if not views:
            raise ValidationError("photometric guidance needs at least one view")
        self.cameras = [cam for cam, _ in views]
        self.targets = [np.asarray(img, dtype=np.float64) for _, img in views]
        for cam, img in zip(self.cameras, self.targets):
            if img.shape != (cam.height, cam.width, 3):
                raise ValidationError(f"target of shape {img.shape} does not match its camera")

    @classmethod
    def from_scene(cls, scene, cameras, background=(0.0, 0.0, 0.0)) -> "PhotometricGuidance":
        return cls([(cam, render(scene, cam, background).pixels) for cam in cameras])

    def _target(self, cond: Condition) -> np.ndarray:
        if not 0 <= cond.view < len(self.targets):
            raise ValidationError(f"view {cond.view} outside the {len(self.targets)} target views")
        if not np.array_equal(cond.camera.world_to_camera, self.cameras[cond.view].world_to_camera):
            raise ValidationError(f"camera for view {cond.view} does not match the target camera")
        return self.targets[cond.view]

    def __call__(self, image, cond):
        return image.pixels - self._target(cond)

    def loss(self, image, cond) -> float:
        r = image.pixels - self._target(cond)
        return 0.5 * float(np.sum(r * r))


@dataclass(frozen=True)
class OptConfig:
    steps_object: int = 300
    steps_scene: int = 300
    lr: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_LR))
    lambda_weight: float = 1.0
    guidance_scale_object: float = 50.0
    guidance_scale_scene: float = 100.0
    seed: int = 0
    gaussians_per_object: int = 16
    rms_decay: float = 0.99
    eps: float = 1e-8
    #: learning rates decay geometrically to ``lr * lr_final_ratio`` by the end of each stage
    lr_final_ratio: float = 0.1
    background: tuple = (0.0, 0.0, 0.0)
    n_views: int = 8
    elevation_deg: float = 15.0
    radius: float = 4.0
    resolution: tuple = (32, 32)
    fov_deg: float = 45.0

    def __post_init__(self):
        lr = dict(DEFAULT_LR)
        lr.update(self.lr)
        if set(lr) != set(DEFAULT_LR):
            raise ValidationError(f"unknown learning-rate groups {sorted(set(lr) - set(DEFAULT_LR))}")
        if any(not v > 0 for v in lr.values()):
            raise ValidationError("learning rates must be positive")
        if self.steps_object < 0 or self.steps_scene < 0:
            raise ValidationError("step counts must be nonnegative")
        if self.lambda_weight < 0:
            raise ValidationError("lambda_weight must be nonnegative")
        if not 0 < self.lr_final_ratio <= 1:
            raise ValidationError("lr_final_ratio must lie in (0, 1]")
        if self.gaussians_per_object < 1:
            raise ValidationError("gaussians_per_object must be at least 1")
        object.__setattr__(self, "lr", lr)
        object.__setattr__(self, "background", tuple(float(v) for v in self.background))
        object.__setattr__(self, "resolution", tuple(int(v) for v in self.resolution))

    def cameras(self, target=(0.0, 0.0, 0.0)) -> list[Camera]:
        w, h = self.resolution
        return camera_ring(self.n_views, self.radius, self.elevation_deg, target,
                           width=w, height=h, fov_deg=self.fov_deg)

    def to_json(self) -> str:
        return json.dumps({f.name: getattr(self, f.name) for f in fields(self)}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "OptConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config is not JSON: {exc}") from None
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ValidationError(f"unknown config keys {sorted(extra)}")
        for key in ("background", "resolution"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)


class RMSOptimizer:
    """Momentum-free per-parameter adaptive steps with bias-corrected second moments.

    After every update opacities are clamped to ``[0, 1]``, colors to
    ``[0, 1]``, scales floored at ``SCALE_FLOOR`` and quaternions
    renormalised.
    """

    def __init__(self, lr: Mapping[str, float], decay: float = 0.99, eps: float = 1e-8,
                 schedule: Callable[[int], float] | None = None):
        self.lr = dict(lr)
        self.decay = decay
        self.eps = eps
        self.schedule = schedule
        self.t = 0
        self.sq: dict[str, np.ndarray] = {}

    def step(self, batch: GaussianBatch, grads: GaussianBatch) -> GaussianBatch:
        factor = self.schedule(self.t) if self.schedule else 1.0
        self.t += 1
        out = batch.copy()
        bias = 1.0 - self.decay ** self.t
        for name in PARAM_NAMES:
            g = getattr(grads, name)
            sq = self.sq.get(name)
            if sq is None or sq.shape != g.shape:
                sq = np.zeros_like(g)
            sq = self.decay * sq + (1.0 - self.decay) * g * g
            self.sq[name] = sq
            delta = self.lr[name] * factor * g / (np.sqrt(sq / bias) + self.eps)
            setattr(out, name, getattr(out, name) - delta)
        moved = np.any(grads.rotation != 0, axis=1)
        if np.any(moved):
            q = out.rotation[moved]
            out.rotation[moved] = q / np.linalg.norm(q, axis=1, keepdims=True)
        np.clip(out.opacity, 0.0, 1.0, out=out.opacity)
        np.clip(out.color, 0.0, 1.0, out=out.color)
        np.maximum(out.scale, SCALE_FLOOR, out=out.scale)
        return out


def _decay_schedule(cfg: OptConfig, steps: int):
    if cfg.lr_final_ratio == 1.0 or steps <= 1:
        return None
    rate = cfg.lr_final_ratio ** (1.0 / (steps - 1))
    return lambda t: rate ** t


def make_optimizer(cfg: OptConfig, steps: int) -> RMSOptimizer:
    return RMSOptimizer(cfg.lr, cfg.rms_decay, cfg.eps, _decay_schedule(cfg, steps))


def _residual_fn(g: GuidanceProvider, cond: Condition, lam: float):
    def fn(image):
        res = np.asarray(g(image, cond), dtype=np.float64)
        if res.shape != image.pixels.shape:
            raise ValidationError(
                f"guidance residual has shape {res.shape}, expected {image.pixels.shape}")
        if not np.isfinite(res).all():
            raise ValidationError("guidance residual contains non-finite values")
        return lam * res
    return fn


def _take_step(batch, cond, g, cfg, optimizer, loss_log):
    image, _, grads = render_with_grad(batch, cond.camera, cfg.background,
                                       _residual_fn(g, cond, cfg.lambda_weight))
    if loss_log is not None and hasattr(g, "loss"):
        loss_log.append(g.loss(image, cond))
    return optimizer.step(batch, grads)


def object_step(obj: GaussianBatch, cams: Sequence[Camera], g: GuidanceProvider, cfg: OptConfig, *,
                step: int = 0, optimizer: RMSOptimizer | None = None, name: str | None = None,
                prompt: str | None = None, loss_log: list | None = None) -> GaussianBatch:
    """One object-level update from camera ``cams[step % len(cams)]``."""
    obj = GaussianBatch.coerce(obj)
    if len(obj) == 0:
        raise ValidationError("object has no Gaussians")
    view = step % len(cams)
    cond = Condition("object", step, view, cams[view], cfg.guidance_scale_object,
                     object_name=name, prompt=prompt)
    optimizer = optimizer or make_optimizer(cfg, 1)
    return _take_step(obj, cond, g, cfg, optimizer, loss_log)


@dataclass
class SceneState:
    layout: SceneLayout
    gaussians: list[GaussianBatch]
    log: list[tuple[str, int, float]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.gaussians) != len(self.layout.objects):
            raise ValidationError("need exactly one Gaussian set per layout object")

    def combined(self) -> GaussianBatch:
        parts = []
        for k, b in enumerate(self.gaussians):
            b = b.copy()
            b.owner = np.full(len(b), k, dtype=np.int64)
            parts.append(b)
        return GaussianBatch.concat(parts)

    def with_combined(self, batch: GaussianBatch) -> "SceneState":
        owner = batch.owner
        parts = [batch.subset(owner == k) for k in range(len(self.gaussians))]
        return replace(self, gaussians=parts)


def scene_step(state: SceneState, cams: Sequence[Camera], g: GuidanceProvider, cfg: OptConfig, *,
               step: int = 0, optimizer: RMSOptimizer | None = None,
               loss_log: list | None = None) -> SceneState:
    """One joint update of all objects; the condition carries the layout's box-ID image."""
    view = step % len(cams)
    cam = cams[view]
    cond = Condition("scene", step, view, cam, cfg.guidance_scale_scene,
                     layout_ids=rasterize_layout(state.layout, cam))
    optimizer = optimizer or make_optimizer(cfg, 1)
    combined = state.combined()
    return state.with_combined(_take_step(combined, cond, g, cfg, optimizer, loss_log))


def _provider_for(g_obj, name):
    if isinstance(g_obj, Mapping):
        if name not in g_obj:
            raise ValidationError(f"no object-level guidance provider for {name!r}")
        return g_obj[name]
    return g_obj


def optimize(layout: SceneLayout, g_obj: GuidanceProvider | Mapping[str, GuidanceProvider],
             g_scene: GuidanceProvider, cfg: OptConfig, cameras: Sequence[Camera] | None = None,
             initial: Sequence[GaussianBatch] | None = None) -> SceneState:
    """Initialise Gaussians in every box, then run the object and scene stages.

    ``g_obj`` may be a single provider or a mapping from object name to
    provider.  ``cameras`` defaults to the configured ring around the
    layout's centroid.  When a provider exposes ``loss(image, cond)`` its
    value for every step is recorded in ``state.log`` as
    ``(stage, step, loss)``.
    """
    if cameras is None:
        centroid = np.mean([o.box.center for o in layout.objects], axis=0)
        cameras = cfg.cameras(centroid)
    cameras = list(cameras)
    if initial is None:
        initial = init_layout(layout, cfg.gaussians_per_object, cfg.seed)
    state = SceneState(layout, [GaussianBatch.coerce(b).copy() for b in initial])

    for k, obj in enumerate(layout.objects):
        g = _provider_for(g_obj, obj.name)
        opt = make_optimizer(cfg, cfg.steps_object)
        batch = state.gaussians[k]
        stage = f"object/{obj.name}"
        for step in range(cfg.steps_object):
            losses = []
            batch = object_step(batch, cameras, g, cfg, step=step, optimizer=opt,
                                name=obj.name, prompt=obj.prompt, loss_log=losses)
            if losses:
                state.log.append((stage, step, losses[0]))
        state.gaussians[k] = batch
        log.debug("finished object stage for %s", obj.name)

    opt = make_optimizer(cfg, cfg.steps_scene)
    for step in range(cfg.steps_scene):
        losses = []
        state = scene_step(state, cameras, g_scene, cfg, step=step, optimizer=opt, loss_log=losses)
        if losses:
            state.log.append(("scene", step, losses[0]))
    return state


def write_loss_log(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write("stage,step,loss\n")
        for stage, step, loss in rows:
            fh.write(f"{stage},{step},{loss!r}\n")


def read_loss_log(path) -> list[tuple[str, int, float]]:
    rows = []
    with open(path) as fh:
        next(fh)
        for line in fh:
            stage, step, loss = line.rstrip("\n").split(",")
            rows.append((stage, int(step), float(loss)))
    return rows


def guidance_for_layout_targets(gt: GaussianBatch, layout: SceneLayout, cameras, background=(0.0, 0.0, 0.0)):
    """Photometric providers built from a ground-truth scene.

    The scene-level provider sees the full scene; the provider for object
    ``k`` sees only ground-truth Gaussians whose means fall in box ``k``.
    """
    per_object = {}
    for obj in layout.objects:
        inside = obj.box.contains(gt.mu) if len(gt) else np.zeros(0, dtype=bool)
        per_object[obj.name] = PhotometricGuidance.from_scene(gt.subset(inside), cameras, background)
    return per_object, PhotometricGuidance.from_scene(gt, cameras, background)

