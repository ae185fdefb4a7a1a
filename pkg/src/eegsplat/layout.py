"""Scene layouts: per-object bounding boxes predicted from a text description.

Layout documents are JSON::

    {"schema_version": 1,
     "objects": [{"name": "cat", "prompt": "a cat",
                  "center": [x, y, z], "size": [l, w, h], "yaw": 0.0}]}

The world frame is right-handed and y-up; ``l`` runs along x, ``h`` along y
and ``w`` along z before the box is rotated by ``yaw`` about +y.
"""
from __future__ import annotations

import json
import math
import re
import urllib.error
import urllib.request
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import TransportError, ValidationError
from .gaussians.camera import Camera
from .gaussians.primitives import GaussianBatch, yaw_quaternion
from .gaussians.raster import pixel_centers

SCHEMA_VERSION = 1
SPACING = 1.5


class LayoutValidationError(ValidationError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid layout: " + "; ".join(self.problems))


def normalize_yaw(theta: float) -> float:
    """Wrap an angle into ``(-pi, pi]``."""
    t = math.fmod(float(theta), 2 * math.pi)
    if t <= -math.pi:
        t += 2 * math.pi
    elif t > math.pi:
        t -= 2 * math.pi
    return t


@dataclass(frozen=True)
class BoundingBox:
    center: tuple
    size: tuple
    yaw: float = 0.0

    def __post_init__(self):
        center = tuple(float(v) for v in self.center)
        size = tuple(float(v) for v in self.size)
        if len(center) != 3 or len(size) != 3:
            raise ValidationError("center and size must have three components")
        if not all(math.isfinite(v) for v in center + size + (self.yaw,)):
            raise ValidationError("box fields must be finite")
        if min(size) <= 0:
            raise ValidationError(f"box size must be positive, got {size}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @property
    def extents(self) -> np.ndarray:
        """Unrotated box extents along the world x, y and z axes."""
        l, w, h = self.size
        return np.array([l, h, w])

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])

    def to_local(self, points) -> np.ndarray:
        """World points expressed in the box's unrotated frame, relative to its center."""
        return (np.asarray(points, dtype=np.float64) - self.center) @ self.rotation()

    def contains(self, points, tol: float = 1e-9) -> np.ndarray:
        local = self.to_local(np.atleast_2d(points))
        return np.all(np.abs(local) <= self.extents / 2 + tol, axis=1)

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        return (signs * self.extents / 2) @ self.rotation().T + self.center


@dataclass(frozen=True)
class LayoutObject:
    name: str
    prompt: str
    box: BoundingBox


@dataclass(frozen=True)
class SceneLayout:
    objects: tuple

    def __post_init__(self):
        objs = tuple(self.objects)
        if not objs:
            raise LayoutValidationError(["objects: layout must contain at least one object"])
        names = [o.name for o in objs]
        dups = sorted({n for n in names if names.count(n) > 1})
        if dups:
            raise LayoutValidationError([f"objects.name: duplicate names {dups}"])
        object.__setattr__(self, "objects", objs)

    def __len__(self):
        return len(self.objects)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "objects": [{"name": o.name, "prompt": o.prompt, "center": list(o.box.center),
                         "size": list(o.box.size), "yaw": o.box.yaw} for o in self.objects],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def warnings(self) -> list[str]:
        """Pairs of boxes whose axis-aligned hulls overlap (overlap itself is allowed)."""
        out = []
        hulls = [(o.box.corners().min(0), o.box.corners().max(0)) for o in self.objects]
        for i in range(len(self.objects)):
            for j in range(i + 1, len(self.objects)):
                (lo1, hi1), (lo2, hi2) = hulls[i], hulls[j]
                if np.all(lo1 < hi2) and np.all(lo2 < hi1):
                    out.append(f"boxes {self.objects[i].name!r} and {self.objects[j].name!r} overlap")
        return out


def _vec3(obj, key, i, problems):
    val = obj.get(key)
    if not isinstance(val, list) or len(val) != 3 or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in val):
        problems.append(f"objects[{i}].{key}: expected a list of three numbers")
        return None
    if not all(math.isfinite(v) for v in val):
        problems.append(f"objects[{i}].{key}: values must be finite")
        return None
    return val


def parse_layout_json(doc: str) -> SceneLayout:
    try:
        data = json.loads(doc)
    except (json.JSONDecodeError, TypeError) as exc:
        raise LayoutValidationError([f"document is not valid JSON: {exc}"]) from None
    if not isinstance(data, dict) or not isinstance(data.get("objects"), list):
        raise LayoutValidationError(["objects: expected a list"])
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise LayoutValidationError([f"schema_version: unsupported version {version!r}"])
    problems, parsed = [], []
    for i, obj in enumerate(data["objects"]):
        if not isinstance(obj, dict):
            problems.append(f"objects[{i}]: expected an object")
            continue
        name = obj.get("name")
        if not isinstance(name, str) or not name:
            problems.append(f"objects[{i}].name: expected a non-empty string")
        prompt = obj.get("prompt", name)
        if not isinstance(prompt, str):
            problems.append(f"objects[{i}].prompt: expected a string")
        center = _vec3(obj, "center", i, problems)
        size = _vec3(obj, "size", i, problems)
        if size is not None and min(size) <= 0:
            problems.append(f"objects[{i}].size: all components must be positive, got {size}")
            size = None
        yaw = obj.get("yaw", 0.0)
        if not isinstance(yaw, (int, float)) or isinstance(yaw, bool) or not math.isfinite(yaw):
            problems.append(f"objects[{i}].yaw: expected a finite number")
            yaw = None
        if None not in (center, size, yaw) and isinstance(name, str) and name and isinstance(prompt, str):
            parsed.append(LayoutObject(name, prompt, BoundingBox(center, size, yaw)))
    if not data["objects"]:
        problems.append("objects: layout must contain at least one object")
    names = [o.name for o in parsed]
    dups = sorted({n for n in names if names.count(n) > 1})
    if dups:
        problems.append(f"objects.name: duplicate names {dups}")
    if problems:
        raise LayoutValidationError(problems)
    return SceneLayout(tuple(parsed))


def request_layout(endpoint: str, description: str, timeout: float = 10.0) -> SceneLayout:
    """Ask an external layout service for a layout.

    Raises :class:`TransportError` on network failure, timeout or non-2xx
    status, and :class:`LayoutValidationError` if the body violates the
    schema; callers can fall back to :func:`fallback_layout` on either.
    """
    body = json.dumps({"description": description, "schema_version": SCHEMA_VERSION}).encode()
    req = urllib.request.Request(endpoint, data=body, method="POST",
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            payload = resp.read()
    except urllib.error.HTTPError as exc:
        raise TransportError(f"{endpoint}: HTTP {exc.code}") from None
    except (urllib.error.URLError, TimeoutError, OSError) as exc:
        reason = getattr(exc, "reason", exc)
        raise TransportError(f"{endpoint}: {reason}") from None
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError:
        raise LayoutValidationError(["response body is not UTF-8"]) from None
    return parse_layout_json(text)


def tokenize(text: str) -> list[str]:
    return [t for t in re.split(r"[^0-9a-z]+", text.lower()) if t]


def load_lexicon(path=None) -> dict[str, tuple]:
    if path is None:
        text = resources.files("eegsplat.data").joinpath("lexicon.txt").read_text()
    else:
        text = Path(path).read_text()
    lex = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValidationError(f"lexicon line {lineno}: expected 'noun l w h'")
        lex[parts[0].lower()] = tuple(float(v) for v in parts[1:])
    return lex


def fallback_layout(description: str, lexicon: dict | None = None) -> SceneLayout:
    """Deterministic stand-in for the layout LLM.

    Known nouns are placed left to right along +x, ``SPACING`` apart,
    resting on the ground plane ``y = 0``.
    """
    if not description or not description.strip():
        raise ValidationError("description is empty")
    lex = load_lexicon() if lexicon is None else lexicon
    objects, seen = [], {}
    for tok in tokenize(description):
        if tok not in lex:
            continue
        seen[tok] = seen.get(tok, 0) + 1
        name = tok if seen[tok] == 1 else f"{tok}_{seen[tok]}"
        l, w, h = lex[tok]
        box = BoundingBox((SPACING * len(objects), h / 2, 0.0), (l, w, h), 0.0)
        objects.append(LayoutObject(name, tok, box))
    if not objects:
        raise ValidationError("no objects recognized in description")
    return SceneLayout(tuple(objects))


def init_gaussians_in_box(box: BoundingBox, n: int, seed: int = 0,
                          rng: np.random.Generator | None = None) -> GaussianBatch:
    """``n`` Gaussians uniformly inside ``box``: scale size/20, opacity 0.5, mid-gray."""
    if n < 0:
        raise ValidationError("n must be nonnegative")
    rng = np.random.default_rng(seed) if rng is None else rng
    size = box.extents
    local = rng.uniform(-0.5, 0.5, size=(n, 3)) * size
    mu = local @ box.rotation().T + np.asarray(box.center)
    q = np.tile(yaw_quaternion(box.yaw), (n, 1))
    return GaussianBatch(mu, q, np.tile(size / 20.0, (n, 1)), np.full((n, 3), 0.5), np.full(n, 0.5))


def init_layout(layout: SceneLayout, per_object: int, seed: int = 0) -> list[GaussianBatch]:
    """Initial Gaussians for every object, drawn from one seeded stream in object order."""
    rng = np.random.default_rng(seed)
    return [init_gaussians_in_box(o.box, per_object, rng=rng) for o in layout.objects]


def rasterize_layout(layout: SceneLayout, cam: Camera) -> np.ndarray:
    """``height x width`` integer image of the nearest box hit by each pixel ray (-1 for none)."""
    pix = pixel_centers(cam)
    dirs_cam = np.stack([(pix[:, 0] - cam.cx) / cam.fx, (pix[:, 1] - cam.cy) / cam.fy,
                         np.ones(len(pix))], -1)
    dirs = dirs_cam @ cam.R
    origin = cam.center
    best_t = np.full(len(pix), np.inf)
    ids = np.full(len(pix), -1, dtype=np.int64)
    for k, obj in enumerate(layout.objects):
        box = obj.box
        o = box.to_local(origin[None])[0]
        d = dirs @ box.rotation()
        half = box.extents / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-half - o) * inv
            t2 = (half - o) * inv
        # a zero direction component either always or never lies in the slab
        inside = np.abs(o) <= half
        lo = np.where(d == 0, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
        hi = np.where(d == 0, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
        t_near = lo.max(axis=1)
        t_far = hi.min(axis=1)
        hit = (t_near <= t_far) & (t_far > 0)
        t_hit = np.where(t_near > 0, t_near, 0.0)
        closer = hit & (t_hit < best_t)
        best_t[closer] = t_hit[closer]
        ids[closer] = k
    return ids.reshape(cam.height, cam.width)
