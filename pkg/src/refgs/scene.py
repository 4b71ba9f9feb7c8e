"""Gaussian scenes, pinhole cameras, synthetic generators and EWA projection."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import jsonio
from .numkit import make_rng

SCENE_FILE_VERSION = 1

NEAR_PLANE = 0.01
COV_DILATION = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
BACKGROUND = -1

COLOR_TAGS = {
    "red": (0.85, 0.12, 0.10),
    "green": (0.15, 0.70, 0.20),
    "blue": (0.12, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.15),
    "purple": (0.55, 0.20, 0.70),
    "white": (0.92, 0.92, 0.92),
}
SHAPE_TAGS = ("sphere", "cube", "cylinder", "cone")
SIZE_TAGS = {"small": 0.24, "large": 0.40}
BACKGROUND_COLOR = (0.45, 0.42, 0.38)


class LayoutError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# data types


@dataclass
class Gaussian:
    mu: np.ndarray
    scale: np.ndarray
    rot: np.ndarray  # unit quaternion (w, x, y, z)
    opacity: float
    color: np.ndarray
    object_id: int = BACKGROUND


@dataclass
class GaussianCloud:
    """Struct-of-arrays storage for ``N`` Gaussians.

    ``object_id`` uses -1 for background Gaussians. ``referring`` holds the
    trainable per-Gaussian features; everything else is frozen geometry.
    """

    mu: np.ndarray  # (N, 3)
    scale: np.ndarray  # (N, 3)
    rot: np.ndarray  # (N, 4)
    opacity: np.ndarray  # (N,)
    color: np.ndarray  # (N, 3)
    object_id: np.ndarray  # (N,) int
    referring: np.ndarray | None = None  # (N, d_r)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1, 3)
        n = len(self.mu)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(n, 3)
        self.rot = np.asarray(self.rot, dtype=np.float64).reshape(n, 4)
        self.opacity = np.asarray(self.opacity, dtype=np.float64).reshape(n)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(n, 3)
        self.object_id = np.asarray(self.object_id, dtype=np.int64).reshape(n)
        if self.referring is None:
            self.referring = np.zeros((n, 0))
        if len(self.referring) != n:
            raise ValueError("referring feature rows must match the Gaussian count")
        if n:
            if np.any(self.scale <= 0):
                raise ValueError("Gaussian scales must be positive")
            if np.any((self.opacity < 0) | (self.opacity > 1)):
                raise ValueError("opacity must lie in [0, 1]")
            if np.any(np.abs(np.linalg.norm(self.rot, axis=1) - 1.0) > 1e-9):
                raise ValueError("rotations must be unit quaternions")

    def __len__(self) -> int:
        return len(self.mu)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.mu[i], self.scale[i], self.rot[i], float(self.opacity[i]),
                        self.color[i], int(self.object_id[i]))

    def __iter__(self) -> Iterator[Gaussian]:
        return (self[i] for i in range(len(self)))

    @classmethod
    def from_gaussians(cls, gaussians: list[Gaussian]) -> "GaussianCloud":
        if not gaussians:
            return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0),
                       np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
        return cls(
            np.array([g.mu for g in gaussians]),
            np.array([g.scale for g in gaussians]),
            np.array([g.rot for g in gaussians]),
            np.array([g.opacity for g in gaussians]),
            np.array([g.color for g in gaussians]),
            np.array([g.object_id for g in gaussians]),
        )

    def subset(self, keep: np.ndarray) -> "GaussianCloud":
        keep = np.asarray(keep)
        return GaussianCloud(self.mu[keep], self.scale[keep], self.rot[keep], self.opacity[keep],
                             self.color[keep], self.object_id[keep], self.referring[keep])

    def geometry_hash(self) -> str:
        h = hashlib.sha256()
        for a in (self.mu, self.scale, self.rot, self.opacity, self.color, self.object_id):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


@dataclass
class ObjectInfo:
    id: int
    centroid: np.ndarray
    color_tag: str
    shape_tag: str
    size_tag: str


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # world-to-camera, (3, 3)
    translation: np.ndarray  # (3,)
    split: str = "train"

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.width < 8 or self.height < 8:
            raise ValueError("camera images must be at least 8x8 pixels")
        if np.max(np.abs(self.rotation @ self.rotation.T - np.eye(3))) > 1e-9:
            raise ValueError("camera rotation must be orthonormal")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def to_camera(self, x: np.ndarray) -> np.ndarray:
        return x @ self.rotation.T + self.translation


@dataclass
class Splat2D:
    center: np.ndarray  # (2,) pixel coordinates (x, y)
    cov2d: np.ndarray  # (2, 2)
    depth: float
    source: int


@dataclass
class SceneSpec:
    n_objects: int = 8
    gaussians_per_object: int = 175
    n_background: int = 100
    bounds: float = 2.0
    min_separation: float = 1.1
    d_r: int = 16


# ----------------------------------------------------------------------------
# geometry helpers


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for quaternions ``(..., 4)`` in (w, x, y, z) order."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def covariance_3d(scale: np.ndarray, rot: np.ndarray) -> np.ndarray:
    r = quat_to_matrix(rot)
    m = r * np.asarray(scale)[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


@dataclass
class Splats:
    """Vectorised projection of a whole cloud into one camera."""

    center: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2)
    conic: np.ndarray  # (N, 3) entries (a, b, c) of the inverse covariance
    depth: np.ndarray  # (N,)
    opacity: np.ndarray  # (N,)
    valid: np.ndarray  # (N,) bool; False when culled by the near plane
    extent: np.ndarray  # (N, 2) half extents beyond which alpha < ALPHA_MIN


def project_cloud(cloud: GaussianCloud, cam: Camera) -> Splats:
    n = len(cloud)
    t = cam.to_camera(cloud.mu) if n else np.zeros((0, 3))
    z = t[:, 2]
    valid = z > NEAR_PLANE
    zs = np.where(valid, z, 1.0)
    center = np.stack([cam.fx * t[:, 0] / zs + cam.cx, cam.fy * t[:, 1] / zs + cam.cy], axis=1)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / zs
    jac[:, 0, 2] = -cam.fx * t[:, 0] / (zs * zs)
    jac[:, 1, 1] = cam.fy / zs
    jac[:, 1, 2] = -cam.fy * t[:, 1] / (zs * zs)
    sigma = covariance_3d(cloud.scale, cloud.rot) if n else np.zeros((0, 3, 3))
    tw = jac @ cam.rotation
    cov = tw @ sigma @ np.swapaxes(tw, -1, -2)
    cov[:, 0, 0] += COV_DILATION
    cov[:, 1, 1] += COV_DILATION
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        qmax = 2.0 * np.log(np.maximum(255.0 * cloud.opacity, 1e-300))
    qmax = np.maximum(qmax, 0.0)
    extent = np.stack([np.sqrt(qmax * a), np.sqrt(qmax * c)], axis=1)
    valid = valid & (255.0 * cloud.opacity >= 1.0)
    return Splats(center, cov, conic, z, cloud.opacity.copy(), valid, extent)


def project_gaussian(g: Gaussian, cam: Camera) -> Splat2D | None:
    """Project one Gaussian; ``None`` means culled by the near plane."""
    t = cam.rotation @ np.asarray(g.mu, dtype=np.float64) + cam.translation
    if t[2] <= NEAR_PLANE:
        return None
    x, y, z = t
    center = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
    jac = np.array([[cam.fx / z, 0.0, -cam.fx * x / (z * z)],
                    [0.0, cam.fy / z, -cam.fy * y / (z * z)]])
    tw = jac @ cam.rotation
    cov = tw @ covariance_3d(g.scale, g.rot) @ tw.T + COV_DILATION * np.eye(2)
    return Splat2D(center, cov, float(z), -1)


def depth_sort(depths) -> np.ndarray:
    """Stable ascending order by depth; equal depths keep source order."""
    return np.argsort(np.asarray(depths, dtype=np.float64), kind="stable")


def alpha_kernel(conic: np.ndarray, center: np.ndarray, opacity: np.ndarray, px, py) -> np.ndarray:
    """Clamped, cut-off alpha of splats at pixel coordinates (broadcasting).

    Shared by every renderer path so that their per-element arithmetic is
    identical.
    """
    dx = px - center[..., 0]
    dy = py - center[..., 1]
    q = conic[..., 0] * dx * dx + 2.0 * conic[..., 1] * dx * dy + conic[..., 2] * dy * dy
    alpha = np.minimum(opacity * np.exp(-0.5 * q), ALPHA_MAX)
    return np.where(alpha < ALPHA_MIN, 0.0, alpha)


def splat_weight(s: Splat2D, opacity: float, v) -> float:
    """Alpha contribution of a splat at pixel ``v = (x, y)``."""
    a, b, c = s.cov2d[0, 0], s.cov2d[0, 1], s.cov2d[1, 1]
    det = a * c - b * b
    conic = np.array([c / det, -b / det, a / det])
    return float(alpha_kernel(conic, np.asarray(s.center), np.float64(opacity), float(v[0]), float(v[1])))


# ----------------------------------------------------------------------------
# synthetic generators


def _random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _shape_offsets(shape: str, radius: float, n: int, rng: np.random.Generator) -> np.ndarray:
    if shape == "sphere":
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d * radius * (0.55 + 0.45 * rng.random((n, 1)))
    if shape == "cube":
        return rng.uniform(-0.8 * radius, 0.8 * radius, size=(n, 3))
    if shape == "cylinder":
        ang = rng.uniform(0, 2 * np.pi, n)
        r = 0.65 * radius * np.sqrt(rng.random(n))
        h = rng.uniform(-radius, radius, n)
        return np.stack([r * np.cos(ang), r * np.sin(ang), h], axis=1)
    if shape == "cone":
        h = 1.0 - np.sqrt(rng.random(n))  # denser at the base
        ang = rng.uniform(0, 2 * np.pi, n)
        r = 0.8 * radius * (1.0 - h) * np.sqrt(rng.random(n))
        return np.stack([r * np.cos(ang), r * np.sin(ang), (2.0 * h - 1.0) * radius], axis=1)
    raise ValueError(f"unknown shape tag {shape!r}")


def place_centroids(n: int, bounds: float, min_sep: float, rng: np.random.Generator,
                    max_tries: int = 2000) -> np.ndarray:
    pts: list[np.ndarray] = []
    for k in range(n):
        for _ in range(max_tries):
            p = rng.uniform(-bounds, bounds, size=2)
            if all(np.linalg.norm(p - q) >= min_sep for q in pts):
                pts.append(p)
                break
        else:
            raise LayoutError(
                f"cannot place object {k} of {n} with separation {min_sep} inside +/-{bounds}"
            )
    return np.array(pts)


def generate_scene(spec: SceneSpec, seed: int) -> tuple[GaussianCloud, list[ObjectInfo]]:
    """Objects are compact Gaussian clusters resting on a flat background floor.

    World frame: x to the right, y away from the canonical viewer, z up.
    """
    if spec.n_objects < 1 or spec.gaussians_per_object < 1:
        raise ValueError("object and Gaussian counts must be at least 1")
    rng = make_rng(seed, "scene")
    xy = place_centroids(spec.n_objects, spec.bounds, spec.min_separation, rng)
    colors = list(COLOR_TAGS)
    sizes = list(SIZE_TAGS)
    parts = []
    objects = []
    for k in range(spec.n_objects):
        color = colors[rng.integers(len(colors))]
        shape = SHAPE_TAGS[rng.integers(len(SHAPE_TAGS))]
        size = sizes[rng.integers(len(sizes))]
        radius = SIZE_TAGS[size]
        centroid = np.array([xy[k, 0], xy[k, 1], radius])
        n = spec.gaussians_per_object
        mu = centroid + _shape_offsets(shape, radius, n, rng)
        scale = radius * rng.uniform(0.12, 0.22, size=(n, 3))
        rot = _random_quaternions(rng, n)
        opacity = rng.uniform(0.6, 0.95, n)
        col = np.clip(np.array(COLOR_TAGS[color]) + rng.normal(0, 0.04, (n, 3)), 0, 1)
        parts.append((mu, scale, rot, opacity, col, np.full(n, k)))
        objects.append(ObjectInfo(k, mu.mean(axis=0), color, shape, size))
    nb = spec.n_background
    if nb:
        side = int(np.ceil(np.sqrt(nb)))
        g = np.linspace(-spec.bounds - 1.0, spec.bounds + 1.0, side)
        gx, gy = np.meshgrid(g, g)
        mu = np.stack([gx.ravel(), gy.ravel(), np.zeros(side * side)], axis=1)[:nb]
        mu[:, :2] += rng.uniform(-0.05, 0.05, size=(nb, 2))
        cell = (g[1] - g[0]) if side > 1 else 1.0
        scale = np.column_stack([np.full(nb, 0.45 * cell), np.full(nb, 0.45 * cell), np.full(nb, 0.01)])
        rot = np.tile([1.0, 0.0, 0.0, 0.0], (nb, 1))
        col = np.clip(np.array(BACKGROUND_COLOR) + rng.normal(0, 0.03, (nb, 3)), 0, 1)
        parts.append((mu, scale, rot, np.full(nb, 0.9), col, np.full(nb, BACKGROUND)))
    cloud = GaussianCloud(*(np.concatenate(p) for p in zip(*parts)))
    cloud.referring = np.zeros((len(cloud), spec.d_r))
    return cloud, objects


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera rotation and translation (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return rot, -rot @ eye


def novel_indices(n: int, split_ratio: float) -> list[int]:
    n_novel = n - int(np.floor(split_ratio * n + 0.5))
    return [int((k + 0.5) * n / n_novel) for k in range(n_novel)] if n_novel > 0 else []


def generate_cameras(
    n: int,
    radius: float = 6.5,
    elevation: tuple[float, float] = (25.0, 40.0),
    target=(0.0, 0.0, 0.3),
    seed: int = 0,
    jitter: float = 0.25,
    split_ratio: float = 0.8,
    width: int = 64,
    height: int = 64,
    fov_deg: float = 48.0,
) -> list[Camera]:
    """Cameras on a jittered orbit around ``target``; azimuth 0 lies on +x.

    ``jitter`` is a fraction of the nominal azimuth spacing.
    """
    if n < 2:
        raise ValueError("need at least two cameras")
    rng = make_rng(seed, "cameras")
    fx = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    fy = 0.5 * height / np.tan(np.radians(fov_deg) / 2)
    novel = set(novel_indices(n, split_ratio))
    cams = []
    for k in range(n):
        az = 360.0 * k / n + jitter * (360.0 / n) * (rng.random() - 0.5)
        lo, hi = elevation
        el = lo + (hi - lo) * rng.random()
        a, e = np.radians(az), np.radians(el)
        eye = np.asarray(target) + radius * np.array([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)])
        rot, trans = look_at(eye, target)
        cams.append(Camera(fx, fy, (width - 1) / 2, (height - 1) / 2, width, height, rot, trans,
                           "novel" if k in novel else "train"))
    return cams


def camera_azimuth(cam: Camera, target=(0.0, 0.0, 0.3)) -> float:
    eye = -cam.rotation.T @ cam.translation
    d = eye - np.asarray(target)
    return float(np.degrees(np.arctan2(d[1], d[0])) % 360.0)


# ----------------------------------------------------------------------------
# scene file


def scene_to_dict(cloud: GaussianCloud, objects: list[ObjectInfo], cameras: list[Camera]) -> dict:
    return {
        "version": SCENE_FILE_VERSION,
        "gaussians": [
            {"mu": cloud.mu[i], "scale": cloud.scale[i], "rot": cloud.rot[i], "opacity": cloud.opacity[i],
             "color": cloud.color[i],
             "object_id": "background" if cloud.object_id[i] == BACKGROUND else int(cloud.object_id[i])}
            for i in range(len(cloud))
        ],
        "objects": [
            {"id": o.id, "centroid": o.centroid, "color_tag": o.color_tag, "shape_tag": o.shape_tag,
             "size_tag": o.size_tag}
            for o in objects
        ],
        "cameras": [
            {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "width": c.width, "height": c.height,
             "rotation": c.rotation, "translation": c.translation, "split": c.split}
            for c in cameras
        ],
    }


def scene_from_dict(d: dict) -> tuple[GaussianCloud, list[ObjectInfo], list[Camera]]:
    if d.get("version") != SCENE_FILE_VERSION:
        raise ValueError(f"unsupported scene file version {d.get('version')!r}")
    gs = [
        Gaussian(np.array(g["mu"]), np.array(g["scale"]), np.array(g["rot"]), g["opacity"], np.array(g["color"]),
                 BACKGROUND if g["object_id"] == "background" else int(g["object_id"]))
        for g in d["gaussians"]
    ]
    objects = [ObjectInfo(o["id"], np.array(o["centroid"]), o["color_tag"], o["shape_tag"], o["size_tag"])
               for o in d["objects"]]
    cams = [Camera(c["fx"], c["fy"], c["cx"], c["cy"], c["width"], c["height"], np.array(c["rotation"]),
                   np.array(c["translation"]), c.get("split", "train")) for c in d["cameras"]]
    return GaussianCloud.from_gaussians(gs), objects, cams


def save_scene(path, cloud, objects, cameras) -> None:
    jsonio.dump(scene_to_dict(cloud, objects, cameras), path)


def load_scene(path):
    return scene_from_dict(jsonio.load(path))
