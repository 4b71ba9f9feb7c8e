"""Small hand-built scenes shared by the tests."""
import numpy as np

from refgs.numkit import make_rng
from refgs.scene import Camera, GaussianCloud


def axis_camera(size: int = 8, f: float = 8.0) -> Camera:
    """Camera at the origin looking down +z; pixel centers at integer coordinates."""
    return Camera(f, f, (size - 1) / 2, (size - 1) / 2, size, size, np.eye(3), np.zeros(3))


def cloud_from(mu, scale=0.1, opacity=0.8, color=None, object_id=None, rot=None) -> GaussianCloud:
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    n = len(mu)
    scale = np.broadcast_to(np.asarray(scale, dtype=float), (n, 3)) if np.ndim(scale) < 2 else scale
    rot = np.tile([1.0, 0, 0, 0], (n, 1)) if rot is None else rot
    color = np.full((n, 3), 0.5) if color is None else color
    object_id = np.zeros(n, dtype=int) if object_id is None else object_id
    return GaussianCloud(mu, scale, rot, np.broadcast_to(opacity, (n,)), color, object_id)


def random_cloud(seed: int, n: int = 10, n_objects: int = 3, depth=(2.0, 6.0), spread: float = 0.6) -> GaussianCloud:
    """Gaussians in front of ``axis_camera`` with random shapes, rotations and opacities."""
    rng = make_rng(seed, "test-cloud")
    z = rng.uniform(*depth, n)
    xy = rng.uniform(-spread, spread, (n, 2)) * z[:, None] / 4
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    oid = rng.integers(-1, n_objects, n)
    return GaussianCloud(np.column_stack([xy, z]), rng.uniform(0.05, 0.35, (n, 3)), q, rng.uniform(0.2, 1.0, n),
                         rng.random((n, 3)), oid)


def tiny_config():
    """A dataset small enough to train for a few hundred steps in a unit test."""
    from refgs.dataset import CameraSpec, DatasetConfig
    from refgs.scene import SceneSpec
    return DatasetConfig(scene=SceneSpec(n_objects=3, gaussians_per_object=30, n_background=6),
                         cameras=CameraSpec(n=6, width=24, height=24, split_ratio=0.67))


_TINY = {}


def tiny_dataset(seed: int = 0):
    """Cached; callers must not mutate the returned dataset."""
    from refgs.dataset import build_dataset
    if seed not in _TINY:
        _TINY[seed] = build_dataset(tiny_config(), seed)
    return _TINY[seed]
