"""Front-to-back alpha compositing of colors and per-Gaussian scalars.

The production path works on 16x16 tiles. Inside a tile every Gaussian whose
cut-off ellipse touches the tile is evaluated densely, transmittance is an
exclusive running product along the depth order and the composite is a running
sum, both computed with ``np.*.accumulate`` so the arithmetic is performed in
exactly the order of the per-pixel reference loop (``reference_render``).
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .scene import BACKGROUND, Camera, GaussianCloud, Splats, alpha_kernel, depth_sort, project_cloud

TILE = 16
T_MIN = 1e-4


@dataclass
class ResponseMap:
    values: np.ndarray  # (H, W) composited response M(v)
    coverage: np.ndarray  # (H, W) accumulated weight sum_i w_i(v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def to_mask(self, threshold: float = 0.0) -> np.ndarray:
        return self.values > threshold


@dataclass
class _Prepared:
    splats: Splats
    order: np.ndarray  # depth-sorted indices of valid splats
    lo: np.ndarray  # (n_sorted, 2) bbox min (x, y)
    hi: np.ndarray  # (n_sorted, 2) bbox max


def _prepare(cloud: GaussianCloud, cam: Camera) -> _Prepared:
    s = project_cloud(cloud, cam)
    valid = np.flatnonzero(s.valid)
    order = valid[depth_sort(s.depth[valid])]
    c = s.center[order]
    e = s.extent[order] + 1.0
    return _Prepared(s, order, c - e, c + e)


def _tiles(cam: Camera, tile: int):
    for y0 in range(0, cam.height, tile):
        for x0 in range(0, cam.width, tile):
            yield y0, min(y0 + tile, cam.height), x0, min(x0 + tile, cam.width)


def _tile_weights(prep: _Prepared, bounds, early_termination: bool):
    """Compositing weights for one tile: ``(gaussian indices, (n, P) weights)``."""
    y0, y1, x0, x1 = bounds
    hit = (prep.hi[:, 0] >= x0) & (prep.lo[:, 0] <= x1 - 1) & (prep.hi[:, 1] >= y0) & (prep.lo[:, 1] <= y1 - 1)
    idx = prep.order[hit]
    py, px = np.mgrid[y0:y1, x0:x1]
    px = px.ravel().astype(np.float64)
    py = py.ravel().astype(np.float64)
    if len(idx) == 0:
        return idx, np.zeros((0, len(px)))
    s = prep.splats
    alpha = alpha_kernel(s.conic[idx][:, None, :], s.center[idx][:, None, :], s.opacity[idx][:, None], px, py)
    trans = np.empty_like(alpha)
    trans[0] = 1.0
    if len(idx) > 1:
        np.multiply.accumulate(1.0 - alpha[:-1], axis=0, out=trans[1:])
    w = alpha * trans
    if early_termination:
        w[trans < T_MIN] = 0.0
    return idx, w


def _composite(values: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Sequential sum over the depth axis of ``values[:, None, ...] * w``."""
    if len(w) == 0:
        return np.zeros(w.shape[1:] + values.shape[1:])
    terms = values.reshape(values.shape[0], 1, -1) * w[:, :, None]
    return np.add.accumulate(terms, axis=0)[-1]


def _map_tiles(fn, cam: Camera, tile: int, workers: int):
    tiles = list(_tiles(cam, tile))
    if workers <= 1:
        return tiles, [fn(t) for t in tiles]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return tiles, list(pool.map(fn, tiles))


def _render_channels(cloud, values: np.ndarray, cam: Camera, early_termination: bool, workers: int, tile: int):
    """Composite ``values`` (N, C) and coverage; returns ``(H, W, C)``, ``(H, W)``."""
    prep = _prepare(cloud, cam)
    c = values.shape[1]

    def work(b):
        idx, w = _tile_weights(prep, b, early_termination)
        stacked = np.concatenate([values[idx], np.ones((len(idx), 1))], axis=1)
        return _composite(stacked, w)

    tiles, results = _map_tiles(work, cam, tile, workers)
    out = np.zeros((cam.height, cam.width, c + 1))
    for (y0, y1, x0, x1), r in zip(tiles, results):
        out[y0:y1, x0:x1] = r.reshape(y1 - y0, x1 - x0, c + 1)
    return out[..., :c], out[..., c]


def render_color(cloud: GaussianCloud, cam: Camera, *, early_termination: bool = True,
                 workers: int = 1, tile: int = TILE) -> np.ndarray:
    rgb, _ = _render_channels(cloud, cloud.color, cam, early_termination, workers, tile)
    return rgb


def render_response(cloud: GaussianCloud, responses, cam: Camera, *, early_termination: bool = True,
                    workers: int = 1, tile: int = TILE) -> ResponseMap:
    m = np.asarray(responses, dtype=np.float64)
    if m.shape != (len(cloud),):
        raise ValueError(f"expected {len(cloud)} responses, got shape {m.shape}")
    vals, cov = _render_channels(cloud, m[:, None], cam, early_termination, workers, tile)
    return ResponseMap(vals[..., 0], cov)


def render_object_mask(cloud: GaussianCloud, object_id: int, cam: Camera, threshold: float = 0.5,
                       **kw) -> np.ndarray:
    if object_id != BACKGROUND and not np.any(cloud.object_id == object_id):
        raise KeyError(f"unknown object id {object_id}")
    ind = (cloud.object_id == object_id).astype(np.float64)
    return render_response(cloud, ind, cam, **kw).values > threshold


def backward_response(cloud: GaussianCloud, cam: Camera, upstream, *, early_termination: bool = True,
                      workers: int = 1, tile: int = TILE) -> np.ndarray:
    """dL/dm_i = sum_v dL/dM(v) w_i(v) with the forward pass's weights.

    Per-tile partial sums are merged in tile order, so the result does not
    depend on ``workers``.
    """
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != cam.shape:
        raise ValueError(f"upstream gradient shape {up.shape} does not match camera {cam.shape}")
    prep = _prepare(cloud, cam)

    def work(b):
        y0, y1, x0, x1 = b
        idx, w = _tile_weights(prep, b, early_termination)
        return idx, w @ up[y0:y1, x0:x1].ravel()

    _, results = _map_tiles(work, cam, tile, workers)
    grad = np.zeros(len(cloud))
    for idx, part in results:
        grad[idx] += part
    return grad


class WeightOperator:
    """Sparse (pixels x Gaussians) matrix of compositing weights for one view.

    Geometry is frozen while the referring field trains, so the weights of a
    view never change; caching them turns rendering into ``W @ m`` and the
    backward pass into ``W.T @ g``.
    """

    def __init__(self, cloud: GaussianCloud, cam: Camera, *, early_termination: bool = True, tile: int = TILE):
        prep = _prepare(cloud, cam)
        rows, cols, data = [], [], []
        for b in _tiles(cam, tile):
            y0, y1, x0, x1 = b
            idx, w = _tile_weights(prep, b, early_termination)
            gi, pi = np.nonzero(w)
            py, px = np.divmod(pi, x1 - x0)
            rows.append((py + y0) * cam.width + px + x0)
            cols.append(idx[gi])
            data.append(w[gi, pi])
        self.shape = cam.shape
        self.n = len(cloud)
        self.matrix = sp.csr_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(cam.height * cam.width, len(cloud)),
        )
        self.matrix_t = self.matrix.T.tocsr()
        self.coverage = np.asarray(self.matrix.sum(axis=1)).reshape(self.shape)

    def forward(self, m: np.ndarray) -> np.ndarray:
        return (self.matrix @ m).reshape(self.shape)

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        return self.matrix_t @ upstream.ravel()


def reference_render(cloud: GaussianCloud, values, cam: Camera, *, early_termination: bool = True):
    """Per-pixel loop oracle for ``render_response``/``render_color``.

    ``values`` is (N,) or (N, C). Returns ``(composite, coverage)``.
    """
    vals = np.asarray(values, dtype=np.float64)
    scalar = vals.ndim == 1
    vals = vals.reshape(len(cloud), -1)
    s = project_cloud(cloud, cam)
    valid = np.flatnonzero(s.valid)
    order = valid[depth_sort(s.depth[valid])]
    out = np.zeros((cam.height, cam.width, vals.shape[1]))
    cov = np.zeros((cam.height, cam.width))
    for y in range(cam.height):
        for x in range(cam.width):
            alphas = alpha_kernel(s.conic[order], s.center[order], s.opacity[order], float(x), float(y))
            t = 1.0
            acc = [0.0] * vals.shape[1]
            wsum = 0.0
            for k, i in enumerate(order):
                if early_termination and t < T_MIN:
                    break
                a = float(alphas[k])
                if a == 0.0:
                    continue
                w = a * t
                for ch in range(vals.shape[1]):
                    acc[ch] = acc[ch] + float(vals[i, ch]) * w
                wsum = wsum + 1.0 * w
                t = t * (1.0 - a)
            out[y, x] = acc
            cov[y, x] = wsum
    return (out[..., 0] if scalar else out), cov
