"""Metrics and experiment harness: mIoU on novel views, occlusion probes and
the ablation grid."""
from __future__ import annotations

import copy
import statistics
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .pseudomask import iou
from .rasterizer import render_object_mask, render_response
from .referfield import interact
from .scene import Camera, look_at
from .trainer import TrainConfig, TrainContext, TrainState, train, train_two_stage
from .text import Expression, embed_tokens


@dataclass
class EvalReport:
    rows: list[dict]  # {expression, view, iou, tokens, target_object}
    per_expression: dict[int, float]
    miou: float
    config_hash: str = ""
    seeds: list[int] = field(default_factory=list)

    @property
    def per_scene(self) -> dict[str, float]:
        return {"scene": self.miou}

    def to_dict(self) -> dict:
        return {"rows": self.rows, "per_expression": {str(k): v for k, v in self.per_expression.items()},
                "per_scene": self.per_scene, "miou": self.miou, "config_hash": self.config_hash,
                "seeds": self.seeds}


def predict_mask(state: TrainState, cloud, words: np.ndarray, cam: Camera, threshold: float = 0.0,
                 referring: np.ndarray | None = None) -> np.ndarray:
    referring = state.referring if referring is None else referring
    out = interact(state.model, referring, words, cloud.mu, pcmi=state.config.pcmi,
                   similarity=state.config.similarity)
    return render_response(cloud, out.responses, cam).values > threshold


def evaluate(state: TrainState, ds: Dataset, views: list[int] | None = None,
             expressions: list[int] | None = None, threshold: float = 0.0) -> EvalReport:
    """IoU of thresholded responses against rendered object masks."""
    views = ds.novel_views if views is None else views
    expressions = ds.expression_ids("test") if expressions is None else expressions
    rows = []
    for e in expressions:
        expr = ds.expressions[e]
        words = embed_tokens(expr, ds.vocab)
        out = interact(state.model, state.referring, words, ds.cloud.mu, pcmi=state.config.pcmi,
                       similarity=state.config.similarity)
        for v in views:
            pred = render_response(ds.cloud, out.responses, ds.cameras[v]).values > threshold
            rows.append({"expression": e, "view": v, "iou": iou(pred, ds.gt_mask(v, expr.target_object)),
                         "tokens": " ".join(expr.tokens), "target_object": expr.target_object})
    per_expr = {e: float(np.mean([r["iou"] for r in rows if r["expression"] == e])) for e in expressions}
    miou = float(np.mean(list(per_expr.values()))) if per_expr else 0.0
    return EvalReport(rows, per_expr, miou, state.config.config_hash(), [state.config.seed])


def oracle_state(state: TrainState, ds: Dataset, magnitude: float = 20.0):
    """Per-expression responses of +magnitude on the target's Gaussians, -magnitude elsewhere."""
    def responses(expr: Expression) -> np.ndarray:
        return np.where(ds.cloud.object_id == expr.target_object, magnitude, -magnitude)
    return responses


def evaluate_responses(ds: Dataset, responses_fn, views=None, expressions=None) -> float:
    views = ds.novel_views if views is None else views
    expressions = ds.expression_ids("test") if expressions is None else expressions
    scores = []
    for e in expressions:
        expr = ds.expressions[e]
        m = responses_fn(expr)
        scores.append(np.mean([iou(render_response(ds.cloud, m, ds.cameras[v]).values > 0,
                                   ds.gt_mask(v, expr.target_object)) for v in views]))
    return float(np.mean(scores))


# ----------------------------------------------------------------------------
# occlusion probe


@dataclass
class OcclusionReport:
    target_object: int
    blocker_object: int
    view: int
    gt_empty: bool
    predicted_fraction: float  # predicted positive area / image area
    outside_fraction: float  # share of predicted positives outside GT coverage
    respects_occlusion: bool
    iou_blocked: float  # vs occlusion-aware GT (empty)
    iou_blocked_vs_unblocked_gt: float  # vs the target's mask once the blocker is gone
    iou_unblocked: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def probe_camera(ds: Dataset, target: int, blocker: int, template: Camera, distance: float = 6.5,
                 height: float = 1.2) -> Camera:
    """Camera on the line through target and blocker centroids, blocker in front."""
    t = ds.objects[target].centroid
    b = ds.objects[blocker].centroid
    d = b[:2] - t[:2]
    d /= np.linalg.norm(d)
    eye = np.array([t[0] + d[0] * distance, t[1] + d[1] * distance, height])
    rot, trans = look_at(eye, t)
    return Camera(template.fx, template.fy, template.cx, template.cy, template.width, template.height, rot,
                  trans, "novel")


def occlusion_probe(state: TrainState, ds: Dataset, target: int, blocker: int, view: Camera | int,
                    expression: int | None = None) -> OcclusionReport:
    """Evaluate the target's expression in a view where ``blocker`` hides it."""
    cam = ds.cameras[view] if isinstance(view, int) else view
    if expression is None:
        cands = [i for i, e in enumerate(ds.expressions) if e.target_object == target and e.split == "test"]
        expression = cands[0]
    words = embed_tokens(ds.expressions[expression], ds.vocab)
    gt = render_object_mask(ds.cloud, target, cam)
    pred = predict_mask(state, ds.cloud, words, cam)
    keep = ds.cloud.object_id != blocker
    open_cloud = ds.cloud.subset(keep)
    gt_open = render_object_mask(open_cloud, target, cam)
    pred_open = predict_mask(state, open_cloud, words, cam, referring=state.referring[keep])
    cov = render_response(ds.cloud, (ds.cloud.object_id == target).astype(float), cam).values
    n_pred = int(pred.sum())
    outside = float(np.count_nonzero(pred & (cov < 0.5)) / n_pred) if n_pred else 0.0
    return OcclusionReport(target, blocker, -1 if not isinstance(view, int) else view, not gt.any(),
                           n_pred / pred.size, outside, outside < 0.2, iou(pred, gt), iou(pred, gt_open),
                           iou(pred_open, gt_open))


def find_occlusion(ds: Dataset, template: Camera, min_visible: int = 20):
    """First (target, blocker, camera) where the blocker fully hides the target."""
    for t in ds.objects:
        for b in ds.objects:
            if b.id == t.id or b.size_tag != "large" or t.size_tag != "small":
                continue
            cam = probe_camera(ds, t.id, b.id, template)
            if render_object_mask(ds.cloud, t.id, cam).any():
                continue
            open_cloud = ds.cloud.subset(ds.cloud.object_id != b.id)
            if render_object_mask(open_cloud, t.id, cam).sum() >= min_visible:
                return t.id, b.id, cam
    return None


# ----------------------------------------------------------------------------
# ablation grid

METHOD_ROWS = ("baseline", "+pcmi", "+gtcl", "full", "two-stage")
DR_SWEEP = (1, 4, 16, 32)


def method_config(base: TrainConfig, row: str, **over) -> TrainConfig:
    c = copy.deepcopy(base)
    c.pcmi = row in ("+pcmi", "full", "two-stage")
    c.gtcl = row in ("+gtcl", "full", "two-stage")
    for k, v in over.items():
        setattr(c, k, v)
    return c


def grid_cells(mode: str = "standard") -> list[tuple[str, str, int]]:
    """(method row, similarity, d_r) cells.

    ``standard`` keeps the grid small: method rows at the defaults, the
    similarity comparison on the baseline row and the d_r sweep on the full
    model. ``factorial`` runs the complete cross product.
    """
    if mode == "factorial":
        return [(r, s, d) for r in METHOD_ROWS for s in ("multiplication", "cosine") for d in DR_SWEEP]
    cells = [(r, "multiplication", 16) for r in METHOD_ROWS]
    cells.append(("baseline", "cosine", 16))
    cells += [("full", "multiplication", d) for d in DR_SWEEP if d != 16]
    return cells


def run_cell(ds: Dataset, base: TrainConfig, cell, seed: int, ctx: TrainContext | None = None) -> float:
    row, sim, d_r = cell
    cfg = method_config(base, row, similarity=sim, d_r=d_r, seed=seed)
    if row == "two-stage":
        state, _, _ = train_two_stage(ds, cfg, ctx=ctx)
    else:
        state = train(ds, cfg, ctx=ctx)
    return evaluate(state, ds).miou


def ablation_grid(ds: Dataset, base: TrainConfig, seeds, mode: str = "standard", progress=None) -> list[dict]:
    """Median mIoU over ``seeds`` for every grid cell."""
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ValueError("ablation grid needs at least 3 seeds")
    ctx = TrainContext(ds)
    table = []
    for cell in grid_cells(mode):
        scores = []
        for s in seeds:
            scores.append(run_cell(ds, base, cell, s, ctx))
            if progress:
                progress(cell, s, scores[-1])
        table.append({"method": cell[0], "similarity": cell[1], "d_r": cell[2], "seeds": seeds,
                      "miou": scores, "median_miou": statistics.median(scores)})
    return table


def grid_lookup(table: list[dict], method: str, similarity: str = "multiplication", d_r: int = 16) -> float:
    for row in table:
        if (row["method"], row["similarity"], row["d_r"]) == (method, similarity, d_r):
            return row["median_miou"]
    raise KeyError((method, similarity, d_r))


def grid_csv(table: list[dict]) -> str:
    lines = ["method,similarity,d_r,median_miou," + ",".join(f"seed{s}" for s in table[0]["seeds"])]
    for r in table:
        lines.append(f"{r['method']},{r['similarity']},{r['d_r']},{r['median_miou']:.6f},"
                     + ",".join(f"{x:.6f}" for x in r["miou"]))
    return "\n".join(lines) + "\n"
