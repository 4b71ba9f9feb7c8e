"""Training loop for the referring field: one (view, expression) pair per step."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import jsonio
from .dataset import Dataset, save_masks
from .numkit import AdamState, AffineLayer, Mlp, NumericalError, adam_step, make_rng
from .rasterizer import WeightOperator
from .referfield import SIMILARITIES, ContrastiveContext, LossBreakdown, ReferModel, TrainHyper, interact, \
    objective, tau_schedule
from .text import embed_tokens

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    hyper: TrainHyper = field(default_factory=TrainHyper)
    seed: int = 0
    pcmi: bool = True
    gtcl: bool = True
    similarity: str = "multiplication"
    d_r: int = 16
    dim: int = 128
    stage: int = 1
    init_std: float = 0.01

    def __post_init__(self):
        if isinstance(self.hyper, dict):
            self.hyper = TrainHyper(**self.hyper)
        if self.hyper.iterations < 0:
            raise ValueError("iteration budget must be >= 0")
        if self.similarity not in SIMILARITIES:
            raise ValueError(f"similarity must be one of {SIMILARITIES}")
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return jsonio.content_hash(self.to_dict())

    @property
    def label(self) -> str:
        if self.pcmi and self.gtcl:
            return "full"
        if self.pcmi:
            return "+pcmi"
        if self.gtcl:
            return "+gtcl"
        return "baseline"


@dataclass
class TrainState:
    model: ReferModel
    referring: np.ndarray
    adam: AdamState
    config: TrainConfig
    iteration: int = 0
    trace: list[dict] = field(default_factory=list)
    geometry_hash: str = ""
    meta: dict = field(default_factory=dict)  # provenance hashes of the training data

    def params(self) -> dict[str, np.ndarray]:
        return {**self.model.params(), "referring": self.referring}

    def learning_rates(self) -> dict[str, float]:
        h = self.config.hyper
        return {k: (h.lr_referring if k == "referring" else h.lr_layers) for k in self.params()}


class TrainContext:
    """Per-dataset caches: view weight operators, word matrices, contrastive sets."""

    def __init__(self, ds: Dataset):
        self.ds = ds
        self._ops: dict[int, WeightOperator] = {}
        self.words = {i: embed_tokens(e, ds.vocab) for i, e in enumerate(ds.expressions)}
        self.train_ids = ds.expression_ids("train")

    def operator(self, view: int) -> WeightOperator:
        if view not in self._ops:
            self._ops[view] = WeightOperator(self.ds.cloud, self.ds.cameras[view])
        return self._ops[view]

    def contrastive(self, anchor: int, tau: float, lam: float) -> ContrastiveContext:
        target = self.ds.expressions[anchor].target_object
        pos = [anchor] + [i for i in self.train_ids if i != anchor and self.ds.expressions[i].target_object == target]
        neg = [i for i in self.train_ids if self.ds.expressions[i].target_object != target]
        return ContrastiveContext([self.words[i] for i in pos], [self.words[i] for i in neg], tau, lam)


def init(cloud, config: TrainConfig) -> TrainState:
    rng = make_rng(config.seed, "init")
    model = ReferModel.init(rng, d_r=config.d_r, dim=config.dim)
    referring = rng.normal(0.0, config.init_std, size=(len(cloud), config.d_r))
    return TrainState(model, referring, AdamState(), config, geometry_hash=cloud.geometry_hash())


def train_step(state: TrainState, ctx: TrainContext, view: int, expr: int, target: np.ndarray) -> LossBreakdown:
    cfg = state.config
    op = ctx.operator(view)
    if target.shape != op.shape:
        raise ValueError(f"pseudo mask shape {target.shape} does not match view {op.shape}")
    con_ctx = None
    if cfg.gtcl:
        h = cfg.hyper
        tau = tau_schedule(state.iteration, h.tau0, h.tau_base, h.tau_period)
        con_ctx = ctx.contrastive(expr, tau, h.lam)
    sample = f"view={view} expr={expr} tokens={ctx.ds.expressions[expr].tokens}"
    try:
        lb, grads, g_ref = objective(state.model, state.referring, ctx.ds.cloud.mu, ctx.words[expr], op, target,
                                     pcmi=cfg.pcmi, similarity=cfg.similarity, contrastive=con_ctx)
    except NumericalError as e:
        raise NumericalError(f"{e} at iteration {state.iteration}: {sample}") from e
    if not np.isfinite(lb.total):
        raise NumericalError(f"non-finite loss at iteration {state.iteration}: {sample} bce={lb.bce} con={lb.con}")
    grads["referring"] = g_ref
    adam_step(state.adam, state.params(), grads, state.learning_rates())
    state.trace.append({"iter": state.iteration, "bce": lb.bce, "con": lb.con, "total": lb.total,
                        "tau": lb.tau if lb.tau is not None else 0.0})
    state.iteration += 1
    return lb


def train(ds: Dataset, config: TrainConfig, *, ctx: TrainContext | None = None,
          iterations: int | None = None) -> TrainState:
    """Uniformly sample (train view, train expression) pairs for the budget."""
    ctx = ctx or TrainContext(ds)
    state = init(ds.cloud, config)
    pairs = ds.training_pairs()
    if not pairs:
        raise ValueError("dataset has no pseudo masks to train on")
    rng = make_rng(config.seed, f"sampling/stage{config.stage}")
    budget = config.hyper.iterations if iterations is None else iterations
    for _ in range(budget):
        v, e = pairs[int(rng.integers(len(pairs)))]
        train_step(state, ctx, v, e, ds.pseudo[(v, e)])
    if ds.cloud.geometry_hash() != state.geometry_hash:
        raise RuntimeError("frozen geometry changed during training")
    return state


def predict(state: TrainState, ctx: TrainContext, view: int, expr: int) -> np.ndarray:
    out = interact(state.model, state.referring, ctx.words[expr], ctx.ds.cloud.mu,
                   pcmi=state.config.pcmi, similarity=state.config.similarity)
    return ctx.operator(view).forward(out.responses) > 0.0


def refine_masks(state: TrainState, ds: Dataset, ctx: TrainContext | None = None) -> dict:
    """Stage-1 renderings (M > 0) for every training pair."""
    ctx = ctx or TrainContext(ds)
    return {(v, e): predict(state, ctx, v, e) for (v, e) in ds.training_pairs()}


def train_two_stage(ds: Dataset, config: TrainConfig, *, out_dir=None, ctx: TrainContext | None = None):
    """Stage 1 on pseudo masks, stage 2 (fresh init) on stage-1 renderings.

    Returns ``(stage2_state, refined_masks, stage1_state)``.
    """
    ctx = ctx or TrainContext(ds)
    s1 = train(ds, replace_stage(config, 1), ctx=ctx)
    refined = refine_masks(s1, ds, ctx)
    if out_dir is not None:
        save_masks(refined, Path(out_dir) / "refined", comment=f"config_hash={config.config_hash()}")
    ds2 = copy.copy(ds)
    ds2.pseudo = refined
    s2 = train(ds2, replace_stage(config, 2), ctx=ctx)
    return s2, refined, s1


def replace_stage(config: TrainConfig, stage: int) -> TrainConfig:
    c = copy.deepcopy(config)
    c.stage = stage
    return c


# ----------------------------------------------------------------------------
# checkpoints


def _layer(layer: AffineLayer) -> dict:
    return {"weight": layer.weight, "bias": layer.bias}


def checkpoint_dict(state: TrainState) -> dict:
    m = state.model
    return {
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "config_hash": state.config.config_hash(),
        "iteration": state.iteration,
        "geometry_hash": state.geometry_hash,
        "meta": state.meta,
        "d_r": m.d_r,
        "dim": m.dim,
        "refer_proj": _layer(m.refer_proj),
        "word_proj": _layer(m.word_proj),
        "pos_mlp": {"hidden": _layer(m.pos_mlp.hidden), "output": _layer(m.pos_mlp.output)},
        "referring": state.referring,
    }


def save_checkpoint(state: TrainState, path) -> None:
    jsonio.dump(checkpoint_dict(state), path)


def load_checkpoint(path) -> TrainState:
    d = jsonio.load(path)
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
    config = TrainConfig(**d["config"])
    if config.config_hash() != d["config_hash"]:
        raise ValueError("checkpoint config hash does not match its embedded config")

    def lay(x):
        return AffineLayer(np.array(x["weight"]), np.array(x["bias"]))

    model = ReferModel(lay(d["refer_proj"]), lay(d["word_proj"]),
                       Mlp(lay(d["pos_mlp"]["hidden"]), lay(d["pos_mlp"]["output"])))
    return TrainState(model, np.array(d["referring"]).reshape(-1, d["d_r"]), AdamState(), config,
                      iteration=d["iteration"], geometry_hash=d["geometry_hash"], meta=d.get("meta", {}))


def save_trace(state: TrainState, path) -> None:
    with open(path, "w") as f:
        for row in state.trace:
            f.write(jsonio.dumps(row) + "\n")


def load_trace(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
