"""Finite-difference verification of the full training objective.

The instance is a tiny scene (5 Gaussians, one 8x8 view, a 3-word
expression, two positive and two negative sentences) with the default model
widths. The target mask is the sign of the model's own response, i.e. the
regime a partially trained model is in; this keeps the loss well below 1 so
that its floating-point quantum does not dominate the central differences of
very small gradient entries.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .numkit import GradCheckReport, grad_check, make_rng
from .rasterizer import WeightOperator
from .referfield import ContrastiveContext, ReferModel, interact, objective, objective_value
from .scene import Camera, GaussianCloud, look_at
from .text import D_TEXT

KINK_SAFETY = 2.0


@dataclass
class GradCheckInstance:
    model: ReferModel
    referring: np.ndarray
    cloud: GaussianCloud
    camera: Camera
    operator: WeightOperator
    words: np.ndarray
    target: np.ndarray
    contrastive: ContrastiveContext
    pcmi: bool
    similarity: str

    def params(self) -> dict[str, np.ndarray]:
        return {**self.model.params(), "referring": self.referring}

    def loss_fn(self, params):
        lb, grads, g_ref = objective(self.model, params["referring"], self.cloud.mu, self.words, self.operator,
                                     self.target, pcmi=self.pcmi, similarity=self.similarity,
                                     contrastive=self.contrastive)
        return lb.total, {**grads, "referring": g_ref}

    def value_fn(self, params) -> float:
        return objective_value(self.model, params["referring"], self.cloud.mu, self.words, self.operator,
                               self.target, pcmi=self.pcmi, similarity=self.similarity,
                               contrastive=self.contrastive)


def _kink_free(model: ReferModel, mu: np.ndarray, h: float) -> bool:
    """True when no single +-h perturbation can flip a hidden rectifier."""
    pre = model.pos_mlp.hidden.forward(mu)
    reach = h * max(1.0, float(np.abs(mu).max()))
    return bool(np.min(np.abs(pre)) > KINK_SAFETY * reach)


def build_instance(seed: int = 0, *, n_gaussians: int = 5, n_words: int = 3, size: int = 8, d_r: int = 16,
                   dim: int = 128, pcmi: bool = True, similarity: str = "multiplication", lam: float = 0.02,
                   tau: float = 0.4, h: float = 1e-4, referring_scale: float = 4.0,
                   max_tries: int = 100) -> GradCheckInstance:
    rng = make_rng(seed, "gradcheck")
    n = n_gaussians
    for _ in range(max_tries):
        mu = rng.uniform(-0.6, 0.6, (n, 3)) * np.array([1.0, 1.0, 0.3])
        model = ReferModel.init(rng, d_r=d_r, dim=dim)
        if not pcmi or _kink_free(model, mu, h):
            break
    else:
        raise RuntimeError("could not draw a kink-free instance")
    cloud = GaussianCloud(mu, rng.uniform(0.6, 1.0, (n, 3)), np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
                          rng.uniform(0.7, 0.95, n), rng.random((n, 3)), np.arange(n))
    rot, trans = look_at([0.0, 0.0, -3.0], [0.0, 0.0, 0.0], up=(0.0, 1.0, 0.0))
    c = (size - 1) / 2
    cam = Camera(size, size, c, c, size, size, rot, trans)
    op = WeightOperator(cloud, cam, early_termination=False)
    table = rng.uniform(-1.0, 1.0, (12, D_TEXT)) / np.sqrt(D_TEXT)
    words = table[:n_words]
    ctx = ContrastiveContext([words, table[[3, 4, 5]]], [table[[6, 7]], table[[8, 9, 10, 11]]], tau, lam)
    referring = rng.normal(0.0, referring_scale, (n, d_r))
    out = interact(model, referring, words, mu, pcmi=pcmi, similarity=similarity)
    target = op.forward(out.responses) > 0.0
    return GradCheckInstance(model, referring, cloud, cam, op, words, target, ctx, pcmi, similarity)


def run(seed: int = 0, h: float = 1e-4, tol: float = 1e-4, **kw) -> tuple[GradCheckReport, float]:
    """Grad-check every trainable group; returns the report and elapsed seconds."""
    t0 = time.perf_counter()
    inst = build_instance(seed, h=h, **kw)
    report = grad_check(inst.loss_fn, inst.params(), h=h, tol=tol, value_fn=inst.value_fn)
    return report, time.perf_counter() - t0
