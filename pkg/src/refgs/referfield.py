"""Referring field: feature projection, position-aware cross-modal interaction,
Gaussian-language similarity, BCE on rendered responses and Gaussian-text
contrastive learning, each with a hand-written backward pass.

Shapes: ``N`` Gaussians, ``L`` words, ``D`` shared feature width, ``d_r``
referring width, ``D_text`` toy embedding width.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numkit import AffineLayer, Mlp, NumericalError, l2_normalize, l2_normalize_backward, softmax, softmax_backward
from .text import D_TEXT

SIMILARITIES = ("multiplication", "cosine")
LOGIT_CLIP = float(np.log((1.0 - 1e-7) / 1e-7))


@dataclass
class ReferModel:
    refer_proj: AffineLayer  # d_r -> D
    word_proj: AffineLayer  # D_text -> D
    pos_mlp: Mlp  # 3 -> D

    def __post_init__(self):
        d = self.dim
        if self.word_proj.n_out != d or self.pos_mlp.output.n_out != d or self.pos_mlp.hidden.n_in != 3:
            raise ValueError("inconsistent model dimensions")

    @property
    def d_r(self) -> int:
        return self.refer_proj.n_in

    @property
    def dim(self) -> int:
        return self.refer_proj.n_out

    @classmethod
    def init(cls, rng: np.random.Generator, d_r: int = 16, dim: int = 128, d_text: int = D_TEXT,
             hidden: int | None = None) -> "ReferModel":
        hidden = hidden or dim
        return cls(AffineLayer.glorot(d_r, dim, rng), AffineLayer.glorot(d_text, dim, rng),
                   Mlp.glorot(3, hidden, dim, rng))

    def params(self) -> dict[str, np.ndarray]:
        return {**self.refer_proj.params("refer_proj"), **self.word_proj.params("word_proj"),
                **self.pos_mlp.params("pos_mlp")}


@dataclass
class TrainHyper:
    lam: float = 0.02
    eps: float = 0.3
    tau0: float = 0.1
    tau_base: float = 0.6
    tau_period: float = 1000.0
    lr_referring: float = 0.0025
    lr_layers: float = 0.0001
    iterations: int = 5000

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not 0 < self.tau0 <= 1:
            raise ValueError("tau0 must lie in (0, 1]")
        if self.lr_referring <= 0 or self.lr_layers <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class InteractionOutput:
    refined: np.ndarray  # (N, D) f'_r
    responses: np.ndarray  # (N,) m_i
    pos_g: np.ndarray | None  # (N, D) f_p, None when PCMI is off
    cache: dict = field(default_factory=dict, repr=False)


# ----------------------------------------------------------------------------
# elementary operations


def project_features(referring: np.ndarray, words: np.ndarray, model: ReferModel):
    return model.refer_proj.forward(referring), model.word_proj.forward(words)


def similarity_scores(f_r: np.ndarray, f_w: np.ndarray, kind: str = "multiplication") -> np.ndarray:
    """m_i = sum_j <f_r,i, f_w,j> (or the sum of cosines)."""
    if kind == "multiplication":
        return f_r @ f_w.sum(axis=0)
    if kind == "cosine":
        u = f_r / np.linalg.norm(f_r, axis=1, keepdims=True)
        w = f_w / np.linalg.norm(f_w, axis=1, keepdims=True)
        return u @ w.sum(axis=0)
    raise ValueError(f"unknown similarity {kind!r}")


def similarity_backward(f_r, f_w, g_m, kind: str = "multiplication"):
    if kind == "multiplication":
        wsum = f_w.sum(axis=0)
        return np.outer(g_m, wsum), np.broadcast_to(f_r.T @ g_m, f_w.shape).copy()
    nr = np.linalg.norm(f_r, axis=1, keepdims=True)
    nw = np.linalg.norm(f_w, axis=1, keepdims=True)
    u, w = f_r / nr, f_w / nw
    gu = np.outer(g_m, w.sum(axis=0))
    gw = np.broadcast_to(u.T @ g_m, f_w.shape)
    g_r = (gu - u * np.sum(u * gu, axis=1, keepdims=True)) / nr
    g_w = (gw - w * np.sum(w * gw, axis=1, keepdims=True)) / nw
    return g_r, g_w


def position_embed(mu: np.ndarray, model: ReferModel, cache: dict | None = None) -> np.ndarray:
    return model.pos_mlp.forward(mu, cache)


def text_position_features(f_w: np.ndarray, f_r_i: np.ndarray, f_p_i: np.ndarray) -> np.ndarray:
    """Word-aligned position features of one Gaussian, shape (L, D)."""
    s = softmax(f_w @ f_r_i / np.sqrt(f_w.shape[1]))
    return np.outer(s, f_p_i)


def position_aware_refine(f_r: np.ndarray, f_p: np.ndarray, f_w: np.ndarray, f_pw: np.ndarray) -> np.ndarray:
    """Residual attention over words with position-augmented query and keys.

    ``f_pw`` has shape (N, L, D); there are no learned query/key/value maps.
    """
    d = f_r.shape[1]
    q = f_r + f_p
    keys = f_w[None, :, :] + f_pw
    a = softmax(np.einsum("nd,nld->nl", q, keys) / np.sqrt(d), axis=1)
    return f_r + a @ f_w


def _interaction(f_r, f_w, f_p):
    """Batched text-position features + refinement using rank-one keys.

    Because f_pw[i, j] = s_ij f_p,i, the key logits reduce to
    q_i . f_w,j + s_ij (q_i . f_p,i) and no (N, L, D) tensor is built.
    """
    root = np.sqrt(f_r.shape[1])
    s = softmax(f_r @ f_w.T / root, axis=1)
    q = f_r + f_p
    qp = np.sum(q * f_p, axis=1)
    a = softmax((q @ f_w.T + s * qp[:, None]) / root, axis=1)
    refined = f_r + a @ f_w
    return refined, {"s": s, "q": q, "qp": qp, "a": a}


def _interaction_backward(f_r, f_w, f_p, c, g_ref):
    root = np.sqrt(f_r.shape[1])
    s, q, qp, a = c["s"], c["q"], c["qp"], c["a"]
    g_r = g_ref.copy()
    g_w = a.T @ g_ref
    g_a = g_ref @ f_w.T
    g_logit = softmax_backward(a, g_a, axis=1) / root
    g_q = g_logit @ f_w
    g_w += g_logit.T @ q
    g_s = g_logit * qp[:, None]
    g_qp = np.sum(g_logit * s, axis=1)
    g_q += g_qp[:, None] * f_p
    g_p = g_qp[:, None] * q
    g_slogit = softmax_backward(s, g_s, axis=1) / root
    g_r += g_slogit @ f_w
    g_w += g_slogit.T @ f_r
    g_r += g_q
    g_p += g_q
    return g_r, g_w, g_p


# ----------------------------------------------------------------------------
# composed forward / backward


def interact(model: ReferModel, referring: np.ndarray, words: np.ndarray, mu: np.ndarray, *,
             pcmi: bool = True, similarity: str = "multiplication") -> InteractionOutput:
    """Referring features and word embeddings to per-Gaussian responses."""
    f_r, f_w = project_features(referring, words, model)
    cache = {"referring": referring, "words": words, "f_r": f_r, "f_w": f_w,
             "pcmi": pcmi, "similarity": similarity}
    f_p = None
    if pcmi:
        mlp_cache: dict = {}
        f_p = position_embed(mu, model, mlp_cache)
        refined, att = _interaction(f_r, f_w, f_p)
        cache.update(att, mlp=mlp_cache)
    else:
        refined = f_r
    m = similarity_scores(refined, f_w, similarity)
    return InteractionOutput(refined, m, f_p, cache)


def interact_backward(model: ReferModel, out: InteractionOutput, g_m: np.ndarray,
                      g_refined: np.ndarray | None = None, g_f_w: np.ndarray | None = None):
    """Gradients for the model parameters and the referring matrix.

    ``g_refined`` and ``g_f_w`` carry extra upstream gradients (from the
    contrastive branch) into f'_r and the projected words.
    """
    c = out.cache
    f_r, f_w = c["f_r"], c["f_w"]
    g_ref, g_w = similarity_backward(out.refined, f_w, g_m, c["similarity"])
    if g_refined is not None:
        g_ref = g_ref + g_refined
    if g_f_w is not None:
        g_w = g_w + g_f_w
    grads: dict[str, np.ndarray] = {}
    if c["pcmi"]:
        g_r, g_w2, g_p = _interaction_backward(f_r, f_w, out.pos_g, c, g_ref)
        g_w = g_w + g_w2
        _, mg = model.pos_mlp.backward(c["mlp"], g_p)
        grads.update({f"pos_mlp.{k}": v for k, v in mg.items()})
    else:
        g_r = g_ref
        grads.update({k: np.zeros_like(v) for k, v in model.pos_mlp.params("pos_mlp").items()})
    g_referring, gw_r, gb_r = model.refer_proj.backward(c["referring"], g_r)
    _, gw_w, gb_w = model.word_proj.backward(c["words"], g_w)
    grads.update({"refer_proj.weight": gw_r, "refer_proj.bias": gb_r,
                  "word_proj.weight": gw_w, "word_proj.bias": gb_w})
    return grads, g_referring


def forward_response(cloud, words: np.ndarray, model: ReferModel, camera, *, referring=None,
                     pcmi: bool = True, similarity: str = "multiplication", **render_kw):
    """Full pipeline for one expression and view: ``(ResponseMap, InteractionOutput)``."""
    from .rasterizer import render_response

    referring = cloud.referring if referring is None else referring
    out = interact(model, referring, words, cloud.mu, pcmi=pcmi, similarity=similarity)
    return render_response(cloud, out.responses, camera, **render_kw), out


# ----------------------------------------------------------------------------
# losses


def bce_loss(values: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean BCE of logistic(values) against a binary mask, with dL/dvalues.

    Probabilities are clamped to [1e-7, 1 - 1e-7], which is the same as
    clipping the logits to +-LOGIT_CLIP; the loss is evaluated in logit form.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape != np.shape(target):
        raise ValueError(f"map shape {values.shape} does not match mask shape {np.shape(target)}")
    t = np.asarray(target, dtype=np.float64)
    z = np.clip(values, -LOGIT_CLIP, LOGIT_CLIP)
    per_pixel = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))) - t * z
    y = 0.5 * (1.0 + np.tanh(0.5 * values))
    # exactly rounded sum: keeps the loss quantum small for finite-difference checks
    return math.fsum(per_pixel.ravel()) / values.size, (y - t) / values.size


def tau_schedule(iteration, tau0: float = 0.1, base: float = 0.6, period: float = 1000.0) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return tau0 * base ** (iteration / period)


def top_tau_indices(m: np.ndarray, tau: float) -> np.ndarray:
    n = len(m)
    k = max(1, int(np.floor(tau * n + 0.5)))
    return np.argsort(-np.asarray(m), kind="stable")[:k]


def gaussian_embedding(refined: np.ndarray, m: np.ndarray, tau: float):
    """Normalized mean of the refined rows with the top-tau fraction of responses.

    Returns ``(f_g, selected indices, norm of the mean)``.
    """
    idx = top_tau_indices(m, tau)
    f_g, norm = l2_normalize(refined[idx].mean(axis=0))
    return f_g, idx, norm


def gaussian_embedding_backward(f_g, idx, norm, n_rows: int, g_fg: np.ndarray) -> np.ndarray:
    g_mean = l2_normalize_backward(f_g, norm, g_fg)
    g = np.zeros((n_rows, len(f_g)))
    g[idx] = g_mean / len(idx)
    return g


def contrastive_loss(f_g: np.ndarray, positives: np.ndarray, negatives: np.ndarray):
    """Object-wise InfoNCE. Returns ``(loss, dL/df_g, dL/dpositives, dL/dnegatives)``."""
    positives = np.atleast_2d(positives)
    negatives = np.asarray(negatives, dtype=np.float64).reshape(-1, len(f_g))
    n_p = len(positives)
    if n_p == 0:
        raise ValueError("contrastive loss needs at least one positive")
    e = np.concatenate([positives, negatives])
    z = e @ f_g
    zmax = z.max()
    lse = zmax + np.log(np.sum(np.exp(z - zmax)))
    loss = -np.mean(z[:n_p] - lse)
    if len(negatives) == 0 and n_p == 1:
        loss = 0.0
    p = np.exp(z - lse)
    g_z = p.copy()
    g_z[:n_p] -= 1.0 / n_p
    g_fg = g_z @ e
    g_e = np.outer(g_z, f_g)
    return float(loss), g_fg, g_e[:n_p], g_e[n_p:]


def total_loss(bce: float, con: float, lam: float) -> float:
    if lam < 0:
        raise ValueError("lam must be >= 0")
    return bce + lam * con


def sentence_embedding(model: ReferModel, words: np.ndarray):
    """Pooled, normalized projected words; returns ``(f_e, norm)``."""
    return l2_normalize(model.word_proj.forward(words).mean(axis=0))


def sentence_embedding_backward(model: ReferModel, words, f_e, norm, g_fe):
    g_mean = l2_normalize_backward(f_e, norm, g_fe)
    g_rows = np.broadcast_to(g_mean / len(words), (len(words), len(g_mean)))
    _, gw, gb = model.word_proj.backward(words, g_rows)
    return gw, gb


def sentence_embeddings(model: ReferModel, sentences: list[np.ndarray]):
    """Batched ``sentence_embedding`` over several word matrices.

    Returns ``(embeddings (K, D), norms (K,), stacked words)``.
    """
    stacked = np.concatenate(sentences)
    starts = np.cumsum([0] + [len(w) for w in sentences[:-1]])
    lengths = np.array([len(w) for w in sentences], dtype=float)
    means = np.add.reduceat(model.word_proj.forward(stacked), starts, axis=0) / lengths[:, None]
    norms = np.linalg.norm(means, axis=1)
    if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
        raise NumericalError("cannot normalize a zero-norm sentence embedding")
    return means / norms[:, None], norms, stacked


def sentence_embeddings_backward(model: ReferModel, sentences, e, norms, stacked, g_e):
    g_mean = (g_e - e * np.sum(e * g_e, axis=1, keepdims=True)) / norms[:, None]
    lengths = np.array([len(w) for w in sentences])
    g_rows = np.repeat(g_mean / lengths[:, None], lengths, axis=0)
    return g_rows.T @ stacked, g_rows.sum(axis=0)


# ----------------------------------------------------------------------------
# full objective


@dataclass
class ContrastiveContext:
    positives: list[np.ndarray]  # word-embedding matrices of positive expressions
    negatives: list[np.ndarray]
    tau: float
    lam: float


@dataclass
class LossBreakdown:
    bce: float
    con: float
    total: float
    tau: float | None = None


def objective(model: ReferModel, referring: np.ndarray, mu: np.ndarray, words: np.ndarray, render, target,
              *, pcmi: bool = True, similarity: str = "multiplication",
              contrastive: ContrastiveContext | None = None):
    """Total loss for one (view, expression) sample and all gradients.

    ``render`` is any object with ``forward(m) -> map`` and
    ``backward(dL/dmap) -> dL/dm`` (``rasterizer.WeightOperator``).
    Returns ``(LossBreakdown, param grads, referring grad)``.
    """
    out = interact(model, referring, words, mu, pcmi=pcmi, similarity=similarity)
    values = render.forward(out.responses)
    bce, g_map = bce_loss(values, target)
    g_m = render.backward(g_map)
    con = 0.0
    g_refined = None
    extra_w = {"word_proj.weight": 0.0, "word_proj.bias": 0.0}
    tau = None
    if contrastive is not None:
        tau = contrastive.tau
        f_g, idx, norm = gaussian_embedding(out.refined, out.responses, tau)
        sentences = contrastive.positives + contrastive.negatives
        e, norms, stacked = sentence_embeddings(model, sentences)
        n_p = len(contrastive.positives)
        con, g_fg, g_pos, g_neg = contrastive_loss(f_g, e[:n_p], e[n_p:])
        lam = contrastive.lam
        g_refined = lam * gaussian_embedding_backward(f_g, idx, norm, len(out.refined), g_fg)
        g_e = lam * np.concatenate([g_pos, g_neg])
        gw, gb = sentence_embeddings_backward(model, sentences, e, norms, stacked, g_e)
        extra_w = {"word_proj.weight": gw, "word_proj.bias": gb}
        total = total_loss(bce, con, lam)
    else:
        total = bce
    grads, g_referring = interact_backward(model, out, g_m, g_refined=g_refined)
    grads["word_proj.weight"] = grads["word_proj.weight"] + extra_w["word_proj.weight"]
    grads["word_proj.bias"] = grads["word_proj.bias"] + extra_w["word_proj.bias"]
    return LossBreakdown(bce, con, total, tau), grads, g_referring


def objective_value(model: ReferModel, referring: np.ndarray, mu: np.ndarray, words: np.ndarray, render, target,
                    *, pcmi: bool = True, similarity: str = "multiplication",
                    contrastive: ContrastiveContext | None = None) -> float:
    """Forward-only twin of ``objective``; same arithmetic, no backward work."""
    out = interact(model, referring, words, mu, pcmi=pcmi, similarity=similarity)
    bce, _ = bce_loss(render.forward(out.responses), target)
    if contrastive is None:
        return bce
    f_g, _, _ = gaussian_embedding(out.refined, out.responses, contrastive.tau)
    e = sentence_embeddings(model, contrastive.positives + contrastive.negatives)[0]
    n_p = len(contrastive.positives)
    con = contrastive_loss(f_g, e[:n_p], e[n_p:])[0]
    return total_loss(bce, con, contrastive.lam)
