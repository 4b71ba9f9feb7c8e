"""Pseudo ground-truth masks from noisy candidates.

``corrupt_masks`` stands in for an open-vocabulary detector/segmenter: it
emits perturbed copies of the true mask, degraded copies and masks of the
wrong object, each with a confidence score that is only loosely tied to
correctness. The selectors then pick one candidate per sample.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import jsonio
from .imageio import read_pgm, write_pgm
from .numkit import make_rng

log = logging.getLogger(__name__)


@dataclass
class Candidate:
    mask: np.ndarray  # (H, W) bool
    gamma: float
    kind: str = "unknown"  # good | degraded | decoy, for diagnostics only


@dataclass
class CandidateMaskSet:
    candidates: list[Candidate]
    note: str = ""

    def __post_init__(self):
        shapes = {c.mask.shape for c in self.candidates}
        if len(shapes) > 1:
            raise ValueError(f"candidate masks differ in shape: {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.candidates)

    @property
    def masks(self) -> list[np.ndarray]:
        return [c.mask for c in self.candidates]

    @property
    def gammas(self) -> np.ndarray:
        return np.array([c.gamma for c in self.candidates], dtype=np.float64)


@dataclass
class CorruptionConfig:
    k: int = 7
    radius: int = 3  # max dilation/erosion of degraded copies, pixels
    translate: int = 3  # max shift of degraded copies, pixels
    blob_rate: float = 0.25  # probability that a candidate is a degraded copy with spurious blobs
    wrong_object_rate: float = 0.3  # probability that a candidate outlines the distractor object
    # confidence ranges: correct masks agree closely, failures are scattered
    gamma_good: tuple[float, float] = (0.8, 0.9)
    gamma_degraded: tuple[float, float] = (0.45, 0.65)
    gamma_decoy: tuple[float, float] = (0.3, 0.95)

    @classmethod
    def zero_noise(cls, k: int = 7) -> "CorruptionConfig":
        return cls(k=k, radius=0, translate=0, blob_rate=0.0, wrong_object_rate=0.0)


# ----------------------------------------------------------------------------
# corruption


def _shift(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(mask)
    h, w = mask.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = mask[ys, xs]
    return out


def _morph(mask: np.ndarray, r: int) -> np.ndarray:
    if r > 0:
        return ndimage.binary_dilation(mask, iterations=r)
    if r < 0:
        return ndimage.binary_erosion(mask, iterations=-r)
    return mask.copy()


def _blob(shape, rng: np.random.Generator, radius: float) -> np.ndarray:
    h, w = shape
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2


def _perturb(gt, rng, radius: int, translate: int) -> np.ndarray:
    r = int(rng.integers(-radius, radius + 1)) if radius else 0
    dy, dx = (rng.integers(-translate, translate + 1, size=2) if translate else (0, 0))
    out = _shift(_morph(gt, r), int(dy), int(dx))
    return out if out.any() else gt.copy()


def corrupt_masks(gt: np.ndarray, config: CorruptionConfig, rng: np.random.Generator,
                  decoys: list[np.ndarray] | None = None) -> CandidateMaskSet:
    gt = np.asarray(gt, dtype=bool)
    if not gt.any():
        raise ValueError("ground-truth mask is empty")
    decoys = [d for d in (decoys or []) if d.any() and not np.array_equal(d, gt)]
    cands = []
    size = np.sqrt(gt.sum())
    # a confused segmenter keeps returning the same distractor
    distractor = decoys[int(rng.integers(len(decoys)))] if decoys else None
    for _ in range(config.k):
        u = rng.random()
        if u < config.wrong_object_rate:
            if distractor is not None:
                mask = _perturb(distractor, rng, min(1, config.radius), min(1, config.translate))
            else:
                mask = _blob(gt.shape, rng, max(1.5, size / 2)) & ~gt
                if not mask.any():
                    mask = ~gt
            gamma = rng.uniform(*config.gamma_decoy)
            kind = "decoy"
        elif u < config.wrong_object_rate + config.blob_rate:
            mask = _perturb(gt, rng, config.radius, config.translate)
            for _ in range(int(rng.integers(1, 3))):
                mask = mask | _blob(gt.shape, rng, max(1.5, size / 3))
            gamma = rng.uniform(*config.gamma_degraded)
            kind = "degraded"
        else:
            mask = _perturb(gt, rng, min(1, config.radius), min(1, config.translate))
            gamma = rng.uniform(*config.gamma_good)
            kind = "good"
        cands.append(Candidate(mask, float(gamma), kind))
    return CandidateMaskSet(cands, "synthetic corruption")


# ----------------------------------------------------------------------------
# selection


def filter_candidates(cset: CandidateMaskSet, eps: float = 0.3) -> CandidateMaskSet:
    """Keep candidates with confidence above ``eps``; never returns an empty set."""
    if not 0 <= eps < 1:
        raise ValueError("eps must lie in [0, 1)")
    keep = [c for c in cset.candidates if c.gamma > eps]
    if not keep:
        best = int(np.argmax(cset.gammas))
        log.warning("all %d candidates below eps=%.3f; keeping the most confident one", len(cset), eps)
        keep = [cset.candidates[best]]
    return CandidateMaskSet(keep, cset.note)


def weighted_jaccard(mask_k, gamma_k: float, mask_j, gamma_j: float) -> float:
    """sum(min) / sum(max) of the confidence-scaled masks; 1 when both are empty."""
    a = np.asarray(mask_k, dtype=np.float64) * gamma_k
    b = np.asarray(mask_j, dtype=np.float64) * gamma_j
    den = np.maximum(a, b).sum()
    if den == 0.0:
        return 1.0
    return float(np.minimum(a, b).sum() / den)


def jaccard_matrix(masks: list[np.ndarray], gammas) -> np.ndarray:
    """Pairwise weighted Jaccard, vectorised over the K candidates."""
    g = np.asarray(gammas, dtype=np.float64)
    flat = np.array([np.asarray(m, dtype=bool).ravel() for m in masks])
    cnt = flat.astype(np.float64)
    both = cnt @ cnt.T
    only_k = cnt @ (1.0 - cnt).T  # in k, not in j
    gmin = np.minimum(g[:, None], g[None, :])
    gmax = np.maximum(g[:, None], g[None, :])
    num = gmin * both
    den = gmax * both + g[:, None] * only_k + g[None, :] * only_k.T
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)
    return out


def overlap_scores(cset: CandidateMaskSet, weighted: bool = True) -> np.ndarray:
    g = cset.gammas if weighted else np.ones(len(cset))
    return jaccard_matrix(cset.masks, g).sum(axis=1)


def select_weighted_iou(cset: CandidateMaskSet) -> tuple[int, np.ndarray]:
    if len(cset) < 1:
        raise ValueError("empty candidate set")
    k = int(np.argmax(overlap_scores(cset, True)))
    return k, cset.candidates[k].mask


def select_iou_unweighted(cset: CandidateMaskSet) -> tuple[int, np.ndarray]:
    if len(cset) < 1:
        raise ValueError("empty candidate set")
    k = int(np.argmax(overlap_scores(cset, False)))
    return k, cset.candidates[k].mask


def select_top1(cset: CandidateMaskSet) -> tuple[int, np.ndarray]:
    if len(cset) < 1:
        raise ValueError("empty candidate set")
    k = int(np.argmax(cset.gammas))
    return k, cset.candidates[k].mask


SELECTORS = {"weighted": select_weighted_iou, "unweighted": select_iou_unweighted, "top1": select_top1}


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary masks; two empty masks score 1."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


@dataclass
class SelectionBenchmark:
    trials: int
    mean_iou: dict[str, float]  # selector -> mean IoU(selected, gt)
    candidate_iou: float  # mean IoU over all candidates
    oracle_iou: float  # mean IoU of the best candidate per trial
    top1_is_best: float  # share of trials where the most confident candidate is also the best

    def ordered(self) -> bool:
        m = self.mean_iou
        return m["weighted"] >= m["unweighted"] >= m["top1"]

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def selection_benchmark(samples: list[tuple[np.ndarray, list[np.ndarray]]], trials: int = 200, seed: int = 0,
                        config: CorruptionConfig | None = None, eps: float = 0.3) -> SelectionBenchmark:
    """Corrupt ``trials`` ground-truth masks and score every selector.

    ``samples`` holds ``(gt, decoy masks)`` pairs, used round-robin; trial t
    draws from its own random stream so results do not depend on ordering
    elsewhere.
    """
    config = config or CorruptionConfig()
    if not samples:
        raise ValueError("no ground-truth samples")
    scores: dict[str, list[float]] = {k: [] for k in SELECTORS}
    cand, best, top_best = [], [], []
    for t in range(trials):
        gt, decoys = samples[t % len(samples)]
        cset = corrupt_masks(gt, config, make_rng(seed, f"maskbench/trial{t}"), decoys)
        ious = np.array([iou(m, gt) for m in cset.masks])
        cand.append(ious.mean())
        best.append(ious.max())
        top_best.append(ious[select_top1(cset)[0]] == ious.max())
        kept = filter_candidates(cset, eps)
        for name, pick in SELECTORS.items():
            scores[name].append(iou(pick(kept)[1], gt))
    return SelectionBenchmark(trials, {k: float(np.mean(v)) for k, v in scores.items()}, float(np.mean(cand)),
                              float(np.mean(best)), float(np.mean(top_best)))


# ----------------------------------------------------------------------------
# storage


def save_candidates(cset: CandidateMaskSet, directory, gt: np.ndarray | None = None, seed: int | None = None,
                    comment: str | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, c in enumerate(cset.candidates):
        name = f"cand_{k:02d}.pgm"
        write_pgm(d / name, c.mask, comment=comment)
        entries.append({"file": name, "gamma": c.gamma, "kind": c.kind})
    index = {"masks": entries, "seed": seed, "note": cset.note}
    if gt is not None:
        write_pgm(d / "gt.pgm", gt, comment=comment)
        index["gt_file"] = "gt.pgm"
    jsonio.dump(index, d / "index.json")


def load_candidates(directory) -> tuple[CandidateMaskSet, np.ndarray | None]:
    d = Path(directory)
    index = jsonio.load(d / "index.json")
    cands = [Candidate(read_pgm(d / e["file"]) > 0, float(e["gamma"]), e.get("kind", "unknown"))
             for e in index["masks"]]
    gt = read_pgm(d / index["gt_file"]) > 0 if index.get("gt_file") else None
    return CandidateMaskSet(cands, index.get("note", "")), gt
