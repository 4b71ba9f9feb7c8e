"""Synthetic referring-segmentation datasets and their on-disk layout.

Directory layout written by ``save_dataset``::

    scene.json          Gaussians, objects and cameras
    vocab.json          {tokens, seed}
    expressions.json    [{tokens, target_object, split}]
    gt/view{c:02d}_obj{o:02d}.pgm
    candidates/view{c:02d}_expr{e:03d}/index.json + cand_*.pgm
    meta.json           {config, config_hash}
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import jsonio
from .imageio import read_pgm, write_pgm
from .numkit import make_rng
from .pseudomask import SELECTORS, CandidateMaskSet, CorruptionConfig, corrupt_masks, filter_candidates, \
    load_candidates, save_candidates
from .rasterizer import render_object_mask
from .scene import Camera, GaussianCloud, ObjectInfo, SceneSpec, generate_cameras, generate_scene, load_scene, \
    save_scene
from .text import Expression, GrammarConfig, Vocab, generate_expressions


@dataclass
class CameraSpec:
    n: int = 20
    radius: float = 6.5
    elevation: tuple[float, float] = (25.0, 40.0)
    jitter: float = 0.25
    split_ratio: float = 0.8
    width: int = 96
    height: int = 96
    fov_deg: float = 48.0


@dataclass
class DatasetConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    cameras: CameraSpec = field(default_factory=CameraSpec)
    grammar: GrammarConfig = field(default_factory=GrammarConfig)
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    min_gt_pixels: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    cloud: GaussianCloud
    objects: list[ObjectInfo]
    cameras: list[Camera]
    vocab: Vocab
    expressions: list[Expression]
    candidates: dict[tuple[int, int], CandidateMaskSet] = field(default_factory=dict)
    pseudo: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    _gt: dict[tuple[int, int], np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def train_views(self) -> list[int]:
        return [i for i, c in enumerate(self.cameras) if c.split == "train"]

    @property
    def novel_views(self) -> list[int]:
        return [i for i, c in enumerate(self.cameras) if c.split != "train"]

    def expression_ids(self, split: str) -> list[int]:
        return [i for i, e in enumerate(self.expressions) if e.split == split]

    def gt_mask(self, view: int, object_id: int) -> np.ndarray:
        key = (view, object_id)
        if key not in self._gt:
            self._gt[key] = render_object_mask(self.cloud, object_id, self.cameras[view])
        return self._gt[key]

    def training_pairs(self) -> list[tuple[int, int]]:
        """(view, expression) pairs that have a pseudo mask, in sorted order."""
        return sorted(self.pseudo)

    def select_pseudo(self, selector: str = "weighted", eps: float = 0.3) -> None:
        pick = SELECTORS[selector]
        self.pseudo = {k: pick(filter_candidates(c, eps))[1] for k, c in sorted(self.candidates.items())}


def build_dataset(config: DatasetConfig, seed: int, *, selector: str = "weighted", eps: float = 0.3) -> Dataset:
    cloud, objects = generate_scene(config.scene, seed)
    cs = config.cameras
    cams = generate_cameras(cs.n, cs.radius, tuple(cs.elevation), seed=seed, jitter=cs.jitter,
                            split_ratio=cs.split_ratio, width=cs.width, height=cs.height, fov_deg=cs.fov_deg)
    vocab = Vocab.default(seed)
    exprs = generate_expressions(objects, seed, config.grammar)
    ds = Dataset(cloud, objects, cams, vocab, exprs)
    for v in ds.train_views:
        for e in ds.expression_ids("train"):
            target = exprs[e].target_object
            gt = ds.gt_mask(v, target)
            if gt.sum() < config.min_gt_pixels:
                continue
            decoys = [ds.gt_mask(v, o.id) for o in objects if o.id != target]
            rng = make_rng(seed, f"corruption/view{v}/expr{e}")
            ds.candidates[(v, e)] = corrupt_masks(gt, config.corruption, rng, decoys)
    ds.select_pseudo(selector, eps)
    return ds


def remove_objects(ds: Dataset, object_ids) -> Dataset:
    """Copy of ``ds`` with every Gaussian of the given objects deleted."""
    keep = ~np.isin(ds.cloud.object_id, list(object_ids))
    return Dataset(ds.cloud.subset(keep), [o for o in ds.objects if o.id not in set(object_ids)], ds.cameras,
                   ds.vocab, ds.expressions)


# ----------------------------------------------------------------------------
# storage


def _cand_dir(root: Path, v: int, e: int) -> Path:
    return root / "candidates" / f"view{v:02d}_expr{e:03d}"


def save_dataset(ds: Dataset, directory, meta: dict | None = None) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    comment = f"config_hash={meta['config_hash']}" if meta and "config_hash" in meta else None
    save_scene(root / "scene.json", ds.cloud, ds.objects, ds.cameras)
    jsonio.dump(ds.vocab.to_dict(), root / "vocab.json")
    jsonio.dump([e.to_dict() for e in ds.expressions], root / "expressions.json")
    (root / "gt").mkdir(exist_ok=True)
    for v in range(len(ds.cameras)):
        for o in ds.objects:
            write_pgm(root / "gt" / f"view{v:02d}_obj{o.id:02d}.pgm", ds.gt_mask(v, o.id), comment=comment)
    for (v, e), cset in sorted(ds.candidates.items()):
        save_candidates(cset, _cand_dir(root, v, e), gt=ds.gt_mask(v, ds.expressions[e].target_object),
                        comment=comment)
    if meta is not None:
        jsonio.dump(meta, root / "meta.json")


def load_dataset(directory, *, with_candidates: bool = True) -> Dataset:
    root = Path(directory)
    cloud, objects, cams = load_scene(root / "scene.json")
    vocab = Vocab.from_dict(jsonio.load(root / "vocab.json"))
    exprs = [Expression.from_dict(d) for d in jsonio.load(root / "expressions.json")]
    ds = Dataset(cloud, objects, cams, vocab, exprs)
    if with_candidates and (root / "candidates").exists():
        for d in sorted((root / "candidates").iterdir()):
            v, e = d.name.split("_")
            ds.candidates[(int(v[4:]), int(e[4:]))] = load_candidates(d)[0]
    pseudo_dir = root / "pseudo"
    if pseudo_dir.exists():
        ds.pseudo = load_masks(pseudo_dir)
    return ds


def save_masks(masks: dict[tuple[int, int], np.ndarray], directory, comment: str | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for (v, e), m in sorted(masks.items()):
        write_pgm(d / f"view{v:02d}_expr{e:03d}.pgm", m, comment=comment)


def load_masks(directory) -> dict[tuple[int, int], np.ndarray]:
    out = {}
    for p in sorted(Path(directory).glob("view*_expr*.pgm")):
        v, e = p.stem.split("_")
        out[(int(v[4:]), int(e[4:]))] = read_pgm(p) > 0
    return out
