"""How the pseudo-mask selectors behave on corrupted candidate sets.

Builds one candidate set and shows, per candidate, its kind, confidence,
IoU with GT and overlap score. In this set four copies of the same
distractor outvote the three correct masks, so both consensus selectors
fail while the most confident mask happens to be right. The 200-trial
comparison on the reference scene's object masks shows the average picture.

    python3 demos/mask_selection.py
"""
from refgs.config import RunConfig
from refgs.dataset import build_dataset
from refgs.numkit import make_rng
from refgs.pseudomask import SELECTORS, corrupt_masks, filter_candidates, iou, overlap_scores, \
    selection_benchmark

cfg = RunConfig()
ds = build_dataset(cfg.dataset, cfg.seed)
view = ds.train_views[0]
masks = {o.id: ds.gt_mask(view, o.id) for o in ds.objects}
target = max(masks, key=lambda k: masks[k].sum())
gt = masks[target]

cset = corrupt_masks(gt, cfg.dataset.corruption, make_rng(3, "demo"), [m for k, m in masks.items() if k != target])
kept = filter_candidates(cset, cfg.eps)
print(f"object {target} in view {view}: {int(gt.sum())} pixels; {len(cset)} candidates, "
      f"{len(kept)} above eps={cfg.eps}")
for c, p in zip(kept.candidates, overlap_scores(kept)):
    print(f"  {c.kind:8s} gamma {c.gamma:.2f}  IoU {iou(c.mask, gt):.3f}  score {p:.3f}")
for name, pick in SELECTORS.items():
    k, m = pick(kept)
    print(f"{name:10s} picks #{k}: IoU {iou(m, gt):.3f}")

samples = []
for v in ds.train_views:
    ms = {o.id: ds.gt_mask(v, o.id) for o in ds.objects}
    samples += [(m, [x for j, x in ms.items() if j != i]) for i, m in ms.items() if m.any()]
bench = selection_benchmark(samples, 200, cfg.seed, cfg.dataset.corruption, cfg.eps)
print("\n200 trials:", ", ".join(f"{k} {v:.4f}" for k, v in bench.mean_iou.items()))
print(f"mean candidate IoU {bench.candidate_iou:.4f}; best-candidate IoU {bench.oracle_iou:.4f}; "
      f"top-confidence candidate is the best one in {bench.top1_is_best:.0%} of trials")
