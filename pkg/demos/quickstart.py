"""From scene generation to a segmented novel view, using the library directly.

Uses a reduced scene (4 objects, 48 px views) so it finishes in about a
minute. The reference setup lives in ``benchmark.py``.

    python3 demos/quickstart.py
"""
import time

import numpy as np

from refgs.dataset import CameraSpec, DatasetConfig, build_dataset
from refgs.evaluate import evaluate, evaluate_responses, oracle_state
from refgs.referfield import TrainHyper
from refgs.trainer import TrainConfig, TrainContext, predict, train

cfg = DatasetConfig()
cfg.scene.n_objects = 4
cfg.scene.gaussians_per_object = 80
cfg.cameras = CameraSpec(n=10, width=48, height=48)
ds = build_dataset(cfg, seed=0)

print(f"{len(ds.cloud)} gaussians, {len(ds.cameras)} cameras "
      f"({len(ds.train_views)} train / {len(ds.novel_views)} novel)")
for e in ds.expressions[:6]:
    print(f"  [{e.split:5s}] object {e.target_object}: {e.text}")

# Perfect per-Gaussian responses bound what any model can reach at this resolution.
print(f"oracle mIoU on novel views: {evaluate_responses(ds, oracle_state(None, ds)):.3f}")

# Pseudo masks come from noisy candidate sets; compare the chosen ones with GT.
ious = []
for (v, e), mask in ds.pseudo.items():
    gt = ds.gt_mask(v, ds.expressions[e].target_object)
    ious.append((mask & gt).sum() / max((mask | gt).sum(), 1))
print(f"pseudo-mask IoU vs GT: {np.mean(ious):.3f} over {len(ious)} training pairs")

t0 = time.time()
state = train(ds, TrainConfig(hyper=TrainHyper(iterations=1500)))
print(f"trained 1500 iterations in {time.time() - t0:.0f}s; "
      f"final BCE {np.mean([r['bce'] for r in state.trace[-100:]]):.3f}")

report = evaluate(state, ds)
print(f"held-out mIoU {report.miou:.3f}")
ctx = TrainContext(ds)
e = ds.expression_ids("test")[0]
v = ds.novel_views[0]
mask = predict(state, ctx, v, e)
print(f"'{ds.expressions[e].text}' in view {v}: {int(mask.sum())} pixels predicted, "
      f"{int(ds.gt_mask(v, ds.expressions[e].target_object).sum())} in GT")
