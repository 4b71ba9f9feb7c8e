"""Train every ablation cell on the reference scene and record checkpoints.

The acceptance suite re-evaluates the recorded checkpoints instead of
retraining them (a full sweep is about 30 training runs of 3 minutes each on
one core). Rerun this script after any change to the training code.

    python3 demos/benchmark.py --out results/benchmark
"""
import argparse
import time
from pathlib import Path

import refgs
from refgs import jsonio
from refgs.config import RunConfig
from refgs.dataset import build_dataset
from refgs.evaluate import evaluate, grid_cells, method_config
from refgs.trainer import TrainContext, checkpoint_dict, train, train_two_stage


# modules whose code determines the trained weights
TRAINING_SOURCES = ("numkit", "scene", "rasterizer", "text", "pseudomask", "dataset", "referfield", "trainer")


def source_hash() -> str:
    root = Path(refgs.__file__).parent
    return jsonio.content_hash({m: (root / f"{m}.py").read_text() for m in TRAINING_SOURCES})


def cell_name(cell, seed: int) -> str:
    row, sim, d_r = cell
    return f"{row.replace('+', 'plus-')}_{sim}_dr{d_r}_seed{seed}"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/benchmark")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--only", help="comma list of method rows to run")
    args = ap.parse_args()

    cfg = RunConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    ds = build_dataset(cfg.dataset, cfg.seed, selector=cfg.selector, eps=cfg.eps)
    data_hash = cfg.dataset_hash()
    print(f"dataset {data_hash} built in {time.time() - t0:.0f}s", flush=True)
    ctx = TrainContext(ds)
    index_path = out / "index.json"
    fresh = {"data_hash": data_hash, "source_hash": source_hash(), "runs": {}}
    index = jsonio.load(index_path) if index_path.exists() else fresh
    if (index["data_hash"], index["source_hash"]) != (fresh["data_hash"], fresh["source_hash"]):
        raise SystemExit(f"{index_path} was recorded with other data or code; remove it to start over")
    rows = set(args.only.split(",")) if args.only else None
    for cell in grid_cells("standard"):
        if rows and cell[0] not in rows:
            continue
        for seed in (int(s) for s in args.seeds.split(",")):
            name = cell_name(cell, seed)
            tc = method_config(cfg.train, cell[0], similarity=cell[1], d_r=cell[2], seed=seed)
            start = time.time()
            if cell[0] == "two-stage":
                state, _, _ = train_two_stage(ds, tc, ctx=ctx)
            else:
                state = train(ds, tc, ctx=ctx)
            seconds = time.time() - start
            state.meta = {"data_hash": data_hash}
            jsonio.dump(checkpoint_dict(state), out / f"{name}.json.gz")
            miou = evaluate(state, ds).miou
            index["runs"][name] = {"method": cell[0], "similarity": cell[1], "d_r": cell[2], "seed": seed,
                                   "config_hash": tc.config_hash(), "seconds": round(seconds, 1), "miou": miou}
            jsonio.dump(index, index_path)
            print(f"{name}: mIoU {miou:.4f} in {seconds:.0f}s", flush=True)


if __name__ == "__main__":
    main()
