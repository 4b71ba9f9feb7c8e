"""Command-line entry point: ``refgs <command> [options]``.

Exit codes: 0 success, 1 usage or config error (including scenes the
config cannot lay out or describe), 2 verification failure,
3 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import jsonio
from .config import ConfigError, RunConfig, config_from_dict, load_config
from .dataset import build_dataset, load_dataset, save_dataset, save_masks
from .evaluate import ablation_grid, evaluate, find_occlusion, grid_csv, occlusion_probe
from .gradcheck import run as run_gradcheck
from .imageio import write_pfm, write_pgm, write_ppm
from .pseudomask import SELECTORS, filter_candidates, iou, selection_benchmark
from .rasterizer import render_color, render_response
from .scene import LayoutError
from .text import Expression, GrammarError, embed_tokens, resolve, tokenize
from .trainer import TrainContext, load_checkpoint, save_checkpoint, save_trace, train, train_two_stage

log = logging.getLogger("refgs")

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class VerificationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ----------------------------------------------------------------------------
# helpers


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = config_from_dict({**cfg.to_dict(), "seed": args.seed})
    if getattr(args, "iterations", None) is not None:
        d = cfg.to_dict()
        d["train"]["hyper"]["iterations"] = args.iterations
        cfg = config_from_dict(d)
    return cfg


def _apply_ablation(cfg: RunConfig, spec: str | None) -> RunConfig:
    if not spec:
        return cfg
    d = cfg.to_dict()
    for item in filter(None, (s.strip() for s in spec.split(","))):
        if item == "no-pcmi":
            d["train"]["pcmi"] = False
        elif item == "no-gtcl":
            d["train"]["gtcl"] = False
        elif item in ("cosine", "multiplication"):
            d["train"]["similarity"] = item
        elif item.startswith("d_r="):
            d["train"]["d_r"] = int(item[4:])
        else:
            raise UsageError(f"unknown ablation {item!r} (expected no-pcmi, no-gtcl, cosine, d_r=N)")
    return config_from_dict(d)


def _read_meta(data_dir: Path) -> dict:
    path = data_dir / "meta.json"
    if not path.exists():
        raise FileNotFoundError(f"{data_dir} is not a dataset directory (no meta.json)")
    return jsonio.load(path)


def _load_training_data(data_dir: Path):
    meta = _read_meta(data_dir)
    pseudo_meta_path = data_dir / "pseudo" / "meta.json"
    if not pseudo_meta_path.exists():
        raise FileNotFoundError(f"no pseudo masks in {data_dir}; run `refgs pseudomask` first")
    pmeta = jsonio.load(pseudo_meta_path)
    if pmeta["data_hash"] != meta["config_hash"]:
        raise ConfigError("pseudo masks were produced from a different dataset (hash mismatch)")
    ds = load_dataset(data_dir, with_candidates=False)
    return ds, meta, pmeta


def _check_checkpoint(state, meta: dict):
    if state.meta.get("data_hash") != meta["config_hash"]:
        raise ConfigError("checkpoint was trained on a different dataset (hash mismatch)")


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ----------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    if (out / "meta.json").exists():
        for sub in ("gt", "candidates", "pseudo"):
            shutil.rmtree(out / sub, ignore_errors=True)
    ds = build_dataset(cfg.dataset, cfg.seed, selector=cfg.selector, eps=cfg.eps)
    h = cfg.dataset_hash()
    save_dataset(ds, out, meta={"config": cfg.to_dict(), "config_hash": h, "seed": cfg.seed})
    print(f"dataset {h}: {len(ds.cloud)} gaussians, {len(ds.objects)} objects, {len(ds.cameras)} cameras, "
          f"{len(ds.expressions)} expressions, {len(ds.candidates)} candidate sets -> {out}")
    return EXIT_OK


def cmd_pseudomask(args) -> int:
    data = Path(args.data)
    meta = _read_meta(data)
    cfg = config_from_dict(meta["config"])
    d = cfg.to_dict()
    if args.selector:
        d["selector"] = args.selector
    if args.eps is not None:
        d["train"]["hyper"]["eps"] = args.eps
    cfg = config_from_dict(d)
    ds = load_dataset(data)
    if not ds.candidates:
        raise FileNotFoundError(f"no candidate sets in {data}")
    quality = {}
    for name, pick in SELECTORS.items():
        scores = [iou(pick(filter_candidates(c, cfg.eps))[1], ds.gt_mask(v, ds.expressions[e].target_object))
                  for (v, e), c in sorted(ds.candidates.items())]
        quality[name] = float(np.mean(scores))
    ds.select_pseudo(cfg.selector, cfg.eps)
    ph = cfg.pseudo_hash(meta["config_hash"])
    shutil.rmtree(data / "pseudo", ignore_errors=True)
    save_masks(ds.pseudo, data / "pseudo", comment=f"config_hash={ph}")
    report = {"selector": cfg.selector, "eps": cfg.eps, "data_hash": meta["config_hash"], "config_hash": ph,
              "n_masks": len(ds.pseudo), "mean_iou_vs_gt": quality}
    jsonio.dump(report, data / "pseudo" / "meta.json")
    print(f"pseudo masks ({cfg.selector}, eps={cfg.eps}): {len(ds.pseudo)} written")
    for name, q in quality.items():
        print(f"  mean IoU vs GT, {name:10s} {q:.4f}")
    return EXIT_OK


def _train_common(args):
    data = Path(args.data)
    ds, meta, pmeta = _load_training_data(data)
    base = config_from_dict(meta["config"])
    d = base.to_dict()
    if args.config:
        user = load_config(args.config).to_dict()
        d["train"], d["eval"] = user["train"], user["eval"]
    if args.seed is not None:
        d["train"]["seed"] = args.seed
    if args.iterations is not None:
        d["train"]["hyper"]["iterations"] = args.iterations
    cfg = _apply_ablation(config_from_dict(d), args.ablate)
    run_meta = {"data_hash": meta["config_hash"], "pseudo_hash": pmeta["config_hash"]}
    return ds, cfg, run_meta


def cmd_train(args) -> int:
    ds, cfg, run_meta = _train_common(args)
    state = train(ds, cfg.train)
    state.meta.update(run_meta)
    out = _out(args)
    save_checkpoint(state, out / "checkpoint.json")
    save_trace(state, out / "trace.jsonl")
    last = state.trace[-1] if state.trace else None
    print(f"trained {cfg.train.label} ({state.config.config_hash()}) for {state.iteration} iterations"
          + (f"; final loss {last['total']:.4f}" if last else ""))
    return EXIT_OK


def cmd_train2(args) -> int:
    ds, cfg, run_meta = _train_common(args)
    out = _out(args)
    shutil.rmtree(out / "refined", ignore_errors=True)
    s2, refined, s1 = train_two_stage(ds, cfg.train, out_dir=out)
    for s in (s1, s2):
        s.meta.update(run_meta)
    save_checkpoint(s1, out / "stage1.json")
    save_trace(s1, out / "stage1_trace.jsonl")
    save_checkpoint(s2, out / "checkpoint.json")
    save_trace(s2, out / "trace.jsonl")
    print(f"two-stage training done: {len(refined)} refined masks, {s2.iteration} iterations per stage")
    return EXIT_OK


def _expression(ds, text: str) -> tuple[Expression, int | None]:
    if text.isdigit():
        i = int(text)
        if i >= len(ds.expressions):
            raise UsageError(f"expression id {i} out of range (0..{len(ds.expressions) - 1})")
        return ds.expressions[i], i
    tokens = tokenize(text)
    unknown = [t for t in tokens if t not in ds.vocab.index]
    if unknown:
        raise UsageError(f"unknown token(s): {', '.join(unknown)}")
    targets = resolve(tokens, ds.objects)
    return Expression(tokens, targets[0] if len(targets) == 1 else -1, "adhoc"), None


def cmd_render(args) -> int:
    data = Path(args.data)
    meta = _read_meta(data)
    ds = load_dataset(data, with_candidates=False)
    if not 0 <= args.view < len(ds.cameras):
        raise UsageError(f"camera id {args.view} out of range (0..{len(ds.cameras) - 1})")
    cam = ds.cameras[args.view]
    expr, expr_id = _expression(ds, args.expr)
    if args.oracle:
        if expr.target_object < 0:
            raise UsageError("expression does not identify a unique object; cannot build oracle responses")
        m = np.where(ds.cloud.object_id == expr.target_object, 20.0, -20.0)
        tag = f"oracle/{meta['config_hash']}"
    else:
        if not args.ckpt:
            raise UsageError("--ckpt is required unless --oracle is given")
        state = load_checkpoint(args.ckpt)
        _check_checkpoint(state, meta)
        from .referfield import interact
        out_i = interact(state.model, state.referring, embed_tokens(expr, ds.vocab), ds.cloud.mu,
                         pcmi=state.config.pcmi, similarity=state.config.similarity)
        m = out_i.responses
        tag = state.config.config_hash()
    resp = render_response(ds.cloud, m, cam)
    mask = resp.values > 0.0
    color = render_color(ds.cloud, cam)
    overlay = np.where(mask[..., None], 0.45 * color + 0.55 * np.array([1.0, 0.1, 0.1]), color)
    out = _out(args)
    comment = f"config_hash={tag} view={args.view} expr={' '.join(expr.tokens)}"
    write_pfm(out / "response.pfm", resp.values)
    jsonio.dump({"config_hash": tag, "view": args.view, "expression": list(expr.tokens), "expression_id": expr_id,
                 "target_object": expr.target_object}, out / "response.json")
    write_pgm(out / "mask.pgm", mask, comment=comment)
    write_ppm(out / "overlay.ppm", overlay, comment=comment)
    msg = f"rendered '{' '.join(expr.tokens)}' in view {args.view}: {int(mask.sum())} positive pixels"
    if expr.target_object >= 0:
        msg += f", IoU vs GT {iou(mask, ds.gt_mask(args.view, expr.target_object)):.4f}"
    print(msg)
    return EXIT_OK


def cmd_eval(args) -> int:
    data = Path(args.data)
    meta = _read_meta(data)
    ds = load_dataset(data, with_candidates=False)
    state = load_checkpoint(args.ckpt)
    _check_checkpoint(state, meta)
    report = evaluate(state, ds, threshold=args.threshold)
    result = report.to_dict()
    if args.probe:
        found = find_occlusion(ds, ds.cameras[ds.novel_views[0]])
        if found is None:
            raise UsageError("no fully occluded object found in this scene")
        t, b, cam = found
        result["occlusion"] = occlusion_probe(state, ds, t, b, cam).to_dict()
    out = _out(args)
    jsonio.dump(result, out / "report.json")
    print(f"mIoU {report.miou:.4f} over {len(report.per_expression)} test expressions x "
          f"{len(ds.novel_views)} novel views ({report.config_hash})")
    if args.probe:
        o = result["occlusion"]
        print(f"occlusion probe: target {o['target_object']} behind {o['blocker_object']}, "
              f"predicted area {o['predicted_fraction']:.3f}, IoU unblocked {o['iou_unblocked']:.3f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    data = Path(args.data)
    ds, cfg, run_meta = _train_common(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else cfg.eval.seeds
    mode = args.grid or cfg.eval.grid

    def progress(cell, seed, score):
        print(f"  {cell[0]:10s} {cell[1]:15s} d_r={cell[2]:<3d} seed {seed}: mIoU {score:.4f}", flush=True)

    table = ablation_grid(ds, cfg.train, seeds, mode=mode, progress=progress)
    out = _out(args)
    jsonio.dump({"rows": table, "base_config_hash": cfg.train.config_hash(), **run_meta}, out / "grid.json")
    (out / "grid.csv").write_text(grid_csv(table))
    print(grid_csv(table), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report, seconds = run_gradcheck(args.seed or 0, h=args.h, tol=args.tol)
    for name, err in report.errors.items():
        print(f"  {name:24s} max rel err {err:.3e}")
    verdict = "PASS" if report.passed else "FAIL"
    print(f"gradcheck {verdict}: max relative error {report.max_error:.3e} (tol {args.tol:g}) in {seconds:.1f}s")
    if args.out:
        out = _out(args)
        jsonio.dump({"errors": report.errors, "max_error": report.max_error, "tol": args.tol, "h": args.h,
                     "passed": report.passed, "flagged": [list(map(str, f)) for f in report.flagged]},
                    out / "gradcheck.json")
    if not report.passed:
        raise VerificationError(f"{len(report.flagged)} gradient entries exceed tolerance")
    return EXIT_OK


def cmd_maskbench(args) -> int:
    data = Path(args.data)
    meta = _read_meta(data)
    cfg = config_from_dict(meta["config"])
    ds = load_dataset(data, with_candidates=False)
    samples = []
    for v in ds.train_views:
        masks = {o.id: ds.gt_mask(v, o.id) for o in ds.objects}
        for oid, m in masks.items():
            if m.any():
                samples.append((m, [x for k, x in masks.items() if k != oid]))
    trials = args.trials or cfg.eval.maskbench_trials
    bench = selection_benchmark(samples, trials, cfg.seed, cfg.dataset.corruption, cfg.eps)
    if args.out:
        jsonio.dump({**bench.to_dict(), "data_hash": meta["config_hash"]}, _out(args) / "maskbench.json")
    for name, v in bench.mean_iou.items():
        print(f"  {name:10s} mean IoU {v:.4f}")
    print(f"ordering weighted >= unweighted >= top1: {'yes' if bench.ordered() else 'no'} ({trials} trials)")
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="refgs", description="Referring segmentation on synthetic Gaussian-splat scenes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True, out=True):
        sp.add_argument("--seed", type=int)
        sp.add_argument("--config", help="JSON config file (partial; defaults fill the rest)")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory written by `gen`")

    sp = sub.add_parser("gen", help="synthesize a dataset")
    common(sp, data=False)
    sp.set_defaults(fn=cmd_gen)

    sp = sub.add_parser("pseudomask", help="select pseudo masks from candidate sets")
    sp.add_argument("--data", required=True)
    sp.add_argument("--selector", choices=sorted(SELECTORS))
    sp.add_argument("--eps", type=float)
    sp.set_defaults(fn=cmd_pseudomask)

    for name, fn in (("train", cmd_train), ("train2", cmd_train2)):
        sp = sub.add_parser(name, help="train a model" if name == "train" else "two-stage training")
        common(sp)
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--ablate", help="comma list of no-pcmi, no-gtcl, cosine, d_r=N")
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("render", help="render a response map, mask and overlay")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt")
    sp.add_argument("--expr", required=True, help="expression id or quoted text")
    sp.add_argument("--view", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--oracle", action="store_true", help="inject oracle responses instead of a checkpoint")
    sp.set_defaults(fn=cmd_render)

    sp = sub.add_parser("eval", help="mIoU on test expressions and novel views")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--threshold", type=float, default=0.0)
    sp.add_argument("--probe", action="store_true", help="also run the occlusion probe")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ablate", help="ablation grid")
    common(sp)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--ablate", help=argparse.SUPPRESS)
    sp.add_argument("--seeds", help="comma list, at least three")
    sp.add_argument("--grid", choices=["standard", "factorial"])
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--h", type=float, default=1e-4)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("maskbench", help="pseudo-mask selector benchmark on a dataset's masks")
    sp.add_argument("--data", required=True)
    sp.add_argument("--trials", type=int)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_maskbench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return args.fn(args)
    except (UsageError, ConfigError, ValueError, LayoutError, GrammarError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except VerificationError as e:
        print(f"verification failed: {e}", file=sys.stderr)
        return EXIT_VERIFY
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
