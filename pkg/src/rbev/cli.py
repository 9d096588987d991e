"""Command-line entry point: simulate, encode, evaluate, gradcheck, train-toy,
weights-dump.

Every command is reproducible: identical config and seed produce byte-identical
primary outputs (JSON/CSV/PGM/tensor dumps); the wall-clock timestamp lives
only in the meta.json sidecar. Exit codes: 0 success, 2 usage or config
problems, 3 numeric failure, 4 gradient-check tolerance breach.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, kernels
from . import io as rio
from . import metrics as M
from . import tensor as T
from .degradation import corrupt_test
from .errors import ConfigError, NumericError, RbevError
from .geometry import load_rigs, save_rigs
from .heads import detections_to_json, load_detections, save_detections
from .model import ModelConfig, PerceptionModel, substream, train_toy
from .scene import MAP_CLASSES, OBJECT_CLASSES, Scene, grid_preset, load_scenario, render_view, save_scenario


def _write_meta(out: Path, command: str, seed: int, extra: dict | None = None):
    meta = {
        "command": command,
        "seed": seed,
        "version": __version__,
        "kernel_backend": kernels.BACKEND,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    if extra:
        meta.update(extra)
    rio.dump_json(out / "meta.json", meta)


def _load_model_config(path: str | None) -> ModelConfig:
    if path is None:
        return ModelConfig()
    return ModelConfig.from_dict(rio.load_json(path))


def _require(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing file or directory: {p}")
    return p


def _scene_from_scenario(path: str, grid_override: str | None, seed_override: int | None) -> Scene:
    from .scene import SceneConfig, simulate

    cfg = load_scenario(_require(path))
    if grid_override:
        cfg = SceneConfig(layout=cfg.layout, num_cameras=cfg.num_cameras,
                          traffic_level=cfg.traffic_level, grid=grid_preset(grid_override),
                          seed=cfg.seed)
    if seed_override is not None:
        cfg = SceneConfig(layout=cfg.layout, num_cameras=cfg.num_cameras,
                          traffic_level=cfg.traffic_level, grid=cfg.grid, seed=seed_override)
    return simulate(cfg)


def _sample_id(scene: Scene) -> str:
    return f"scene-{scene.config.seed}"


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    scene = _scene_from_scenario(args.scenario, args.grid, args.seed)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    save_scenario(out / "scenario.json", scene.config)
    save_rigs(out / "rigs.json", scene.rigs)
    save_detections(out / "gt_boxes.json", [a.box for a in scene.agents])
    rio.dump_json(out / "agents.json", [
        {"kind": a.kind, "velocity": [a.velocity[0], a.velocity[1]]} for a in scene.agents
    ])
    for i, rig in enumerate(scene.rigs):
        img = render_view(scene, rig)
        T.save_tensor(out / "images" / f"cam_{i:02d}.tnsr", img)
    rio.write_pgm(out / "gt_map.pgm", scene.gt_map.argmax(axis=0).astype(np.uint8))
    rio.write_pgm(out / "gt_object.pgm", scene.gt_obj.argmax(axis=0).astype(np.uint8))
    rio.dump_json(out / "gt_classes.json", {"map": list(MAP_CLASSES),
                                            "object": list(OBJECT_CLASSES) + ["background"]})
    _write_meta(out, "simulate", scene.config.seed,
                {"agents": len(scene.agents), "cameras": len(scene.rigs)})
    print(f"simulated {len(scene.agents)} agents, {len(scene.rigs)} cameras -> {out}")
    return 0


def _load_bundle(bundle: Path):
    scenario = load_scenario(_require(bundle / "scenario.json"))
    rigs = load_rigs(_require(bundle / "rigs.json"))
    images = []
    for i in range(len(rigs)):
        images.append(T.load_tensor(_require(bundle / "images" / f"cam_{i:02d}.tnsr")).data)
    gt_boxes = load_detections(_require(bundle / "gt_boxes.json"))
    return scenario, rigs, images, gt_boxes


def cmd_encode(args) -> int:
    bundle = _require(args.bundle)
    scenario, rigs, images, _ = _load_bundle(bundle)
    seed = scenario.seed if args.seed is None else args.seed
    cfg = _load_model_config(args.config)
    model = PerceptionModel(scenario.grid, cfg, seed=seed)
    corruption = {"mode": "none"}
    if args.corrupt == "auto":
        images, spec = corrupt_test(images, [not r.is_dummy for r in rigs],
                                    f"scene-{scenario.seed}")
        corruption = {"mode": spec.mode, "camera_index": spec.camera_index,
                      "blur_sigma": spec.blur_sigma}
    with T.no_grad():
        fwd = model.forward(images, rigs)
    bev = fwd.encoded.bev.data
    if not np.isfinite(bev).all():
        raise NumericError("encoder produced non-finite BEV features")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    T.save_tensor(out / "bev.tnsr", fwd.encoded.bev)
    T.save_tensor(out / "fusion_weights.tnsr", fwd.encoded.fusion.weights)
    T.save_tensor(out / "fusion_logits.tnsr", fwd.encoded.fusion.logits)
    save_detections(out / "detections.json", model.detections(fwd))
    _write_meta(out, "encode", seed, {"corruption": corruption,
                                      "uncovered_cells": int(fwd.encoded.fusion.uncovered.sum())})
    print(f"encoded {scenario.grid.num_cells} cells from {len(rigs)} cameras -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    preds = load_detections(_require(args.detections))
    gts = load_detections(_require(args.gt))
    report = M.evaluate(preds, gts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    M.save_report_csv(out / "report.csv", report)
    M.save_report_json(out / "report.json", report)
    _write_meta(out, "evaluate", 0, {"num_preds": len(preds), "num_gts": len(gts)})
    print(f"mAP {report.mean_ap:.4f}  NDS {report.nds:.4f} -> {out}")
    return 0


def cmd_gradcheck(args) -> int:
    scene = _scene_from_scenario(args.scenario, args.grid, args.seed)
    cfg = _load_model_config(args.config)
    model = PerceptionModel(scene.config.grid, cfg, seed=scene.config.seed)
    jiggle = substream(scene.config.seed, "gradcheck-jiggle")
    for p in model.params:
        p.tensor.data += jiggle.normal(0.0, 0.05, p.tensor.shape)
    images = [render_view(scene, rig).data for rig in scene.rigs]
    gt_boxes = [a.box for a in scene.agents]

    def objective():
        fwd = model.forward(images, scene.rigs)
        total, _ = model.loss(fwd, gt_boxes, scene.gt_map, scene.gt_obj)
        return total

    report = T.grad_check(objective, model.params, eps=args.eps, tol=args.tol,
                          max_elements=args.max_elements,
                          rng=substream(scene.config.seed, "gradcheck-pick"))
    rows = []
    for entry in sorted(report.entries, key=lambda e: -e.max_rel_err):
        status = "ok" if entry.max_rel_err <= args.tol else "FAIL"
        print(f"{status:4s} {entry.name:48s} rel_err {entry.max_rel_err:.3e} "
              f"(analytic {entry.analytic:+.6e}, fd {entry.finite_diff:+.6e})")
        rows.append({"name": entry.name, "max_rel_err": entry.max_rel_err,
                     "checked": entry.checked, "analytic": entry.analytic,
                     "finite_diff": entry.finite_diff})
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rio.dump_json(out / "gradcheck.json", {"tol": args.tol, "eps": args.eps,
                                               "passed": report.passed, "entries": rows})
        _write_meta(out, "gradcheck", scene.config.seed)
    print(f"max rel err {report.max_rel_err:.3e} over {len(report.entries)} parameters "
          f"(tol {args.tol:g})")
    return 0 if report.passed else 4


def cmd_train_toy(args) -> int:
    scene = _scene_from_scenario(args.scenario, args.grid, args.seed)
    cfg = _load_model_config(args.config)
    model = PerceptionModel(scene.config.grid, cfg, seed=scene.config.seed)
    rows = train_toy(scene, model, steps=args.steps, lr=args.lr, p_m=args.p_m,
                     cosine=args.cosine)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "loss_curve.csv", "w") as fh:
        fh.write("step,lr,total,cls,reg,seg_map,seg_obj\n")
        for r in rows:
            fh.write(f"{r.step},{r.lr!r},{r.total!r},{r.cls!r},{r.reg!r},"
                     f"{r.seg_map!r},{r.seg_obj!r}\n")
    with T.no_grad():
        fwd = model.forward([render_view(scene, rig).data for rig in scene.rigs], scene.rigs)
        final = model.detections(fwd)
    save_detections(out / "final_detections.json", final)
    _write_meta(out, "train-toy", scene.config.seed,
                {"steps": args.steps, "lr": args.lr, "p_m": args.p_m,
                 "initial_loss": rows[0].total if rows else None,
                 "final_loss": rows[-1].total if rows else None})
    if rows:
        print(f"trained {args.steps} steps: loss {rows[0].total:.4f} -> {rows[-1].total:.4f}")
    return 0


def cmd_weights_dump(args) -> int:
    bundle = _require(args.bundle)
    scenario, rigs, images, _ = _load_bundle(bundle)
    seed = scenario.seed if args.seed is None else args.seed
    cfg = _load_model_config(args.config)
    model = PerceptionModel(scenario.grid, cfg, seed=seed)
    with T.no_grad():
        fwd = model.forward(images, rigs)
    weights = fwd.encoded.fusion.weights.data
    if not np.isfinite(weights).all():
        raise NumericError("fusion weights are non-finite")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h, w = scenario.grid.cells
    sidecar = []
    for n in range(len(rigs)):
        heat = weights[:, n].reshape(h, w)
        img, lo, hi = rio.quantize_heatmap(heat)
        name = f"camera_{n:02d}.pgm"
        rio.write_pgm(out / name, img)
        sidecar.append({"camera": n, "file": name, "min": lo, "max": hi,
                        "dummy": bool(rigs[n].is_dummy)})
    rio.dump_json(out / "weights_meta.json", sidecar)
    _write_meta(out, "weights-dump", seed)
    print(f"dumped {len(rigs)} weight heatmaps -> {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rbev",
        description="Relation-aware multi-camera BEV fusion: synthetic scenes, "
                    "encoding, evaluation, and verification tools.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, bundle=False, scenario=False, out_required=True):
        p.add_argument("--out", required=out_required, default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the run seed")
        p.add_argument("--config", default=None, help="model hyperparameter JSON")
        if bundle:
            p.add_argument("--bundle", required=True, help="directory from `rbev simulate`")
        if scenario:
            p.add_argument("--scenario", required=True, help="scenario JSON path")
            p.add_argument("--grid", choices=["m2i", "desk"], default=None,
                           help="override the scenario grid with a preset")

    p = sub.add_parser("simulate", help="generate a synthetic scene bundle")
    common(p, scenario=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("encode", help="fuse a bundle into BEV features and detections")
    common(p, bundle=True)
    p.add_argument("--corrupt", choices=["none", "auto"], default="none",
                   help="'auto' applies the deterministic test-time corruption")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("evaluate", help="score detections against ground truth")
    p.add_argument("--detections", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    common(p, scenario=True, out_required=False)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--max-elements", type=int, default=4,
                   help="elements probed per parameter tensor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-toy", help="plain gradient descent on one scene")
    common(p, scenario=True)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--p-m", type=float, default=0.25, dest="p_m",
                   help="per-step view masking probability")
    p.add_argument("--cosine", action="store_true", help="cosine-anneal the learning rate")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("weights-dump", help="per-camera fusion-weight heatmaps (PGM)")
    common(p, bundle=True)
    p.set_defaults(func=cmd_weights_dump)
    return parser


def _apply_thread_cap():
    cap = os.environ.get("RBEV_THREADS")
    if cap and kernels.USE_NUMBA:
        import numba

        numba.set_num_threads(max(1, int(cap)))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_thread_cap()
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (RbevError, FileNotFoundError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
