"""Command-line entry point (`vl`).

Subcommands cover the full workflow: synthesize a scene, compute
database features, augment with virtual views, localize queries,
evaluate accuracy, run the four-way ablation, train the distillation
student, and check its gradients.  Exit codes: 0 success, 1 usage or
config error, 2 data error.  All randomness derives from --seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import distill, evaluation, fileio, scene_db, synth
from .errors import ConfigError, VlocError
from .pipeline import (PreparedScene, augment_database, benchmark_config,
                       generate_augmentation_grid, load_virtuals,
                       localize_batch, prepare_reals_only, save_virtuals,
                       write_results_jsonl)
from .retrieval import RetrievalIndex, load_index, save_index

USAGE_ERROR = 1
DATA_ERROR = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


# -- scene directory layout --------------------------------------------------

def save_scene_dir(scene: synth.SyntheticScene, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    scene_db.save(scene.database, out_dir / "db")
    qdir = out_dir / "queries"
    qdir.mkdir(exist_ok=True)
    gts = {}
    for q in scene.queries:
        fileio.write_ppm(qdir / f"{q.id}.ppm", q.image)
        gts[q.id] = q.pose
    evaluation.write_gt_csv(out_dir / "gt.csv", gts)
    with open(out_dir / "scene.json", "w") as fh:
        json.dump({"seed": scene.seed,
                   "params": dataclasses.asdict(scene.params)},
                  fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_scene_json(scene_dir: Path) -> synth.SyntheticScene:
    """Regenerate the full synthetic scene recorded in scene.json."""
    meta_path = scene_dir / "scene.json"
    if not meta_path.is_file():
        raise OSError(f"{meta_path} not found; not a synthesized scene?")
    with open(meta_path) as fh:
        meta = json.load(fh)
    params = meta["params"]
    params["room"] = tuple(params["room"])
    params["rect_size"] = tuple(params["rect_size"])
    return synth.generate_scene(meta["seed"], synth.SceneParams(**params))


def load_queries(scene_dir: Path) -> list[tuple[str, np.ndarray]]:
    qdir = scene_dir / "queries"
    if not qdir.is_dir():
        raise OSError(f"{qdir} not found")
    out = []
    for path in sorted(qdir.glob("*.ppm")):
        out.append((path.stem, fileio.read_ppm(path)))
    if not out:
        raise OSError(f"no query images under {qdir}")
    return out


def _load_prepared(scene_dir: Path, reals_only: bool) -> PreparedScene:
    db = scene_db.load(scene_dir / "db")
    scene_db.compute_features(db)
    index_path = scene_dir / "index.vlix"
    virt_path = scene_dir / "virtuals.vlvf"
    if not reals_only and index_path.is_file() and virt_path.is_file():
        return PreparedScene(db, load_index(index_path),
                             load_virtuals(virt_path))
    return prepare_reals_only(db)


# -- subcommands --------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.benchmark:
        params = synth.low_benchmark_params(num_db=args.num_db or 50,
                                            num_queries=args.num_queries or 40)
    else:
        params = synth.SceneParams(
            room=tuple(args.room), num_db=args.num_db or 50,
            num_queries=args.num_queries or 20, overlap=args.overlap,
            width=args.width, height=args.height,
            focal=args.focal or (110.0 * args.width / 128))
    scene = synth.generate_scene(args.seed, params)
    save_scene_dir(scene, Path(args.out))
    print(f"scene written to {args.out}: {len(scene.database)} keyframes, "
          f"{len(scene.queries)} queries")
    return 0


def cmd_build_db(args) -> int:
    scene_dir = Path(args.scene)
    db = scene_db.load(scene_dir / "db")
    scene_db.compute_features(db, max_keypoints=args.max_keypoints,
                              gem_p=args.gem_p)
    scene_db.save(db, scene_dir / "db")
    counts = [len(kf.local_features) for kf in db.keyframes]
    print(f"features for {len(db)} keyframes "
          f"(keypoints min/median/max: {min(counts)}/"
          f"{int(np.median(counts))}/{max(counts)})")
    return 0


def _load_student(cfg: dict, args):
    path = getattr(args, "student", None) or cfg["pipeline"]["student_path"]
    if cfg["pipeline"]["feature_mode"] == "distilled" or (
            getattr(args, "feature_mode", None) == "distilled"):
        if not path:
            raise ConfigError("distilled feature mode needs --student")
        return distill.load_student(path)
    return None


def cmd_augment(args) -> int:
    cfg = config_mod.load_config(args.config)
    config_mod.set_override(cfg, "pipeline.feature_mode", args.feature_mode)
    config_mod.set_override(cfg, "run.seed", args.seed)
    student = _load_student(cfg, args)
    pcfg = config_mod.pipeline_config(cfg, student=student,
                                      threads=args.threads)
    scene_dir = Path(args.scene)
    db = scene_db.load(scene_dir / "db")
    scene_db.compute_features(db, max_keypoints=pcfg.max_keypoints,
                              gem_p=pcfg.gem_p)
    grid = generate_augmentation_grid(db, pcfg.augmentation)
    prepared = augment_database(db, grid, pcfg)
    save_index(prepared.index, scene_dir / "index.vlix")
    save_virtuals(scene_dir / "virtuals.vlvf", prepared.virtuals)
    print(f"augmented: {len(grid)} grid poses -> "
          f"{len(prepared.virtuals)} valid virtual views; index size "
          f"{len(prepared.index)}")
    return 0


def cmd_localize(args) -> int:
    cfg = config_mod.load_config(args.config)
    config_mod.set_override(cfg, "retrieval.k", args.k)
    config_mod.set_override(cfg, "matching.ratio", args.ratio)
    config_mod.set_override(cfg, "run.seed", args.seed)
    if args.no_refine:
        cfg["pipeline"]["refine"] = False
    student = _load_student(cfg, args)
    pcfg = config_mod.pipeline_config(cfg, student=student,
                                      threads=args.threads,
                                      seed=args.seed)
    scene_dir = Path(args.scene)
    prepared = _load_prepared(scene_dir, args.reals_only)
    queries = load_queries(scene_dir)
    results = localize_batch(queries, prepared, pcfg,
                             seed=cfg["run"]["seed"])
    write_results_jsonl(args.out, results)
    n_ok = sum(1 for r in results if r.final.ok)
    print(f"localized {len(results)} queries ({n_ok} ok) -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    from .pipeline import read_results_jsonl
    records = read_results_jsonl(args.results)
    gts = evaluation.read_gt_csv(args.gt)
    triple = evaluation.evaluate_accuracy(records, gts)
    print(f"accuracy (0.25m,2°)/(0.5m,5°)/(5m,10°): {triple}")
    if args.report_dir:
        evaluation.save_report(args.report_dir, [(args.name, triple)])
    return 0


def cmd_ablate(args) -> int:
    scene_dir = Path(args.scene)
    db = scene_db.load(scene_dir / "db")
    scene_db.compute_features(db)
    queries = load_queries(scene_dir)
    gts = evaluation.read_gt_csv(scene_dir / "gt.csv")

    pcfg = benchmark_config(threads=args.threads or 1)
    pcfg.ransac.seed = args.seed
    student = None
    if args.student:
        student = distill.load_student(args.student)

    reals = prepare_reals_only(db)
    grid = generate_augmentation_grid(db, pcfg.augmentation)
    prepared_det = augment_database(db, grid, pcfg)
    if student is not None:
        import dataclasses as dc
        distilled_cfg = dc.replace(pcfg, feature_mode="distilled",
                                   student=student)
        prepared_va = augment_database(db, grid, distilled_cfg)
        va_cfg = distilled_cfg
    else:
        prepared_va, va_cfg = prepared_det, pcfg

    def run(prepared, cfg, refine):
        import dataclasses as dc
        cfg = dc.replace(cfg, refine=refine)
        results = localize_batch(queries, prepared, cfg, seed=args.seed)
        from .pipeline import result_record
        return evaluation.evaluate_accuracy(
            [result_record(r) for r in results], gts)

    runs = [
        ("baseline", run(reals, pcfg, False)),
        ("+VA", run(prepared_va, va_cfg, False)),
        ("+VA+PR", run(prepared_va, va_cfg, True)),
        ("VA w/o local", run(prepared_det, pcfg, False)),
    ]
    text = evaluation.save_report(args.out, runs)
    print(text, end="")
    return 0


def cmd_distill(args) -> int:
    scene_dir = Path(args.scene)
    scene = load_scene_json(scene_dir)
    scene_db.compute_features(scene.database)
    pairs = distill.sample_training_pairs(scene, args.pairs, seed=args.seed)
    student = distill.init_student(seed=args.seed,
                                   freeze_head=not args.train_heads)
    distill.fit_heads(student, pairs)
    student, history = distill.train(student, pairs, epochs=args.epochs,
                                     batch_size=args.batch_size, lr=args.lr,
                                     seed=args.seed)
    distill.save_student(args.out, student)
    history_path = args.history or str(Path(args.out).with_suffix(".loss.csv"))
    distill.save_loss_history(history_path, history)
    first = history[0][1] + history[0][2]
    last = history[-1][1] + history[-1][2]
    print(f"trained {len(history)} steps on {len(pairs)} pairs; "
          f"combined loss {first:.4f} -> {last:.4f}; saved {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    params = synth.SceneParams(num_db=6, num_queries=0, width=64, height=48,
                               focal=60.0)
    scene = synth.generate_scene(args.seed, params)
    scene_db.compute_features(scene.database)
    pairs = distill.sample_training_pairs(scene, 1, seed=args.seed)
    student = distill.init_student(seed=args.seed, freeze_head=False)
    err = distill.gradient_check(student, pairs[0], epsilon=args.epsilon,
                                 seed=args.seed)
    print(f"max relative gradient error: {err:.3e}")
    return 0 if err < 1e-4 else DATA_ERROR


# -- parser -------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="vl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--config", default=None, help="TOML config file")

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--overlap", choices=["high", "low"], default="high")
    p.add_argument("--num-db", type=int, default=None)
    p.add_argument("--num-queries", type=int, default=None)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--focal", type=float, default=None)
    p.add_argument("--room", type=float, nargs=3, default=[10.0, 10.0, 3.0])
    p.add_argument("--benchmark", action="store_true",
                   help="use the low-overlap benchmark layout")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-db", help="compute database features")
    p.add_argument("--scene", required=True)
    p.add_argument("--max-keypoints", type=int, default=1024)
    p.add_argument("--gem-p", type=float, default=3.0)
    p.set_defaults(func=cmd_build_db)

    p = sub.add_parser("augment", help="render virtual views, build index")
    p.add_argument("--scene", required=True)
    p.add_argument("--feature-mode", choices=["deterministic", "distilled"],
                   default=None)
    p.add_argument("--student", default=None)
    common(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("localize", help="localize the scene's queries")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reals-only", action="store_true",
                   help="ignore any augmentation index")
    p.add_argument("--no-refine", action="store_true")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--feature-mode", choices=["deterministic", "distilled"],
                   default=None)
    p.add_argument("--student", default=None)
    common(p)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("evaluate", help="accuracy of a results file")
    p.add_argument("--results", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report-dir", default=None)
    p.add_argument("--name", default="run")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate",
                       help="baseline / +VA / +VA+PR / VA w/o local report")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--student", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("distill", help="train the feature student")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, default=48)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=24)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--history", default=None)
    p.add_argument("--train-heads", action="store_true",
                   help="do not freeze the fitted output layers")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else USAGE_ERROR
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"vl: config error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (VlocError, OSError, ValueError) as exc:
        print(f"vl: {type(exc).__name__}: {exc}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
