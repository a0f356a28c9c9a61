"""Command-line entry point: ``nucleopipe <command> ...``.

Exit codes: 0 success, 2 missing/unreadable input (and usage errors),
3 shape/format mismatch, 4 unpaired evaluation files.

Defaults for most flags can be put in a ``key=value`` file named by the
``NUCLEOPIPE_CONFIG`` environment variable (keys: edge_threshold,
semantic_threshold, min_area, uncontrolled, base_filters, stages,
lambda_a, lambda_b, lambda_c, class_weights, per_image_mpq, jobs).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import classify, instseg, losses, maps, metrics, network, synth

log = logging.getLogger("nucleopipe")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_MISMATCH = 3
EXIT_PAIRING = 4

CONFIG_ENV = "NUCLEOPIPE_CONFIG"
INSTANCE_SUFFIX = ".inst.pgm"
CLASS_SUFFIX = ".cls.pgm"

# overlay tint per class id; background-only instances drawn white
PALETTE = np.array(
    [[255, 255, 255], [230, 40, 40], [40, 200, 60], [40, 90, 230], [240, 220, 30], [230, 120, 20]], dtype=np.uint8
)


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _read(path: Path, kind: str) -> np.ndarray:
    try:
        return maps.read_map(path, kind)
    except FileNotFoundError:
        raise CliError(EXIT_INPUT, f"missing input: {path}") from None
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot read {path}: {exc}") from None
    except (maps.MapFormatError, maps.MapValidationError) as exc:
        code = getattr(exc, "code", "invalid")
        raise CliError(EXIT_MISMATCH, f"{path}: {code}: {exc}") from None


def _same_shape(*arrays: np.ndarray, what: str) -> None:
    shapes = {a.shape[:2] for a in arrays}
    if len(shapes) > 1:
        raise CliError(EXIT_MISMATCH, f"{what}: spatial shapes differ {sorted(shapes)}")


# --------------------------------------------------------------------------
# configuration


def load_defaults(environ=os.environ) -> dict[str, str]:
    path = environ.get(CONFIG_ENV)
    if not path:
        return {}
    try:
        return losses.parse_kv_config(Path(path).read_text())
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"{CONFIG_ENV}={path}: {exc}") from None
    except ValueError as exc:
        raise CliError(EXIT_MISMATCH, f"{CONFIG_ENV}={path}: {exc}") from None


def _flag(value: str) -> bool:
    return value.strip().lower() in ("1", "true", "yes", "on")


def _probability(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"{value} is not in [0, 1]")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"{value} must be >= 1")
    return value


def watershed_config(args) -> instseg.WatershedConfig:
    return instseg.WatershedConfig(
        edge_threshold=args.edge_threshold,
        min_instance_area=args.min_area,
        semantic_threshold=args.semantic_threshold,
        controlled=not args.uncontrolled,
    )


def loss_weights(args, defaults: dict[str, str]) -> losses.LossWeights | None:
    """Loss weights from config; None means derive class weights from data."""
    try:
        lw = losses.weights_from_config(defaults)
    except ValueError as exc:
        raise CliError(EXIT_MISMATCH, f"loss weights: {exc}") from None
    if args.equal_class_weights:
        return lw.with_equal_class_weights()
    return lw if "class_weights" in defaults else None


# --------------------------------------------------------------------------
# commands


def _network_config(args, image: np.ndarray) -> network.NetworkConfig:
    try:
        return network.NetworkConfig(
            base_filters=args.base_filters, stages=args.stages, input_size=tuple(image.shape[:2])
        )
    except ValueError as exc:
        raise CliError(EXIT_MISMATCH, str(exc)) from None


def _load_weights(path: Path) -> network.WeightBundle:
    try:
        return network.read_weights(path)
    except FileNotFoundError:
        raise CliError(EXIT_INPUT, f"missing weights file: {path}") from None
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot read weights {path}: {exc}") from None
    except maps.MapFormatError as exc:
        raise CliError(EXIT_MISMATCH, f"{path}: {exc.code}: {exc}") from None


def run_infer(image_path: Path, weights: network.WeightBundle, out_dir: Path, args) -> network.NetworkOutput:
    image = _read(image_path, "rgb")
    cfg = _network_config(args, image)
    try:
        out = network.forward(image, weights, cfg)
    except network.WeightError as exc:
        raise CliError(EXIT_MISMATCH, f"weights do not fit network: {exc}") from None
    out_dir.mkdir(parents=True, exist_ok=True)
    maps.write_map(out_dir / "semantic.fmap", out.semantic, "prob")
    maps.write_map(out_dir / "edges.fmap", out.edges, "prob")
    maps.write_map(out_dir / "classes.fmap", out.classes, "classprob")
    return out


def cmd_infer(args, defaults) -> int:
    weights = _load_weights(args.weights)
    run_infer(args.image, weights, args.out, args)
    log.info("wrote semantic/edges/classes maps to %s", args.out)
    return EXIT_OK


def run_instances(semantic: np.ndarray, edges: np.ndarray, args) -> np.ndarray:
    _same_shape(semantic, edges, what="semantic vs edges")
    return instseg.segment_instances(semantic, edges, watershed_config(args))


def cmd_instances(args, defaults) -> int:
    semantic = _read(args.semantic, "prob")
    edges = _read(args.edges, "prob")
    labels = run_instances(semantic, edges, args)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    maps.write_map(args.out, labels, "labels")
    print(f"instances: {int(labels.max(initial=0))}")
    return EXIT_OK


def run_classify(labels: np.ndarray, class_probs: np.ndarray, out_dir: Path, args, stem: str = "") -> np.ndarray:
    _same_shape(labels, class_probs, what="instances vs classes")
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.no_grouping:
        painted = maps.argmax_classes(class_probs)
    else:
        records, painted = classify.classify_instances(labels, maps.argmax_classes(class_probs), class_probs.shape[-1])
        classify.write_records_csv(out_dir / f"{stem}records.csv", records)
    maps.write_map(out_dir / f"{stem}classes.pgm", painted, "classes")
    return painted


def cmd_classify(args, defaults) -> int:
    labels = _read(args.instances, "labels")
    class_probs = _read(args.classes, "classprob")
    run_classify(labels, class_probs, args.out, args)
    return EXIT_OK


def overlay(image: np.ndarray, labels: np.ndarray, painted: np.ndarray) -> np.ndarray:
    """Instance boundaries tinted by class over the input image."""
    out = image.copy()
    boundary = synth.edges_from_labels(labels)
    out[boundary] = PALETTE[np.minimum(painted[boundary], len(PALETTE) - 1)]
    return out


def _pipeline_one(image_path: Path, weights, out_dir: Path, args) -> int:
    out = run_infer(image_path, weights, out_dir, args)
    labels = run_instances(out.semantic, out.edges, args)
    maps.write_map(out_dir / "instances.pgm", labels, "labels")
    painted = run_classify(labels, out.classes, out_dir, args)
    image = maps.read_ppm(image_path)
    maps.write_ppm(out_dir / "overlay.ppm", overlay(image, labels, painted))
    return int(labels.max(initial=0))


def cmd_pipeline(args, defaults) -> int:
    weights = _load_weights(args.weights)
    if len(args.images) == 1:
        jobs = [(args.images[0], args.out)]
    else:
        jobs = [(p, args.out / p.stem) for p in args.images]
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        counts = list(pool.map(lambda job: _pipeline_one(job[0], weights, job[1], args), jobs))
    for (path, _), k in zip(jobs, counts):
        print(f"{path}: {k} instances")
    return EXIT_OK


def _collect(root: Path) -> dict[str, Path]:
    if not root.is_dir():
        raise CliError(EXIT_INPUT, f"not a directory: {root}")
    return {
        str(p.relative_to(root))[: -len(INSTANCE_SUFFIX)]: p
        for p in sorted(root.rglob(f"*{INSTANCE_SUFFIX}"))
    }


def _load_sample(gt_path: Path, pred_path: Path) -> metrics.Sample:
    sides = []
    for path in (gt_path, pred_path):
        labels = _read(path, "labels")
        cls_path = path.with_name(path.name[: -len(INSTANCE_SUFFIX)] + CLASS_SUFFIX)
        if cls_path.exists():
            class_map = _read(cls_path, "classes")
            _same_shape(labels, class_map, what=str(path))
            sides.append((labels, classify.instance_classes(labels, class_map)))
        else:
            sides.append((labels, {}))
    _same_shape(sides[0][0], sides[1][0], what=f"{gt_path} vs {pred_path}")
    return metrics.Sample(sides[0][0], sides[0][1], sides[1][0], sides[1][1])


def evaluate_dirs(gt_dir: Path, pred_dir: Path, per_image: bool = False, jobs: int = 1):
    """Group paired samples by tissue (first path component) and score them.

    Returns ``[(tissue, n_images, MPQResult, bPQ), ...]`` with the all-tissue
    average appended as ``"Average"``.
    """
    gt_files = _collect(gt_dir)
    pred_files = _collect(pred_dir)
    orphans = sorted(set(gt_files) ^ set(pred_files))
    if orphans:
        raise CliError(EXIT_PAIRING, "unpaired files: " + ", ".join(orphans))
    keys = sorted(gt_files)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        samples = list(pool.map(lambda k: _load_sample(gt_files[k], pred_files[k]), keys))

    groups: dict[str, list[metrics.Sample]] = {}
    for key, sample in zip(keys, samples):
        tissue = key.split("/", 1)[0] if "/" in key else "all"
        groups.setdefault(tissue, []).append(sample)
    rows = []
    for tissue in sorted(groups):
        group = groups[tissue]
        rows.append(
            (tissue, len(group), metrics.mpq_dataset(group, per_image=per_image), metrics.bpq_dataset(group, per_image))
        )
    if rows:
        mpq_avg = float(np.mean([r[2].mpq for r in rows]))
        bpq_avg = float(np.mean([r[3] for r in rows]))
        per_class = {c: float(np.mean([r[2].per_class[c] for r in rows])) for c in rows[0][2].per_class}
        rows.append(("Average", len(samples), metrics.MPQResult(per_class, mpq_avg), bpq_avg))
    return rows


def cmd_evaluate(args, defaults) -> int:
    rows = evaluate_dirs(args.gt, args.pred, per_image=args.per_image_mpq, jobs=args.jobs)
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["tissue", "images", "mPQ", "bPQ"])
        for tissue, n, mres, bpq in rows:
            writer.writerow([tissue, n, f"{mres.mpq:.4f}", f"{bpq:.4f}"])
    if args.per_class:
        names = maps.CLASS_NAMES[1:]
        with open(args.out / "per_class.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["tissue", *names])
            for tissue, _, mres, _ in rows:
                writer.writerow([tissue, *[f"{mres.per_class[c]:.3f}" for c in range(1, len(names) + 1)]])
    for tissue, n, mres, bpq in rows:
        print(f"{tissue}: images={n} mPQ={mres.mpq:.4f} bPQ={bpq:.4f}")
    return EXIT_OK


def cmd_synth(args, defaults) -> int:
    try:
        spec = synth.SceneSpec.load(args.spec) if args.spec else synth.SceneSpec()
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot read scene spec: {exc}") from None
    overrides = {k: v for k, v in (("count", args.count), ("overlap", args.overlap)) if v is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        spec = synth.SceneSpec(**{**spec.__dict__, **overrides})
        image, labels, class_map = synth.generate_scene(spec)
    except (ValueError, synth.InfeasibleSceneError) as exc:
        raise CliError(EXIT_MISMATCH, str(exc)) from None
    args.out.mkdir(parents=True, exist_ok=True)
    name = args.name
    maps.write_map(args.out / f"{name}.ppm", image, "rgb")
    maps.write_map(args.out / f"{name}{INSTANCE_SUFFIX}", labels, "labels")
    maps.write_map(args.out / f"{name}{CLASS_SUFFIX}", class_map, "classes")
    if args.oracle_maps:
        semantic, edges, probs = synth.oracle_maps(labels, class_map)
        maps.write_map(args.out / f"{name}.semantic.fmap", semantic, "prob")
        maps.write_map(args.out / f"{name}.edges.fmap", edges, "prob")
        maps.write_map(args.out / f"{name}.classes.fmap", probs, "classprob")
    print(f"{name}: {int(labels.max(initial=0))} nuclei")
    return EXIT_OK


def cmd_init_weights(args, defaults) -> int:
    try:
        cfg = network.NetworkConfig(base_filters=args.base_filters, stages=args.stages)
    except ValueError as exc:
        raise CliError(EXIT_MISMATCH, str(exc)) from None
    bundle = network.zero_weights(cfg) if args.zeros else network.init_weights(cfg, args.seed or 0)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    network.write_weights(args.out, bundle)
    print(f"{args.out}: {len(bundle)} tensors, {bundle.size} parameters")
    return EXIT_OK


def cmd_loss(args, defaults) -> int:
    semantic = _read(args.semantic, "prob")
    edges = _read(args.edges, "prob")
    class_probs = _read(args.classes, "classprob")
    gt_labels = _read(args.gt_instances, "labels")
    gt_classes = _read(args.gt_classes, "classes")
    _same_shape(semantic, edges, class_probs, gt_labels, gt_classes, what="loss inputs")
    lw = loss_weights(args, defaults)
    if lw is None:
        derived = losses.inverse_frequency_weights([gt_classes], class_probs.shape[-1])
        lw = dataclasses.replace(losses.weights_from_config(defaults), class_weights=tuple(derived.tolist()))
    targets = (
        (gt_labels > 0).astype(np.float64),
        synth.edges_from_labels(gt_labels).astype(np.float64),
        gt_classes,
    )
    try:
        result = losses.total_loss((semantic, edges, class_probs), targets, lw)
    except ValueError as exc:
        raise CliError(EXIT_MISMATCH, str(exc)) from None
    print(json.dumps({**result.__dict__, "class_weights": list(lw.class_weights)}, indent=2))
    return EXIT_OK


def cmd_params(args, defaults) -> int:
    cfg = network.NetworkConfig(base_filters=args.base_filters, stages=args.stages)
    count = network.param_count(cfg)
    print(f"{count} parameters ({count / network.REFERENCE_PARAM_COUNT:.3f} x 2.74M)")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser(defaults: dict[str, str]) -> argparse.ArgumentParser:
    d = defaults
    parser = argparse.ArgumentParser(prog="nucleopipe", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def net_flags(p):
        p.add_argument("--base-filters", type=_positive_int, default=int(d.get("base_filters", 16)))
        p.add_argument("--stages", type=_positive_int, default=int(d.get("stages", 4)))

    def ws_flags(p):
        p.add_argument("--edge-threshold", type=_probability, default=float(d.get("edge_threshold", 0.10)))
        p.add_argument("--semantic-threshold", type=_probability, default=float(d.get("semantic_threshold", 0.5)))
        p.add_argument("--min-area", type=_positive_int, default=int(d.get("min_area", 3)))
        p.add_argument(
            "--uncontrolled",
            action="store_true",
            default=_flag(d.get("uncontrolled", "0")),
            help="plain watershed on the thresholded semantic map (ablation)",
        )

    def grouping_flag(p):
        p.add_argument(
            "--no-grouping", action="store_true", help="emit the raw per-pixel argmax ClassMap only (ablation)"
        )

    jobs_default = int(d.get("jobs", 1))

    p = sub.add_parser("infer", help="run the three-head network on one PPM tile")
    p.add_argument("image", type=Path)
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path("."))
    net_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("instances", help="marker-controlled watershed on semantic + edge maps")
    p.add_argument("semantic", type=Path)
    p.add_argument("edges", type=Path)
    p.add_argument("--out", type=Path, default=Path("instances.pgm"))
    ws_flags(p)
    p.set_defaults(func=cmd_instances)

    p = sub.add_parser("classify", help="pixel grouping of class probabilities per instance")
    p.add_argument("instances", type=Path)
    p.add_argument("classes", type=Path)
    p.add_argument("--out", type=Path, default=Path("."))
    grouping_flag(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="bPQ / mPQ over paired *.inst.pgm (+ *.cls.pgm) files")
    p.add_argument("gt", type=Path)
    p.add_argument("pred", type=Path)
    p.add_argument("--out", type=Path, default=Path("."))
    p.add_argument("--per-class", action="store_true", help="also write per_class.csv")
    p.add_argument("--per-image-mpq", action="store_true", default=_flag(d.get("per_image_mpq", "0")))
    p.add_argument("--jobs", type=_positive_int, default=jobs_default)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", help="infer -> instances -> classify, plus an overlay PPM")
    p.add_argument("images", type=Path, nargs="+")
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path("out"))
    p.add_argument("--jobs", type=_positive_int, default=jobs_default)
    net_flags(p)
    ws_flags(p)
    grouping_flag(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("synth", help="generate a seeded synthetic scene")
    p.add_argument("--out", type=Path, default=Path("."))
    p.add_argument("--name", default="scene")
    p.add_argument("--spec", type=Path, help="key=value scene description")
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--overlap", type=float)
    p.add_argument("--oracle-maps", action="store_true", help="also write ideal semantic/edge/class maps")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("init-weights", help="write a WBDL weight bundle")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--zeros", action="store_true")
    net_flags(p)
    p.set_defaults(func=cmd_init_weights)

    p = sub.add_parser("loss", help="weighted three-head loss of predicted maps against ground truth")
    p.add_argument("--semantic", type=Path, required=True)
    p.add_argument("--edges", type=Path, required=True)
    p.add_argument("--classes", type=Path, required=True)
    p.add_argument("--gt-instances", type=Path, required=True)
    p.add_argument("--gt-classes", type=Path, required=True)
    p.add_argument("--equal-class-weights", action="store_true", help="all class weights 1 (ablation)")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("params", help="parameter count of a network configuration")
    net_flags(p)
    p.set_defaults(func=cmd_params)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        defaults = load_defaults()
    except CliError as exc:
        print(f"nucleopipe: error: {exc}", file=sys.stderr)
        return exc.code
    parser = build_parser(defaults)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args, defaults)
    except CliError as exc:
        print(f"nucleopipe: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
