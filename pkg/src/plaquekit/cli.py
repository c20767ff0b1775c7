"""Command-line front end: ``plaquekit {normalize,enhance,patchify,evaluate,report}``.

Every run writes ``manifest.json`` (or ``report.json``) into its output
directory with the fully resolved configuration. The manifest is written
first with ``"status": "incomplete"`` and rewritten as ``"complete"`` at the
end, so an interrupted run is recognisable.

Options can also come from ``--config FILE``, a JSON object whose keys are
option names (``t_low`` or ``t-low``), either flat or under a key named after
the subcommand. Precedence: built-in defaults < config file < command-line
flags.

Exit status: 0 success, 1 processing error in at least one file, 2 usage
error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import __version__
from .enhance import EnhanceParams, enhance_image, enhancement_stages
from .errors import (
    EmptyInput,
    OverlappingSplit,
    PlaquekitError,
    UnassignedSubject,
    UnpairedFiles,
)
from .metrics import PatchMetrics, ReportParams, aggregate_report, evaluate_pair
from .patches import (
    PatchWarning,
    augment_records,
    converters,
    extract_patches,
    parse_annotations,
    split_by_subject,
)
from .raster import ColorSpace, PlanarImage, read_image, split_channels, write_image
from .stain import Method, NormalizationTarget, StainParams, fit_target, normalize

log = logging.getLogger("plaquekit")

IMAGE_SUFFIXES = (".png", ".tif", ".tiff")
WORKERS_ENV = "PLAQUEKIT_WORKERS"
MASK_SUFFIXES = ("_mask", "_pred", "_gt")


class UsageError(Exception):
    """Bad invocation or unresolvable input; exit status 2."""


# ---- helpers -----------------------------------------------------------------


def default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
        if n < 1:
            raise UsageError(f"{WORKERS_ENV} must be at least 1")
        return n
    return os.cpu_count() or 1


def run_batch(fn: Callable, items: Sequence, workers: int) -> list:
    """``[fn(x) for x in items]``, across processes when ``workers > 1``.
    Results come back in input order."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def list_images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise UsageError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def resolved_config(args: argparse.Namespace) -> dict:
    skip = {"func", "config", "workers", "verbose"}
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in skip:
            continue
        out[k] = v.value if hasattr(v, "value") else v
    return out


def _stem_key(path: Path) -> str:
    stem = path.stem
    for suffix in MASK_SUFFIXES:
        if stem.endswith(suffix):
            return stem[: -len(suffix)]
    return stem


def load_mask(path: Path) -> np.ndarray:
    """Foreground of a mask file: the enhancement plane of a 4-channel image,
    otherwise any non-zero gray value."""
    img = read_image(path)
    if img.space is ColorSpace.RGBA_ENHANCED:
        return img.data[:, :, 3] > 0
    if img.space is ColorSpace.GRAY:
        return img.plane(0) > 0
    return img.data.max(axis=2) > 0


# ---- normalize ---------------------------------------------------------------


def _normalize_one(job):
    path, out_path, target_json = job
    tgt = NormalizationTarget.from_json(target_json)
    try:
        img = read_image(path)
        if img.space is not ColorSpace.RGB8:
            raise PlaquekitError(f"expected an RGB image, got {img.space.value}")
        res = normalize(img, tgt)
        write_image(res.image, out_path)
        return {"status": res.status, "message": res.message}
    except (PlaquekitError, OSError, ValueError) as exc:
        return {"status": "error", "message": f"{type(exc).__name__}: {exc}"}


def load_target(spec: str, method: Method, params: StainParams) -> NormalizationTarget:
    path = Path(spec)
    if not path.is_file():
        raise UsageError(f"target not found: {spec}")
    if path.suffix.lower() == ".json":
        tgt = NormalizationTarget.from_json(path.read_text(encoding="utf-8"))
        if tgt.method is not method:
            raise UsageError(f"target file is for {tgt.method.value}, not {method.value}")
        return tgt
    img = read_image(path)
    if img.space is not ColorSpace.RGB8:
        img = PlanarImage(img.data[:, :, :3], ColorSpace.RGB8) if img.channels == 4 else img
    return fit_target(img, method, params)


def cmd_normalize(args) -> int:
    inputs = list_images(Path(args.input))
    method = Method(args.method)
    params = StainParams(
        alpha_percentile=args.alpha_percentile,
        beta_od_threshold=args.beta_od_threshold,
        sparsity_lambda=args.sparsity_lambda,
        max_iters=args.max_iters,
        tol=args.tol,
        concentration_percentile=args.concentration_percentile,
        background_intensity=args.background_intensity,
    )
    try:
        tgt = load_target(args.target, method, params)
    except PlaquekitError as exc:
        log.error("cannot fit target: %s", exc)
        return 1
    out = Path(args.output)
    manifest = {
        "command": "normalize",
        "version": __version__,
        "config": resolved_config(args),
        "target": tgt.to_dict(),
        "status": "incomplete",
        "files": [],
    }
    write_json(out / "manifest.json", manifest)
    jobs = [(p, out / p.name, tgt.to_json()) for p in inputs]
    results = run_batch(_normalize_one, jobs, args.workers)
    for p, r in zip(inputs, results):
        if r["status"] != "ok":
            (log.error if r["status"] == "error" else log.warning)("%s: %s %s", p.name, r["status"], r["message"])
        manifest["files"].append({"input": p.name, "output": p.name, **r})
    manifest["status"] = "complete"
    write_json(out / "manifest.json", manifest)
    return 1 if any(r["status"] == "error" for r in results) else 0


# ---- enhance -----------------------------------------------------------------


def _enhance_one(job):
    path, out_dir, params_dict, dump = job
    params = EnhanceParams.from_dict(params_dict)
    name = Path(path).stem
    try:
        img = read_image(path)
        if img.space is not ColorSpace.RGB8:
            raise PlaquekitError(f"expected an RGB image, got {img.space.value}")
        out = enhance_image(img, params)
        write_image(out, out_dir / f"{name}.png")
        resolved = params.resolve(img.width, img.height)
        sidecar = {"input": Path(path).name, "params": resolved.to_dict(), "requested": params.to_dict()}
        write_json(out_dir / f"{name}.json", sidecar)
        if dump:
            stages = enhancement_stages(split_channels(img)[1], params)
            sdir = out_dir / f"{name}_stages"
            sdir.mkdir(parents=True, exist_ok=True)
            np.save(sdir / "spectrum.npy", stages["spectrum"].data)
            np.save(sdir / "filtered_spectrum.npy", stages["filtered_spectrum"].data)
            np.save(sdir / "lowpassed.npy", stages["lowpassed"].plane(0))
            np.save(sdir / "convolved.npy", stages["convolved"].plane(0))
            write_image(stages["binary"], sdir / "binary.png")
        return {"status": "ok", "message": ""}
    except (PlaquekitError, OSError, ValueError) as exc:
        return {"status": "error", "message": f"{type(exc).__name__}: {exc}"}


def cmd_enhance(args) -> int:
    src = Path(args.input)
    inputs = list_images(src)
    try:
        params = EnhanceParams(cutoff=args.cutoff, t_low=args.t_low, t_high=args.t_high)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.output) if args.output else src.parent / f"{src.name}-en"
    args.output = str(out)
    manifest = {
        "command": "enhance",
        "version": __version__,
        "config": resolved_config(args),
        "params": params.to_dict(),
        "status": "incomplete",
        "files": [],
    }
    write_json(out / "manifest.json", manifest)
    jobs = [(p, out, params.to_dict(), args.dump_stages) for p in inputs]
    results = run_batch(_enhance_one, jobs, args.workers)
    for p, r in zip(inputs, results):
        if r["status"] != "ok":
            log.error("%s: %s", p.name, r["message"])
        manifest["files"].append({"input": p.name, "output": f"{p.stem}.png", **r})
    manifest["status"] = "complete"
    write_json(out / "manifest.json", manifest)
    return 1 if any(r["status"] == "error" for r in results) else 0


# ---- patchify ----------------------------------------------------------------


def _subjects(text: Optional[str]) -> list[str]:
    if not text:
        return []
    return [s.strip() for s in text.split(",") if s.strip()]


def cmd_patchify(args) -> int:
    import warnings

    slides = list_images(Path(args.slides))
    ann_dir = Path(args.annotations)
    if not ann_dir.is_dir():
        raise UsageError(f"not a directory: {ann_dir}")
    train, test = _subjects(args.train_subjects), _subjects(args.test_subjects)
    if set(train) & set(test):
        raise UsageError(f"subjects in both splits: {sorted(set(train) & set(test))}")
    out = Path(args.output)
    write_json(out / "manifest.json", {"command": "patchify", "config": resolved_config(args), "status": "incomplete"})

    records, notes, failed = [], [], False
    for slide_path in slides:
        xml = ann_dir / f"{slide_path.stem}.xml"
        if not xml.is_file():
            log.error("%s: no annotation file %s", slide_path.name, xml.name)
            notes.append(f"{slide_path.name}: missing {xml.name}")
            failed = True
            continue
        try:
            subject = slide_path.stem if args.annotation_format != "native" else None
            a = parse_annotations(xml.read_bytes(), args.annotation_format, subject_id=subject)
            slide = read_image(slide_path)
            if slide.space is ColorSpace.RGBA_ENHANCED:
                slide = PlanarImage(slide.data[:, :, :3], ColorSpace.RGB8)
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", PatchWarning)
                recs = extract_patches(slide, a, args.patch_size)
                if args.augment:
                    recs = recs + augment_records(recs, slide, a, args.margin)
            notes += [f"{a.subject_id}: {w}" for w in a.warnings]
            notes += [f"{a.subject_id}: {w.message}" for w in caught]
            records += recs
        except PlaquekitError as exc:
            log.error("%s: %s", slide_path.name, exc)
            notes.append(f"{slide_path.name}: {type(exc).__name__}: {exc}")
            failed = True

    subjects = sorted({r.subject_id for r in records})
    if not train and not test:
        train = subjects
    try:
        dataset = split_by_subject(records, train, test, resolved_config(args))
    except (OverlappingSplit, UnassignedSubject) as exc:
        raise UsageError(str(exc)) from None
    for r in records:
        write_image(r.image, out / f"{r.patch_id}_img.png")
        write_image(r.mask, out / f"{r.patch_id}_mask.png")
    doc = dataset.to_dict()
    doc.update(command="patchify", version=__version__, status="complete", warnings=notes)
    doc["counts"]["by_provenance"] = {
        p: sum(1 for r in records if r.provenance.value == p)
        for p in sorted({r.provenance.value for r in records})
    }
    write_json(out / "manifest.json", doc)
    return 1 if failed else 0


# ---- evaluate / report -------------------------------------------------------


def pair_masks(pred_dir: Path, gt_dir: Path) -> tuple[list[tuple[str, Path, Path]], list[str]]:
    preds = {_stem_key(p): p for p in list_images(pred_dir)}
    gts = {_stem_key(p): p for p in list_images(gt_dir)}
    pairs = [(k, preds[k], gts[k]) for k in sorted(preds.keys() & gts.keys())]
    unpaired = sorted(
        [f"pred:{preds[k].name}" for k in preds.keys() - gts.keys()]
        + [f"gt:{gts[k].name}" for k in gts.keys() - preds.keys()]
    )
    return pairs, unpaired


def _subject_map(gt_dir: Path) -> dict[str, str]:
    path = gt_dir / "manifest.json"
    if not path.is_file():
        return {}
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        return {}
    return {p["patch_id"]: p["subject_id"] for p in doc.get("patches", []) if "patch_id" in p}


def _evaluate_one(job):
    key, pred_path, gt_path, threshold, connectivity, labels = job
    return evaluate_pair(
        load_mask(pred_path), load_mask(gt_path), key, threshold, connectivity, **labels
    )


def _report_params(args) -> ReportParams:
    try:
        return ReportParams(
            iou_threshold=getattr(args, "iou_threshold", 0.1),
            resamples=args.resamples,
            seed=args.seed,
            resample_unit=args.resample_unit,
            connectivity=getattr(args, "connectivity", 8),
        )
    except (ValueError, PlaquekitError) as exc:
        raise UsageError(str(exc)) from None


def _write_report(out: Path, report, extra: dict) -> None:
    doc = report.to_dict()
    doc.update(extra)
    write_json(out / "report.json", doc)
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")


def cmd_evaluate(args) -> int:
    params = _report_params(args)
    pairs, unpaired = pair_masks(Path(args.pred), Path(args.gt))
    for name in unpaired:
        log.warning("unpaired file %s", name)
    if not pairs:
        log.error("%s", UnpairedFiles("no prediction/ground-truth pairs found"))
        return 1
    subjects = _subject_map(Path(args.gt))
    if params.resample_unit == "subject" and not subjects:
        raise UsageError("subject resampling needs a patchify manifest.json in the ground-truth directory")
    out = Path(args.output)
    write_json(out / "report.json", {"command": "evaluate", "config": resolved_config(args), "status": "incomplete"})
    jobs = [
        (
            key,
            p,
            g,
            params.iou_threshold,
            params.connectivity,
            {"method": args.method, "normalization": args.normalization, "subject_id": subjects.get(key, "")},
        )
        for key, p, g in pairs
    ]
    per_patch = run_batch(_evaluate_one, jobs, args.workers)
    report = aggregate_report(per_patch, params)
    _write_report(
        out,
        report,
        {
            "command": "evaluate",
            "version": __version__,
            "config": resolved_config(args),
            "status": "complete",
            "unpaired": unpaired,
        },
    )
    return 0


def cmd_report(args) -> int:
    params = _report_params(args)
    per_patch = []
    for path in args.reports:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"no such report: {path}")
        doc = json.loads(p.read_text(encoding="utf-8"))
        per_patch += [PatchMetrics.from_dict(d) for d in doc.get("patches", [])]
    try:
        report = aggregate_report(per_patch, params)
    except EmptyInput as exc:
        log.error("%s", exc)
        return 1
    _write_report(
        Path(args.output),
        report,
        {"command": "report", "version": __version__, "config": resolved_config(args), "status": "complete"},
    )
    return 0


# ---- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plaquekit", description="Stain normalisation, enhancement, patch extraction and scoring for plaque segmentation.")
    parser.add_argument("--version", action="version", version=f"plaquekit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with option defaults")
        p.add_argument("--workers", type=int, default=None, help=f"worker processes (default: ${WORKERS_ENV} or CPU count)")
        p.add_argument("-v", "--verbose", action="store_true")

    sp = StainParams()
    p = sub.add_parser("normalize", help="stain-normalise a directory of RGB images")
    p.add_argument("input")
    p.add_argument("-o", "--output")
    p.add_argument("--target", help="target image, or a fitted target .json")
    p.add_argument("--method", choices=[m.value for m in Method], default=Method.MACENKO.value)
    p.add_argument("--alpha-percentile", type=float, default=sp.alpha_percentile)
    p.add_argument("--beta-od-threshold", type=float, default=sp.beta_od_threshold)
    p.add_argument("--sparsity-lambda", type=float, default=sp.sparsity_lambda)
    p.add_argument("--max-iters", type=int, default=sp.max_iters)
    p.add_argument("--tol", type=float, default=sp.tol)
    p.add_argument("--concentration-percentile", type=float, default=sp.concentration_percentile)
    p.add_argument("--background-intensity", type=float, default=sp.background_intensity)
    common(p)
    p.set_defaults(func=cmd_normalize)

    ep = EnhanceParams()
    p = sub.add_parser("enhance", help="append the frequency-enhanced channel")
    p.add_argument("input")
    p.add_argument("-o", "--output", default=None, help="default: <input>-en next to the input")
    p.add_argument("--cutoff", type=float, default=None, help="low-pass radius (default: min(w, h) / 4)")
    p.add_argument("--t-low", type=float, default=ep.t_low)
    p.add_argument("--t-high", type=float, default=ep.t_high)
    p.add_argument("--dump-stages", action="store_true", help="also write every intermediate")
    common(p)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("patchify", help="cut annotated slides into patch/mask pairs")
    p.add_argument("slides")
    p.add_argument("annotations")
    p.add_argument("-o", "--output")
    p.add_argument("--augment", action="store_true", help="add four corner-translated copies per patch")
    p.add_argument("--train-subjects", default="", help="comma-separated subject ids")
    p.add_argument("--test-subjects", default="", help="comma-separated subject ids")
    p.add_argument("--patch-size", type=int, default=256)
    p.add_argument("--margin", type=int, default=4)
    p.add_argument("--annotation-format", choices=converters(), default="native")
    p.add_argument("--seed", type=int, default=0, help="recorded for provenance; extraction is deterministic")
    common(p)
    p.set_defaults(func=cmd_patchify)

    def report_opts(p):
        p.add_argument("--resamples", type=int, default=1000)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--resample-unit", choices=["patch", "subject"], default="patch")

    p = sub.add_parser("evaluate", help="score predicted masks against ground truth")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("-o", "--output")
    p.add_argument("--iou-threshold", type=float, default=0.1)
    p.add_argument("--connectivity", type=int, choices=[4, 8], default=8)
    p.add_argument("--method", default="model", help="row label in the report")
    p.add_argument("--normalization", default="none", help="row label in the report")
    report_opts(p)
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="merge per-patch results from several report.json files")
    p.add_argument("reports", nargs="+")
    p.add_argument("-o", "--output")
    report_opts(p)
    common(p)
    p.set_defaults(func=cmd_report)
    return parser


def _config_defaults(path: str, command: str, sub: argparse.ArgumentParser) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    known = {a.dest for a in sub._actions}
    commands = {"normalize", "enhance", "patchify", "evaluate", "report"}
    flat = {k: v for k, v in doc.items() if k not in commands}
    section = doc.get(command, {})
    out = {}
    for k, v in {**flat, **section}.items():
        dest = k.replace("-", "_")
        if dest not in known or dest in ("config", "func", "help"):
            raise UsageError(f"unknown option in config: {k}")
        out[dest] = v
    return out


def _subparser(parser: argparse.ArgumentParser, command: str) -> Optional[argparse.ArgumentParser]:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices.get(command)
    return None


def _peek_config(argv: Sequence[str]) -> tuple[Optional[str], Optional[str]]:
    """(subcommand, --config value) without a full parse."""
    command = next((a for a in argv if not a.startswith("-")), None)
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return command, argv[i + 1]
        if a.startswith("--config="):
            return command, a.split("=", 1)[1]
    return command, None


REQUIRED = {
    "normalize": ("output", "target"),
    "patchify": ("output",),
    "evaluate": ("output",),
    "report": ("output",),
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    command = None
    try:
        command, config = _peek_config(argv)
        sub = _subparser(parser, command) if command else None
        if config and sub is not None:
            sub.set_defaults(**_config_defaults(config, command, sub))
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return int(exc.code or 0)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(message)s",
            stream=sys.stderr,
        )
        missing = [k for k in REQUIRED.get(args.command, ()) if getattr(args, k) in (None, "")]
        if missing:
            raise UsageError("missing required option(s): " + ", ".join("--" + m for m in missing))
        if args.workers is None:
            args.workers = default_workers()
        elif args.workers < 1:
            raise UsageError("--workers must be at least 1")
        return args.func(args)
    except UsageError as exc:
        print(f"plaquekit {command or ''}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
