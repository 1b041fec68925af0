"""labelforge command line: fuse, refine, metrics, stats, phantom, filter-scan.

Exit codes: 0 success (or accept), 2 input/module error, 3 plausibility reject.
Errors are printed to stderr as one JSON object; logs go to stderr as JSON lines.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .errors import LabelforgeError
from .fuse import apply_remap_rules, derive_skull, fuse_sources, load_fusion_manifest, load_source_mapping
from .geometry import body_part_boxes, surface_distance
from .labelscheme import load_scheme
from .metrics import (
    PatientMeta, cancer_cooccurrence, dataset_jsd_matrix, ensure_dir, jsd_boxplot_svg, overlap_metrics,
    quadratic_fit, read_meta_csv, read_table, structure_stats, write_csv, write_meta_csv,
)
from .phantom import default_phantom_spec, generate, load_phantom_spec, save_phantom_spec
from .refine import STEPS, RefineConfig, load_refine_config, post_process
from .volgrid import read_volume, slice_count_filter, volume_files, write_volume

EXIT_OK, EXIT_INPUT, EXIT_REJECT = 0, 2, 3
log = logging.getLogger("labelforge")


class InputError(LabelforgeError):
    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = None if path is None else str(path)


class JsonLineFormatter(logging.Formatter):
    def format(self, record):
        out = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        extra = getattr(record, "fields", None)
        if extra:
            out.update(extra)
        return json.dumps(out, sort_keys=True)


def _setup_logging(verbose):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger("labelforge")
    root.handlers[:] = [handler]
    root.propagate = False
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def _info(msg, **fields):
    log.info(msg, extra={"fields": fields})


def _need(path, what="file"):
    p = Path(path)
    ok = p.is_dir() if what == "directory" else p.is_file()
    if not ok:
        raise InputError(f"{what} not found: {p}", p)
    return p


def _dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _scheme(args):
    return load_scheme(_need(args.scheme) if args.scheme else None)


# --------------------------------------------------------------------------- #
# fuse

def cmd_fuse(args):
    scheme = _scheme(args)
    pairs = load_fusion_manifest(_need(args.manifest))
    for vol, mapping in pairs:
        _need(vol)
        _need(mapping)
    mappings = [load_source_mapping(m).validate(scheme) for _, m in pairs]
    if args.intensity:
        _need(args.intensity)
    if args.dry_run:
        _info("dry run: inputs valid", sources=len(pairs))
        return EXIT_OK

    predictions = [(read_volume(v, "label"), m) for (v, _), m in zip(pairs, mappings)]
    fused = fuse_sources(predictions, scheme, split_paired=not args.no_split, connectivity=args.connectivity)
    entry = {"sources": [{"source_name": m.source_name, "precedence": m.precedence,
                          "volume": str(v), "nonzero_voxels": int(np.count_nonzero(p.voxels))}
                         for (v, _), m, (p, _) in zip(pairs, mappings, predictions)],
             "left_right_split": not args.no_split}
    if args.intensity:
        hu = read_volume(args.intensity, "intensity")
        before = fused.count(scheme.id_of("Skull"))
        fused = derive_skull(fused, hu, scheme)
        entry["skull_voxels_added"] = fused.count(scheme.id_of("Skull")) - before
        before_counts = fused.counts()
        boxes = body_part_boxes(fused, scheme, args.remap_margin)
        fused = apply_remap_rules(fused, scheme, boxes, connectivity=args.connectivity)
        after = fused.counts()
        entry["remap_changes"] = {str(k): after.get(k, 0) - before_counts.get(k, 0)
                                  for k in sorted(set(after) | set(before_counts))
                                  if after.get(k, 0) != before_counts.get(k, 0)}
    entry["label_counts"] = {str(k): v for k, v in sorted(fused.counts().items()) if k}
    out = Path(args.out)
    ensure_dir(out.parent)
    write_volume(fused, out)
    log_path = Path(args.log) if args.log else out.with_name(_stem(out) + ".fusion.json")
    _dump_json(entry, log_path)
    _info("fused", out=str(out), sources=len(pairs))
    return EXIT_OK


def _stem(path):
    name = Path(path).name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            return name[: -len(ext)]
    return Path(path).stem


# --------------------------------------------------------------------------- #
# refine

def _refine_config(args):
    cfg = load_refine_config(_need(args.config)).to_dict() if args.config else RefineConfig().to_dict()
    if args.steps is not None:
        cfg["enabled_steps"] = [s.strip() for s in args.steps.split(",") if s.strip()]
    for key, val in (("plane_deviation_max_deg", args.max_deviation), ("area_margin_mm", args.area_margin),
                     ("connectivity", args.connectivity)):
        if val is not None:
            cfg[key] = val
    try:
        return RefineConfig.from_dict(cfg)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _meta_for(path, metas, sex):
    vid = _stem(path)
    if vid in metas:
        return metas[vid]
    return PatientMeta(vid, sex or "unknown")


def _refine_one(src, dst, report_path, scheme, config, meta):
    vol = read_volume(src, "label", scheme)
    out, report = post_process(vol, scheme, meta, config)
    write_volume(out, dst)
    doc = report.to_dict()
    doc.update({"input": str(src), "output": str(dst), "volume_id": meta.volume_id, "sex": meta.sex,
                "config": config.to_dict()})
    _dump_json(doc, report_path)
    _info("refined", volume_id=meta.volume_id, verdict=report.plausibility.verdict)
    return report.plausibility.verdict


def cmd_refine(args):
    scheme = _scheme(args)
    config = _refine_config(args)
    metas = read_meta_csv(_need(args.meta)) if args.meta else {}
    src = Path(args.input)
    if src.is_dir():
        files = volume_files(src)
        if not files:
            raise InputError(f"no volume files in {src}", src)
        out_dir = ensure_dir(args.out)
        jobs = [(f, out_dir / f.name, out_dir / (_stem(f) + ".report.json")) for f in files]
    else:
        _need(src)
        dst = Path(args.out)
        ensure_dir(dst.parent)
        report = Path(args.report) if args.report else dst.with_name(_stem(dst) + ".report.json")
        jobs = [(src, dst, report)]

    def run(job):
        s, d, r = job
        return _refine_one(s, d, r, scheme, config, _meta_for(s, metas, args.sex))

    threads = max(1, int(args.threads))
    if threads == 1 or len(jobs) == 1:
        verdicts = [run(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            verdicts = list(pool.map(run, jobs))
    return EXIT_OK if all(v == "accept" for v in verdicts) else EXIT_REJECT


# --------------------------------------------------------------------------- #
# metrics

METRIC_COLUMNS = ["label_id", "name", "dice", "iou", "msd_mm", "msd_pred_to_ref_mm", "msd_ref_to_pred_mm"]


def cmd_metrics(args):
    scheme = _scheme(args)
    pred = read_volume(_need(args.pred), "label")
    ref = read_volume(_need(args.ref), "label")
    ids = [int(i) for i in args.ids.split(",")] if args.ids else None
    result = overlap_metrics(pred, ref, ids)
    rows, msds = [], []
    for lid, ov in sorted(result.per_id.items()):
        sd = None if args.no_msd else surface_distance(pred.voxels == lid, ref.voxels == lid, ref.geometry)
        if sd is not None:
            msds.append(sd.mean_symmetric)
        name = scheme.name(lid) if lid in scheme else ""
        rows.append([lid, name, None if ov is None else ov.dice, None if ov is None else ov.iou,
                     None if sd is None else sd.mean_symmetric, None if sd is None else sd.a_to_b,
                     None if sd is None else sd.b_to_a])
    rows.append(["macro", "", result.macro_dice, result.macro_iou,
                 float(np.mean(msds)) if msds else None, None, None])
    ensure_dir(Path(args.out).parent)
    write_csv(args.out, METRIC_COLUMNS, rows)
    _info("metrics written", out=str(args.out), labels=len(rows) - 1)
    return EXIT_OK


# --------------------------------------------------------------------------- #
# stats

VOLUME_COLUMNS = ["volume_id", "label_id", "name", "voxel_count", "volume_ml", "mean_hu"]


def _stats_volumes(args, scheme):
    metas = read_meta_csv(_need(args.meta)) if args.meta else {}
    files = volume_files(_need(args.labels, "directory"))
    rows = []
    for f in files:
        vid = _stem(f)
        labels = read_volume(f, "label")
        hu = None
        if args.intensity_dir:
            hu_path = _need(Path(args.intensity_dir) / f.name)
            hu = read_volume(hu_path, "intensity")
        meta = metas.get(vid, PatientMeta(vid))
        for s in structure_stats(labels, hu, meta):
            rows.append([s.volume_id, s.label_id, scheme.name(s.label_id) if s.label_id in scheme else "",
                         s.voxel_count, s.volume_ml, s.mean_hu])
    write_csv(args.out, VOLUME_COLUMNS, rows)
    return EXIT_OK


def _stats_jsd(args, scheme):
    tables = {}
    for item in args.table:
        name, sep, path = item.partition("=")
        if not sep:
            raise InputError(f"--table expects NAME=PATH, got {item!r}")
        for row in read_table(_need(path)):
            tables.setdefault(int(row["label_id"]), {}).setdefault(name, []).append(float(row["volume_ml"]))
    rows, skipped = dataset_jsd_matrix(tables, args.bins)
    for s in skipped:
        _info("structure skipped: fewer than two datasets", label_id=s)
    write_csv(args.out, ["label_id", "dataset", "mean_jsd", "n_peers"],
              [[r.structure, r.dataset, r.mean_jsd, r.n_peers] for r in rows])
    if args.svg:
        Path(args.svg).write_text(jsd_boxplot_svg(rows))
    return EXIT_OK


def _stats_agefit(args, scheme):
    metas = read_meta_csv(_need(args.meta))
    groups = {}
    for row in read_table(_need(args.volumes)):
        meta = metas.get(row["volume_id"])
        if meta is None or meta.age is None:
            continue
        for sex in ("all", meta.sex) if args.by_sex else ("all",):
            groups.setdefault((int(row["label_id"]), sex), []).append((meta.age, float(row["volume_ml"])))
    rows = []
    for (lid, sex), pts in sorted(groups.items()):
        x, y = np.array(pts).T
        try:
            fit = quadratic_fit(x, y)
        except LabelforgeError as exc:
            _info("fit skipped", label_id=lid, sex=sex, reason=str(exc))
            continue
        rows.append([lid, sex, fit.a, fit.b, fit.c, fit.rms, fit.n])
    write_csv(args.out, ["label_id", "sex", "a", "b", "c", "rms", "n"], rows)
    return EXIT_OK


def _stats_cancer(args, scheme):
    metas = read_meta_csv(_need(args.meta))
    lesion_dir = _need(args.lesions, "directory")

    def cases():
        for f in volume_files(_need(args.labels, "directory")):
            vid = _stem(f)
            if vid not in metas:
                continue
            labels = read_volume(f, "label")
            lesion = read_volume(_need(lesion_dir / f.name), "label")
            yield labels, lesion.voxels, metas[vid]

    table = cancer_cooccurrence(cases())
    header = ["label_id", "name"] + [f"P({d})" for d in table.diagnoses]
    rows = [[s, scheme.name(s) if s in scheme else ""] + [table.probability(s, d) for d in table.diagnoses]
            for s in table.structures]
    write_csv(args.out, header, rows)
    return EXIT_OK


def cmd_stats(args):
    scheme = _scheme(args)
    ensure_dir(Path(args.out).parent)
    handler = {"volumes": _stats_volumes, "jsd": _stats_jsd, "agefit": _stats_agefit, "cancer": _stats_cancer}
    code = handler[args.stats_cmd](args, scheme)
    _info("stats written", kind=args.stats_cmd, out=str(args.out))
    return code


# --------------------------------------------------------------------------- #
# phantom / filter-scan

def cmd_phantom(args):
    if args.spec:
        spec = load_phantom_spec(_need(args.spec))
        if args.seed is not None:
            spec.seed = int(args.seed)
    else:
        corruptions = "bundle" if args.corrupt == "bundle" else None
        spec = default_phantom_spec(args.seed or 0, args.sex, corruptions)
    out = ensure_dir(args.out_dir)
    ph = generate(spec)
    write_volume(ph["truth"], out / "truth.nii.gz")
    write_volume(ph["corrupted"], out / "corrupted.nii.gz")
    write_volume(ph["intensity"], out / "intensity.nii.gz")
    m = ph["meta"]
    write_meta_csv(out / "meta.csv", [PatientMeta("truth", m.sex, m.age, m.diagnosis),
                                      PatientMeta("corrupted", m.sex, m.age, m.diagnosis)])
    save_phantom_spec(spec, out / "spec.json")
    _info("phantom written", out_dir=str(out), seed=spec.seed)
    return EXIT_OK


def cmd_filter_scan(args):
    scan = slice_count_filter(_need(args.directory, "directory"), args.min_slices, args.max_slices)
    doc = scan.as_dict()
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------- #

def build_parser():
    p = argparse.ArgumentParser(prog="labelforge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def with_scheme(sp):
        sp.add_argument("--scheme", help="label scheme JSON (default: bundled scheme)")
        return sp

    f = with_scheme(sub.add_parser("fuse", help="merge per-source predictions into one label map"))
    f.add_argument("--manifest", required=True)
    f.add_argument("--out", required=True, help="fused .nii or .nii.gz")
    f.add_argument("--intensity", help="CT volume; enables the skull rule and remap rules")
    f.add_argument("--log", help="fusion log JSON (default: next to --out)")
    f.add_argument("--connectivity", type=int, default=26, choices=(6, 18, 26))
    f.add_argument("--remap-margin", type=float, default=0.0, help="body-part box margin for remap rules (mm)")
    f.add_argument("--no-split", action="store_true", help="skip the left/right split after fusion")
    f.add_argument("--dry-run", action="store_true")
    f.set_defaults(func=cmd_fuse)

    r = with_scheme(sub.add_parser("refine", help="rule-based refinement and plausibility verdict"))
    r.add_argument("input", help="label volume or directory of volumes")
    r.add_argument("--out", required=True, help="output volume (file input) or directory")
    r.add_argument("--report", help="report JSON path (file input only)")
    r.add_argument("--meta", help="CSV with volume_id,sex,age,diagnosis")
    r.add_argument("--sex", choices=("M", "F"), help="sex for volumes missing from --meta")
    r.add_argument("--config", help="refine config JSON")
    r.add_argument("--steps", help=f"comma-separated subset of {','.join(STEPS)}")
    r.add_argument("--max-deviation", type=float, help="plane deviation threshold in degrees")
    r.add_argument("--area-margin", type=float, help="body-part box margin in mm")
    r.add_argument("--connectivity", type=int, choices=(6, 18, 26))
    r.add_argument("--threads", type=int, default=1)
    r.set_defaults(func=cmd_refine)

    m = with_scheme(sub.add_parser("metrics", help="Dice, IoU and mean surface distance per label"))
    m.add_argument("--pred", required=True)
    m.add_argument("--ref", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--ids", help="comma-separated label ids (default: all present)")
    m.add_argument("--no-msd", action="store_true")
    m.set_defaults(func=cmd_metrics)

    s = sub.add_parser("stats", help="cohort statistics")
    ss = s.add_subparsers(dest="stats_cmd", required=True)
    sv = with_scheme(ss.add_parser("volumes", help="per-structure volume and mean HU"))
    sv.add_argument("--labels", required=True, help="directory of label volumes")
    sv.add_argument("--intensity-dir", help="directory of CT volumes with matching file names")
    sv.add_argument("--meta")
    sv.add_argument("--out", required=True)
    sj = with_scheme(ss.add_parser("jsd", help="mean pairwise JSD of volume distributions across datasets"))
    sj.add_argument("--table", action="append", required=True, help="NAME=volumes.csv (repeat)")
    sj.add_argument("--bins", type=int, default=64)
    sj.add_argument("--svg")
    sj.add_argument("--out", required=True)
    sa = with_scheme(ss.add_parser("agefit", help="quadratic volume-vs-age fit per structure"))
    sa.add_argument("--volumes", required=True, help="CSV from `stats volumes`")
    sa.add_argument("--meta", required=True)
    sa.add_argument("--by-sex", action="store_true")
    sa.add_argument("--out", required=True)
    sc = with_scheme(ss.add_parser("cancer", help="P(structure affected | diagnosis)"))
    sc.add_argument("--labels", required=True)
    sc.add_argument("--lesions", required=True, help="directory of lesion masks with matching names")
    sc.add_argument("--meta", required=True)
    sc.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stats)

    ph = sub.add_parser("phantom", help="write a synthetic phantom (truth, corrupted, intensity, meta)")
    ph.add_argument("--out-dir", required=True)
    ph.add_argument("--spec", help="phantom spec JSON")
    ph.add_argument("--seed", type=int)
    ph.add_argument("--sex", choices=("M", "F"))
    ph.add_argument("--corrupt", choices=("bundle", "none"), default="bundle")
    ph.set_defaults(func=cmd_phantom)

    fs = sub.add_parser("filter-scan", help="partition volumes by axial slice count (headers only)")
    fs.add_argument("directory")
    fs.add_argument("--min-slices", type=int, default=336)
    fs.add_argument("--max-slices", type=int, default=400)
    fs.add_argument("--out")
    fs.set_defaults(func=cmd_filter_scan)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except (LabelforgeError, ValueError, KeyError, OSError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        path = getattr(exc, "path", None) or getattr(exc, "filename", None)
        if path is not None:
            err["path"] = str(path)
        sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
