"""Validation statistics: overlap scores, structure descriptors, volume-distribution
divergence, age regressions and lesion co-occurrence."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BinRangeError, DegenerateFitError, GeometryMismatchError

JSD_BINS = 64


@dataclass(frozen=True)
class PatientMeta:
    volume_id: str
    sex: str = "unknown"
    age: float | None = None
    diagnosis: str = "negative"

    def __post_init__(self):
        sex = str(self.sex).strip().upper() if self.sex is not None else ""
        object.__setattr__(self, "sex", sex if sex in ("M", "F") else "unknown")
        if self.age is not None:
            age = float(self.age)
            if math.isnan(age):
                age = None
            elif age < 0:
                raise ValueError(f"{self.volume_id}: age must be >= 0, got {self.age}")
            object.__setattr__(self, "age", age)
        diag = (self.diagnosis or "").strip()
        object.__setattr__(self, "diagnosis", diag or "negative")


def read_meta_csv(path) -> dict:
    """volume_id,sex,age,diagnosis -> {volume_id: PatientMeta}"""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"volume_id", "sex", "age", "diagnosis"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            age = row["age"].strip()
            out[row["volume_id"]] = PatientMeta(
                row["volume_id"], row["sex"], float(age) if age else None, row["diagnosis"])
    return out


def write_meta_csv(path, metas):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["volume_id", "sex", "age", "diagnosis"])
        for m in metas:
            w.writerow([m.volume_id, m.sex, "" if m.age is None else fmt(m.age), m.diagnosis])


def fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.12g}"


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in r])


# --------------------------------------------------------------------------- #
# overlap

@dataclass(frozen=True)
class Overlap:
    dice: float
    iou: float


@dataclass
class OverlapResult:
    per_id: dict  # id -> Overlap | None when both masks are empty
    macro_dice: float | None
    macro_iou: float | None


def overlap_metrics(pred, ref, ids=None) -> OverlapResult:
    if not pred.geometry.matches(ref.geometry):
        raise GeometryMismatchError("prediction and reference geometries differ")
    p, r = pred.voxels.ravel(), ref.voxels.ravel()
    size = int(max(p.max(initial=0), r.max(initial=0))) + 1
    n_pred = np.bincount(p, minlength=size)
    n_ref = np.bincount(r, minlength=size)
    n_both = np.bincount(p[p == r], minlength=size)
    if ids is None:
        ids = [i for i in range(1, size) if n_pred[i] or n_ref[i]]
    per = {}
    for i in ids:
        i = int(i)
        a = int(n_pred[i]) if i < size else 0
        b = int(n_ref[i]) if i < size else 0
        inter = int(n_both[i]) if i < size else 0
        if a + b == 0:
            per[i] = None
            continue
        per[i] = Overlap(2.0 * inter / (a + b), inter / (a + b - inter))
    vals = [v for v in per.values() if v is not None]
    return OverlapResult(
        per,
        float(np.mean([v.dice for v in vals])) if vals else None,
        float(np.mean([v.iou for v in vals])) if vals else None,
    )


# --------------------------------------------------------------------------- #
# descriptors

@dataclass(frozen=True)
class StructureStats:
    volume_id: str
    label_id: int
    volume_ml: float
    mean_hu: float | None
    voxel_count: int


def structure_stats(labels, intensity=None, meta=None) -> list:
    if intensity is not None and not labels.geometry.matches(intensity.geometry):
        raise GeometryMismatchError("label and intensity geometries differ")
    vid = meta.volume_id if meta is not None else ""
    flat = labels.voxels.ravel()
    counts = np.bincount(flat)
    sums = None
    if intensity is not None:
        sums = np.bincount(flat, weights=intensity.voxels.ravel().astype(np.float64), minlength=counts.size)
    voxel_mm3 = labels.geometry.voxel_volume_mm3
    rows = []
    for lid in np.flatnonzero(counts):
        if lid == 0:
            continue
        n = int(counts[lid])
        rows.append(StructureStats(
            vid, int(lid), n * voxel_mm3 / 1000.0,
            float(sums[lid] / n) if sums is not None else None, n))
    return rows


# --------------------------------------------------------------------------- #
# distribution divergence

def js_divergence(p, q) -> float:
    """Base-2 Jensen-Shannon divergence of two probability vectors (0 log 0 = 0)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    s = p + q  # a / m = 2a / (p + q); halving first underflows for subnormal entries

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log2(2.0 * a[nz] / s[nz])))

    return min(1.0, max(0.0, 0.5 * kl(p) + 0.5 * kl(q)))


def histogram_probabilities(samples, edges):
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("sample list is empty")
    if x.min() < edges[0] or x.max() > edges[-1]:
        raise BinRangeError(
            f"samples span [{x.min()}, {x.max()}] outside bin range [{edges[0]}, {edges[-1]}]")
    counts, _ = np.histogram(x, bins=edges)
    return counts / x.size


def jsd(p_samples, q_samples, bins) -> float:
    edges = np.asarray(bins, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be a strictly increasing sequence of length >= 2")
    return js_divergence(histogram_probabilities(p_samples, edges), histogram_probabilities(q_samples, edges))


def shared_edges(samples_by_dataset, n_bins=JSD_BINS):
    pooled = np.concatenate([np.asarray(s, dtype=np.float64).ravel() for s in samples_by_dataset])
    lo, hi = float(pooled.min()), float(pooled.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, n_bins + 1)


@dataclass(frozen=True)
class JsdRow:
    structure: str
    dataset: str
    mean_jsd: float
    n_peers: int


def dataset_jsd_matrix(tables, n_bins=JSD_BINS):
    """Mean JSD of each dataset's volume distribution to every other dataset's.

    `tables` is {structure: {dataset: samples}}.  Returns (rows, skipped) where
    skipped lists structures present in fewer than two datasets.
    """
    rows, skipped = [], []
    for structure in sorted(tables):
        per = {d: s for d, s in tables[structure].items() if len(s) > 0}
        if len(per) < 2:
            skipped.append(structure)
            continue
        names = sorted(per)
        edges = shared_edges([per[d] for d in names], n_bins)
        probs = {d: histogram_probabilities(per[d], edges) for d in names}
        for d in names:
            vals = [js_divergence(probs[d], probs[o]) for o in names if o != d]
            rows.append(JsdRow(str(structure), d, float(np.mean(vals)), len(vals)))
    return rows, skipped


# --------------------------------------------------------------------------- #
# age model

@dataclass(frozen=True)
class QuadraticFit:
    a: float
    b: float
    c: float
    rms: float
    n: int

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self.a * x * x + self.b * x + self.c


def quadratic_fit(x, y) -> QuadraticFit:
    """Least squares y ~ a x^2 + b x + c, solved through a QR factorisation."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError("x and y differ in length")
    if np.unique(x).size < 3:
        raise DegenerateFitError("quadratic fit needs at least 3 distinct x values")
    X = np.stack([x * x, x, np.ones_like(x)], axis=1)
    q, r = np.linalg.qr(X)
    coef = np.linalg.solve(r, q.T @ y)
    resid = y - X @ coef
    return QuadraticFit(float(coef[0]), float(coef[1]), float(coef[2]),
                        float(np.sqrt(np.mean(resid * resid))), int(x.size))


# --------------------------------------------------------------------------- #
# lesion co-occurrence

@dataclass
class CooccurrenceTable:
    diagnoses: list
    structures: list
    patients: dict      # diagnosis -> number of patients
    affected: dict      # (structure, diagnosis) -> affected patient count

    def probability(self, structure, diagnosis) -> float:
        return self.affected.get((structure, diagnosis), 0) / self.patients[diagnosis]


def cancer_cooccurrence(cases) -> CooccurrenceTable:
    """`cases` yields (labels: LabelVolume, lesion: bool-like array, meta: PatientMeta).

    A structure counts as affected for a patient when at least one lesion
    voxel falls inside it.  Patients with diagnosis "negative" are left out.
    """
    patients, affected, structures = {}, {}, set()
    for labels, lesion, meta in cases:
        lesion = np.asarray(getattr(lesion, "voxels", lesion)) != 0
        if lesion.shape != labels.voxels.shape:
            raise GeometryMismatchError(f"{meta.volume_id}: lesion mask shape differs from labels")
        structures.update(i for i in labels.present_ids())
        if meta.diagnosis == "negative":
            continue
        patients[meta.diagnosis] = patients.get(meta.diagnosis, 0) + 1
        for sid in np.unique(labels.voxels[lesion]).tolist():
            if sid == 0:
                continue
            key = (int(sid), meta.diagnosis)
            affected[key] = affected.get(key, 0) + 1
    return CooccurrenceTable(sorted(patients), sorted(structures), patients, affected)


# --------------------------------------------------------------------------- #
# box plot

def jsd_boxplot_svg(rows, width=480, height=320) -> str:
    """Static SVG box plot of mean JSD per dataset (whiskers at min/max)."""
    by_ds = {}
    for r in rows:
        by_ds.setdefault(r.dataset, []).append(r.mean_jsd)
    names = sorted(by_ds)
    pad, top = 40, 20
    plot_h = height - pad - top
    y = lambda v: f"{top + plot_h * (1.0 - v):.2f}"  # noqa: E731
    step = (width - 2 * pad) / max(1, len(names))
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<line x1="{pad}" y1="{top}" x2="{pad}" y2="{top + plot_h}" stroke="black"/>']
    for v in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{pad - 4}" y="{y(v)}" font-size="10" text-anchor="end">{v:.1f}</text>')
    for n, name in enumerate(names):
        vals = np.asarray(by_ds[name])
        q1, med, q3 = np.percentile(vals, [25, 50, 75])
        cx = pad + step * (n + 0.5)
        half = step * 0.25
        parts += [
            f'<line x1="{cx:.2f}" y1="{y(vals.min())}" x2="{cx:.2f}" y2="{y(vals.max())}" stroke="black"/>',
            f'<rect x="{cx - half:.2f}" y="{y(q3)}" width="{2 * half:.2f}" height="{plot_h * (q3 - q1):.2f}" fill="#cde" stroke="black"/>',
            f'<line x1="{cx - half:.2f}" y1="{y(med)}" x2="{cx + half:.2f}" y2="{y(med)}" stroke="black" stroke-width="2"/>',
            f'<text x="{cx:.2f}" y="{height - pad / 2:.2f}" font-size="10" text-anchor="middle">{name}</text>',
        ]
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def read_table(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def ensure_dir(path):
    Path(path).mkdir(parents=True, exist_ok=True)
    return Path(path)
