import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.distance import jensenshannon

from conftest import phantom
from labelforge.errors import BinRangeError, DegenerateFitError, GeometryMismatchError
from labelforge.metrics import (
    PatientMeta, cancer_cooccurrence, dataset_jsd_matrix, js_divergence, jsd, jsd_boxplot_svg, overlap_metrics,
    quadratic_fit, read_meta_csv, structure_stats, write_meta_csv,
)
from labelforge.volgrid import IntensityVolume, LabelVolume, VolumeGeometry, reorient_to_canonical
from oracles import grid_refine_quadratic, reference_jsd

G = VolumeGeometry.canonical((4, 4, 4), (1.0, 1.0, 1.0))


def _lv(vox, geom=G):
    return LabelVolume(geom, np.asarray(vox, np.uint16))


def test_hand_counted_overlap():
    p = np.zeros(G.dims, np.uint16)
    r = np.zeros(G.dims, np.uint16)
    p.flat[[0, 1, 2]] = 7
    r.flat[[1, 2, 3, 4, 5]] = 7
    (o,) = overlap_metrics(_lv(p), _lv(r)).per_id.values()
    assert o.dice == 0.5 and o.iou == pytest.approx(2 / 6, abs=1e-15)


def test_identical_and_disjoint():
    p = np.zeros(G.dims, np.uint16)
    p[0] = 3
    p[1] = 5
    res = overlap_metrics(_lv(p), _lv(p))
    assert all(o.dice == 1.0 and o.iou == 1.0 for o in res.per_id.values())
    assert res.macro_dice == 1.0
    q = np.zeros(G.dims, np.uint16)
    q[3] = 3
    d = overlap_metrics(_lv(p), _lv(q), ids=[3]).per_id[3]
    assert d.dice == 0.0 and d.iou == 0.0


def test_missing_excluded_from_macro():
    p = np.zeros(G.dims, np.uint16)
    p[0] = 3
    res = overlap_metrics(_lv(p), _lv(p), ids=[3, 9])
    assert res.per_id[9] is None
    assert res.macro_dice == 1.0 and res.macro_iou == 1.0
    empty = overlap_metrics(_lv(np.zeros(G.dims)), _lv(np.zeros(G.dims)))
    assert empty.per_id == {} and empty.macro_dice is None


def test_geometry_mismatch():
    other = VolumeGeometry.canonical((4, 4, 4), (1.0, 1.0, 2.0))
    with pytest.raises(GeometryMismatchError):
        overlap_metrics(_lv(np.zeros(G.dims)), _lv(np.zeros(G.dims), other))


def test_dice_iou_identity_100_pairs():
    rng = np.random.default_rng(21)
    for _ in range(100):
        a = (rng.random(G.dims) < rng.uniform(0.05, 0.9)).astype(np.uint16)
        b = (rng.random(G.dims) < rng.uniform(0.05, 0.9)).astype(np.uint16)
        a.flat[0] = 1
        o = overlap_metrics(_lv(a), _lv(b), ids=[1]).per_id[1]
        back = overlap_metrics(_lv(b), _lv(a), ids=[1]).per_id[1]
        assert abs(o.dice - 2 * o.iou / (1 + o.iou)) <= 1e-12
        assert o.iou <= o.dice
        assert o.dice == back.dice


# --------------------------------------------------------------------------- #
# descriptors

def test_volume_ml_and_mean_hu():
    vox = np.zeros((10, 10, 10), np.uint16)
    vox[:, :, 0] = 13
    for spacing, ml in [((1, 1, 1), 0.1), ((2, 2, 2), 0.8)]:
        geom = VolumeGeometry.canonical(vox.shape, spacing)
        (row,) = structure_stats(LabelVolume(geom, vox), meta=PatientMeta("p1"))
        assert row.voxel_count == 100 and row.volume_ml == ml and row.mean_hu is None
        assert row.volume_id == "p1"


def test_phantom_liver_mean_hu():
    ph = phantom(4, corruptions=None)
    truth, hu = ph["truth"], ph["intensity"]
    liver = truth.voxels == 13
    hu50 = hu.with_voxels(np.where(liver, 50.0, hu.voxels))
    rows = {r.label_id: r for r in structure_stats(truth, hu50, ph["meta"])}
    assert rows[13].mean_hu == 50.0
    assert rows[99].mean_hu == 400.0  # skull is bone
    assert set(rows) == set(truth.present_ids()) - {0}


def test_volume_invariant_under_orientation_relabel():
    rng = np.random.default_rng(5)
    data = rng.integers(0, 4, (5, 6, 7)).astype(np.uint16)
    spacing = (0.7, 1.3, 2.9)
    base = {r.label_id: r.volume_ml for r in structure_stats(_lv(data, VolumeGeometry.canonical(data.shape, spacing)))}
    for perm in [(0, 1, 2), (2, 0, 1), (1, 2, 0)]:
        for signs in [(1, 1, 1), (-1, 1, -1), (1, -1, 1)]:
            aff = np.eye(4)
            aff[:3, :3] = 0
            for ax, w in enumerate(perm):
                aff[w, ax] = signs[ax] * spacing[ax]
            out, new_aff, new_sp = reorient_to_canonical(data, aff, spacing)
            vol = LabelVolume(VolumeGeometry(out.shape, new_sp, new_aff), out)
            got = {r.label_id: r.volume_ml for r in structure_stats(vol)}
            assert got == pytest.approx(base, rel=1e-12)


def test_stats_geometry_mismatch():
    with pytest.raises(GeometryMismatchError):
        structure_stats(_lv(np.zeros(G.dims)), IntensityVolume(VolumeGeometry.canonical((2, 2, 2), (1, 1, 1)),
                                                              np.zeros((2, 2, 2))))


# --------------------------------------------------------------------------- #
# divergence

def test_jsd_identical_and_disjoint():
    s = [1.0, 2.0, 2.0, 3.0]
    assert jsd(s, list(s), [0, 1.5, 2.5, 4]) == 0.0
    assert abs(jsd([0.1, 0.2], [5.0, 6.0], [0, 1, 10]) - 1.0) <= 1e-12


def test_two_bin_hand_value():
    # P = (1/2, 1/2), Q = (1, 0), M = (3/4, 1/4)
    # KL(P||M) = 1/2 log2(2/3) + 1/2 log2(2);  KL(Q||M) = log2(4/3)
    hand = 0.5 * (0.5 * math.log2(2 / 3) + 0.5 * 1.0) + 0.5 * math.log2(4 / 3)
    assert abs(jsd([0.2, 0.8], [0.1, 0.4], [0, 0.5, 1]) - hand) <= 1e-6
    assert abs(hand - 0.311278) < 1e-6


def test_out_of_range_and_bad_edges():
    with pytest.raises(BinRangeError):
        jsd([0.5, 7.0], [0.5], [0, 1, 2])
    with pytest.raises(ValueError):
        jsd([1.0], [1.0], [0, 0, 1])
    with pytest.raises(ValueError):
        jsd([], [1.0], [0, 2])


# the oracles divide by (p + q) / 2, so keep them away from subnormal inputs
weight = st.one_of(st.just(0.0), st.floats(1e-9, 1.0))
prob = st.lists(weight, min_size=8, max_size=8).filter(lambda v: sum(v) > 1e-6)


def test_jsd_subnormal_entries():
    p = np.array([0.0, 1.0, 0.0])
    q = np.array([0.0, 1.0, 5e-324])
    v = js_divergence(p, q)
    assert math.isfinite(v) and v <= 1e-12
    assert js_divergence(q, p) == v


@settings(max_examples=150)
@given(prob, prob)
def test_jsd_properties_random_histograms(p, q):
    p = np.asarray(p) / sum(p)
    q = np.asarray(q) / sum(q)
    a, b = js_divergence(p, q), js_divergence(q, p)
    assert abs(a - b) <= 1e-12
    assert 0.0 <= a <= 1.0
    assert js_divergence(p, p) == 0.0
    assert abs(a - jensenshannon(p, q, base=2) ** 2) <= 1e-9
    assert abs(a - reference_jsd(p, q)) <= 1e-12


def test_dataset_matrix_identical_and_shifted():
    rng = np.random.default_rng(8)
    base = rng.normal(1500, 100, 60)
    rows, skipped = dataset_jsd_matrix({"Liver": {"a": base, "b": base.copy()}})
    assert skipped == [] and [r.mean_jsd for r in rows] == [0.0, 0.0]
    near = rng.normal(1500, 100, 60)
    far = base + 10_000
    rows, _ = dataset_jsd_matrix({"Liver": {"a": base, "b": near, "c": far}, "Brain": {"a": base}})
    means = {r.dataset: r.mean_jsd for r in rows}
    assert means["c"] == pytest.approx(1.0, abs=1e-12)
    assert means["c"] > means["a"] and means["c"] > means["b"]
    assert all(r.n_peers == 2 for r in rows)
    assert "Brain" in dataset_jsd_matrix({"Liver": {"a": base, "b": near}, "Brain": {"a": base}})[1]


def _reference_hist(samples, lo, hi, n_bins):
    counts = [0] * n_bins
    width = (hi - lo) / n_bins
    for s in samples:
        k = min(int((s - lo) / width), n_bins - 1)
        counts[k] += 1
    return [c / len(samples) for c in counts]


def test_gaussian_triplets_match_reference():
    rng = np.random.default_rng(9)
    for _ in range(5):
        data = {d: rng.normal(rng.uniform(0, 5), rng.uniform(0.5, 2), rng.integers(30, 90)) for d in "xyz"}
        rows, _ = dataset_jsd_matrix({"s": data})
        pooled = np.concatenate(list(data.values()))
        lo, hi = float(pooled.min()), float(pooled.max())
        hist = {d: _reference_hist(v, lo, hi, 64) for d, v in data.items()}
        for r in rows:
            ref = np.mean([reference_jsd(hist[r.dataset], hist[o]) for o in "xyz" if o != r.dataset])
            # bin assignment can differ only for samples falling exactly on an edge
            assert r.mean_jsd == pytest.approx(ref, abs=1e-9)


def test_boxplot_svg_is_static_markup():
    rows, _ = dataset_jsd_matrix({"s": {"a": [1.0, 2.0], "b": [1.0, 3.0]}, "t": {"a": [1.0], "b": [2.0]}})
    svg = jsd_boxplot_svg(rows)
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert svg == jsd_boxplot_svg(rows)


# --------------------------------------------------------------------------- #
# age model

def test_quadratic_exact_recovery():
    x = np.arange(20, 80, 3.0)
    fit = quadratic_fit(x, 2 * x ** 2 - 3 * x + 1)
    assert abs(fit.a - 2) < 1e-9 and abs(fit.b + 3) < 1e-9 and abs(fit.c - 1) < 1e-9
    assert fit.rms < 1e-9 and fit.n == x.size
    np.testing.assert_allclose(fit(x), 2 * x ** 2 - 3 * x + 1, rtol=1e-12)


def test_quadratic_constant():
    x = [20, 30, 40, 50]
    fit = quadratic_fit(x, [7.5] * 4)
    assert fit.a == pytest.approx(0, abs=1e-12) and fit.b == pytest.approx(0, abs=1e-10)
    assert fit.c == pytest.approx(7.5, abs=1e-9)


def test_quadratic_noisy_matches_grid_refinement():
    rng = np.random.default_rng(10)
    x = rng.uniform(20, 80, 200) / 10.0
    y = 0.5 * x ** 2 - 1.2 * x + 3.0 + rng.normal(0, 0.3, x.size)
    fit = quadratic_fit(x, y)
    a, b, c = grid_refine_quadratic(x, y)
    np.testing.assert_allclose([fit.a, fit.b, fit.c], [a, b, c], atol=1e-5)
    cost = lambda p: float(np.sum((p[0] * x ** 2 + p[1] * x + p[2] - y) ** 2))  # noqa: E731
    assert cost((fit.a, fit.b, fit.c)) <= cost((a, b, c)) + 1e-9


def test_quadratic_degenerate():
    with pytest.raises(DegenerateFitError):
        quadratic_fit([40, 40, 50, 50], [1, 2, 3, 4])
    with pytest.raises(ValueError):
        quadratic_fit([1, 2, 3], [1, 2])


# --------------------------------------------------------------------------- #
# co-occurrence

def _case(vid, diag, lesion_in=()):
    vox = np.zeros(G.dims, np.uint16)
    vox[0] = 13
    vox[1] = 26
    vox[2] = 15
    lesion = np.zeros(G.dims, bool)
    for lid in lesion_in:
        lesion[tuple(np.argwhere(vox == lid)[0])] = True
    return _lv(vox), lesion, PatientMeta(vid, diagnosis=diag)


def test_two_lymphoma_patients():
    t = cancer_cooccurrence([_case("a", "lymphoma", [13]), _case("b", "lymphoma")])
    assert t.probability(13, "lymphoma") == 0.5
    assert t.probability(26, "lymphoma") == 0.0


def test_empty_lesions_all_zero():
    t = cancer_cooccurrence([_case("a", "melanoma"), _case("b", "lung")])
    assert all(t.probability(s, d) == 0.0 for s in t.structures for d in t.diagnoses)


def test_planted_cohort_hand_table():
    cases = [
        _case("p1", "lymphoma", [13, 26]),
        _case("p2", "lymphoma", [26]),
        _case("p3", "lymphoma", []),
        _case("p4", "melanoma", [15]),
        _case("p5", "negative", [13, 26, 15]),
        _case("p6", "lung", [13, 15]),
        _case("p7", "lung", [15]),
    ]
    t = cancer_cooccurrence(cases)
    assert t.diagnoses == ["lung", "lymphoma", "melanoma"]
    assert t.patients == {"lymphoma": 3, "melanoma": 1, "lung": 2}
    table = {(s, d): t.probability(s, d) for s in (13, 26, 15) for d in t.diagnoses}
    hand = {(13, "lymphoma"): 1 / 3, (26, "lymphoma"): 2 / 3, (15, "lymphoma"): 0.0,
            (13, "melanoma"): 0.0, (26, "melanoma"): 0.0, (15, "melanoma"): 1.0,
            (13, "lung"): 0.5, (26, "lung"): 0.0, (15, "lung"): 1.0}
    assert table == hand
    with pytest.raises(GeometryMismatchError):
        cancer_cooccurrence([(_lv(np.zeros(G.dims)), np.zeros((2, 2, 2)), PatientMeta("x"))])


# --------------------------------------------------------------------------- #
# patient metadata

def test_meta_normalisation_and_csv(tmp_path):
    metas = [PatientMeta("a", "m", 61.5, "lymphoma"), PatientMeta("b", "", None, ""), PatientMeta("c", "F", 30)]
    assert metas[0].sex == "M" and metas[1].sex == "unknown" and metas[1].diagnosis == "negative"
    write_meta_csv(tmp_path / "meta.csv", metas)
    back = read_meta_csv(tmp_path / "meta.csv")
    assert list(back.values()) == metas
    with pytest.raises(ValueError):
        PatientMeta("x", age=-1)
    (tmp_path / "bad.csv").write_text("volume_id,sex\nx,M\n")
    with pytest.raises(ValueError):
        read_meta_csv(tmp_path / "bad.csv")
