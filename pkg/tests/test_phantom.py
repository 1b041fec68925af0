import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from labelforge.errors import PhantomSpecError
from labelforge.labelscheme import opposite_sex_labels
from labelforge.phantom import (
    AIR_HU, BONE_HU, SOFT_HU, PhantomSpec, default_phantom_spec, generate, load_phantom_spec, render_truth,
    save_phantom_spec,
)

KIDNEYS = (15, 16)


def _digest(out):
    h = hashlib.sha256()
    for key in ("truth", "corrupted", "intensity"):
        h.update(np.ascontiguousarray(out[key].voxels).tobytes())
    return h.hexdigest()


def test_no_corruptions_means_corrupted_equals_truth():
    out = generate(default_phantom_spec(3, corruptions=None))
    assert out["corrupted"] == out["truth"]


def test_determinism():
    spec = default_phantom_spec(7)
    assert _digest(generate(spec)) == _digest(generate(default_phantom_spec(7)))
    assert _digest(generate(spec)) != _digest(generate(default_phantom_spec(8)))


def test_swap_kidneys_differs_exactly_on_kidneys():
    spec = default_phantom_spec(2, corruptions=[{"type": "swap_sides", "pairs": [list(KIDNEYS)]}])
    out = generate(spec)
    t, c = out["truth"].voxels, out["corrupted"].voxels
    diff = t != c
    np.testing.assert_array_equal(diff, np.isin(t, KIDNEYS))
    assert (c[t == 15] == 16).all() and (c[t == 16] == 15).all()


def test_bundle_changes_only_declared_things(scheme):
    out = generate(default_phantom_spec(5))
    t, c = out["truth"].voxels, out["corrupted"].voxels
    changed = t != c
    # relabels touch paired ids and ribs; blobs are painted on background
    relabel_ids = set(scheme.ribs) | {15, 16, 100, 101}
    assert np.isin(t[changed & (t != 0)], sorted(relabel_ids)).all()
    added = set(np.unique(c[changed & (t == 0)]).tolist())
    wrong = opposite_sex_labels(scheme, out["meta"].sex)
    assert added <= {13, 26, 10, 18} | wrong
    assert added & wrong


def test_truth_structures_do_not_overlap():
    spec = default_phantom_spec(0, corruptions=None)
    truth = render_truth(spec)
    total = 0
    for s in spec.structures:
        one = PhantomSpec(dims=spec.dims, structures=[s])
        m = render_truth(one) != 0
        total += int(m.sum())
        assert (truth[m] == s["label"]).all()
    assert total == int((truth != 0).sum())


def test_overlap_is_rejected():
    boxes = [{"name": "a", "label": 13, "lo": [0, 0, 0], "hi": [3, 3, 3]},
             {"name": "b", "label": 26, "lo": [3, 3, 3], "hi": [5, 5, 5]}]
    with pytest.raises(PhantomSpecError, match="overlaps"):
        generate(PhantomSpec(dims=(8, 8, 8), structures=boxes))


@pytest.mark.parametrize("bad", [
    {"name": "x", "label": 13, "lo": [0, 0, 0], "hi": [9, 1, 1]},
    {"name": "x", "label": 13, "lo": [2, 0, 0], "hi": [1, 1, 1]},
    {"name": "x", "label": 13, "lo": [0, 0, 0], "hi": [1, 1, 1], "shape": "torus"},
])
def test_bad_structures(bad):
    with pytest.raises(PhantomSpecError):
        generate(PhantomSpec(dims=(8, 8, 8), structures=[bad]))


def test_spec_validation():
    with pytest.raises(PhantomSpecError):
        PhantomSpec(seed=-1)
    with pytest.raises(PhantomSpecError):
        PhantomSpec(sex="X")
    with pytest.raises(PhantomSpecError):
        PhantomSpec(corruptions=[{"type": "melt"}])
    with pytest.raises(PhantomSpecError):
        PhantomSpec.from_dict({"dims": [4, 4, 4], "colour": "red"})


def test_json_round_trip(tmp_path):
    spec = default_phantom_spec(11)
    save_phantom_spec(spec, tmp_path / "spec.json")
    again = load_phantom_spec(tmp_path / "spec.json")
    assert again == spec
    assert _digest(generate(again)) == _digest(generate(spec))


def test_intensity_values(scheme):
    out = generate(default_phantom_spec(1, corruptions=None))
    t, hu = out["truth"].voxels, out["intensity"].voxels
    assert out["intensity"].geometry == out["truth"].geometry
    assert set(np.unique(hu).tolist()) == {AIR_HU, SOFT_HU, BONE_HU}
    assert (hu[t == 0] == AIR_HU).all()
    assert (hu[t == 99] == BONE_HU).all() and (hu[np.isin(t, scheme.vertebrae)] == BONE_HU).all()
    assert (hu[np.isin(t, scheme.ribs)] == BONE_HU).all()
    assert (hu[t == 13] == SOFT_HU).all()


def test_noise_flag_defaults_off():
    spec = default_phantom_spec(1, corruptions=None)
    assert spec.noise_hu == 0.0
    spec.noise_hu = 5.0
    noisy = generate(spec)["intensity"].voxels
    assert len(np.unique(noisy)) > 3
    assert _digest(generate(spec)) == _digest(generate(spec))


def test_meta_and_layout(scheme):
    for seed in range(4):
        out = generate(default_phantom_spec(seed))
        present = out["truth"].present_ids()
        assert set(scheme.ribs) <= set(present)
        assert set(range(43, 67)) <= set(present)
        meta = out["meta"]
        assert meta.volume_id == f"phantom-{seed}" and meta.sex in ("M", "F") and 20 <= meta.age <= 80
        assert not opposite_sex_labels(scheme, meta.sex) & set(present)
    assert generate(default_phantom_spec(0, sex="F"))["meta"].sex == "F"


@settings(max_examples=15)
@given(st.integers(0, 2 ** 63))
def test_any_seed_generates_valid_volumes(seed):
    spec = default_phantom_spec(seed)
    out = generate(spec)
    assert out["truth"].voxels.shape == spec.dims
    assert out["truth"] != out["corrupted"]
