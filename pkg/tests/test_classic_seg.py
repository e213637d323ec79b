import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from oracles import otsu_single_oracle, otsu_two_level_oracle
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage import morphology

from cbctooth import classic_seg as cs
from cbctooth.exceptions import (
    DegenerateHistogramError,
    JawsNotSeparatedError,
    NotSeparableError,
    SkeletonError,
)
from cbctooth.panorama import mip_z
from cbctooth.volume import BinaryVolume3, Volume3


def spikes(positions, bins=256, mass=100):
    counts = np.zeros(bins, np.int64)
    counts[list(positions)] = mass
    return counts


def test_histogram_two_bins():
    h = cs.histogram(Volume3(np.array([0, 0, 10, 10], np.uint16).reshape(2, 2, 1)), bins=2)
    assert h.counts.tolist() == [2, 2]
    assert h.bin_edges.tolist() == [0.0, 5.0, 10.0]


def test_histogram_conserves_voxels(volume):
    h = cs.histogram(volume, 256)
    assert h.counts.sum() == np.prod(volume.dims)


def test_histogram_constant_volume():
    with pytest.raises(DegenerateHistogramError):
        cs.histogram(Volume3(np.full((3, 3, 3), 9, np.uint16)))


@settings(max_examples=50, deadline=None)
@given(
    hnp.arrays(np.uint16, st.integers(2, 300), elements=st.integers(0, 4000)),
    st.integers(2, 64),
)
def test_histogram_integer_and_float_paths_agree(values, bins):
    if values.min() == values.max():
        return
    hi = cs.histogram(values, bins)
    hf = cs.histogram(values.astype(np.float64), bins)
    np.testing.assert_array_equal(hi.counts, hf.counts)
    # x >= edge[t] exactly when x's bin index is >= t
    idx = np.minimum((values.astype(np.int64) - values.min()) * bins // (int(values.max()) - values.min()), bins - 1)
    for t in range(bins + 1):
        assert np.array_equal(values >= hi.bin_edges[t], idx >= t) or t == bins


def test_otsu_three_spikes():
    t0, t1 = cs.otsu_two_level_bins(spikes([10, 120, 240]))
    assert 10 < t0 <= 120 < t1 <= 240


def test_otsu_two_nonempty_bins():
    with pytest.raises(NotSeparableError):
        cs.otsu_two_level_bins(spikes([10, 200]))


def test_otsu_single_spikes():
    t = cs.otsu_single_bins(spikes([50, 200]))
    assert 50 < t <= 200
    with pytest.raises(NotSeparableError):
        cs.otsu_single_bins(spikes([50]))


def test_otsu_phantom_matches_oracle(volume):
    h = cs.histogram(volume, 256)
    assert cs.otsu_two_level_bins(h.counts) == otsu_two_level_oracle(h.counts)
    t0, t1 = cs.otsu_two_level(h)
    # air | soft tissue | bone and teeth
    assert 0 < t0 <= 1000 < t1 <= 2500


def test_otsu_single_mip_matches_oracle(step1):
    h = cs.histogram(step1.upper.mip, 256)
    assert cs.otsu_single_bins(h.counts) == otsu_single_oracle(h.counts)


def test_otsu_tie_break_is_lexicographic():
    # symmetric histogram with two equally good cuts
    counts = spikes([0, 1, 2, 3], bins=4)
    assert cs.otsu_single_bins(counts) == 2
    counts = np.array([1, 1, 0, 1, 1])
    assert cs.otsu_single_bins(counts) == 2


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.int64, st.integers(3, 24), elements=st.integers(0, 50)))
def test_otsu_matches_oracle_on_small_histograms(counts):
    if np.count_nonzero(counts) >= 3:
        assert cs.otsu_two_level_bins(counts) == otsu_two_level_oracle(counts)
    if np.count_nonzero(counts) >= 2:
        assert cs.otsu_single_bins(counts) == otsu_single_oracle(counts)


def test_binarize_bone():
    v = Volume3(np.full((2, 2, 2), 10.0))
    assert cs.binarize_bone(v, 5).data.all()
    assert not cs.binarize_bone(v, 20).data.any()
    ramp = Volume3(np.arange(256, dtype=np.uint16).reshape(4, 8, 8))
    np.testing.assert_array_equal(cs.binarize_bone(ramp, 128).data, ramp.data >= 128)


def test_split_jaws_by_size():
    m = np.zeros((30, 30, 30), bool)
    m[0:10, 0:10, 0:10] = True  # 1000 voxels
    m[20:30, 20:30, 25:30] = True  # 500 voxels
    jaws = cs.split_jaws(BinaryVolume3(m))
    assert jaws.lower.count() == 1000 and jaws.lower.data[0, 0, 0]
    assert jaws.upper.count() == 500 and jaws.upper.data[29, 29, 29]


def test_split_jaws_tie_goes_to_first_linear_index():
    m = np.zeros((20, 20, 20), bool)
    m[12:16, 0:4, 0:4] = True
    m[0:4, 10:14, 0:4] = True
    jaws = cs.split_jaws(m)
    # Fortran order: x varies fastest, so (12, 0, 0) precedes (0, 10, 0)
    assert jaws.lower.data[12, 0, 0] and jaws.upper.data[0, 10, 0]


def test_split_jaws_ignores_specks():
    m = np.zeros((40, 40, 40), bool)
    m[0:20, 0:20, 0:10] = True
    m[0:20, 0:20, 20:28] = True
    m[39, 39, 39] = True
    jaws = cs.split_jaws(m)
    assert jaws.upper.count() == 20 * 20 * 8


def test_split_jaws_single_blob():
    m = np.zeros((10, 10, 10), bool)
    m[2:8, 2:8, 2:8] = True
    with pytest.raises(JawsNotSeparatedError) as exc:
        cs.split_jaws(m)
    assert exc.value.stage == "split_jaws"


def test_split_jaws_diagonal_contact_is_connected():
    # 26-connectivity: corner-touching cubes form one component
    m = np.zeros((10, 10, 10), bool)
    m[0:3, 0:3, 0:3] = True
    m[3:6, 3:6, 3:6] = True
    with pytest.raises(JawsNotSeparatedError):
        cs.split_jaws(m)


def test_split_jaws_phantom_matches_truth(volume, truth):
    _, t1 = cs.otsu_two_level(cs.histogram(volume))
    jaws = cs.split_jaws(cs.binarize_bone(volume, t1))
    np.testing.assert_array_equal(jaws.upper.data, truth.jaw_masks["upper"].data)
    np.testing.assert_array_equal(jaws.lower.data, truth.jaw_masks["lower"].data)


def test_closing_examples():
    yy, xx = np.mgrid[:41, :41]
    disk = (yy - 20) ** 2 + (xx - 20) ** 2 <= 12**2
    np.testing.assert_array_equal(cs.closing_2d(disk, 3), disk)
    two = np.zeros((20, 30), bool)
    two[5:15, 3:14] = True
    two[5:15, 15:27] = True
    closed = cs.closing_2d(two, 2)
    assert ndimage.label(closed)[1] == 1
    assert closed[7:13, 14].all()
    padded = morphology.binary_closing(np.pad(two, 2), morphology.disk(2))[2:-2, 2:-2]
    np.testing.assert_array_equal(closed, padded | two)
    assert not cs.closing_2d(np.zeros((8, 8), bool), 2).any()


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(bool, st.tuples(st.integers(1, 20), st.integers(1, 20))), st.integers(1, 4))
def test_closing_is_extensive_and_idempotent(img, r):
    once = cs.closing_2d(img, r)
    assert (once | ~img).all()
    np.testing.assert_array_equal(cs.closing_2d(once, r), once)


def test_skeleton_of_bar():
    bar = np.zeros((40, 11), bool)
    bar[5:35, 4:7] = True
    path = cs.skeletonize_2d(bar)
    assert set(path[:, 1]) == {5}
    assert np.all(np.abs(np.diff(path[:, 0])) == 1)


def test_skeleton_errors():
    with pytest.raises(SkeletonError):
        cs.skeletonize_2d(np.zeros((5, 5), bool))
    two = np.zeros((10, 10), bool)
    two[1:3, 1:3] = two[6:9, 6:9] = True
    with pytest.raises(SkeletonError):
        cs.skeletonize_2d(two)


def test_skeleton_prunes_branches():
    img = np.zeros((50, 50), bool)
    img[24:27, 5:45] = True
    img[10:25, 24:27] = True  # side branch
    path = cs.skeletonize_2d(img)
    span = np.ptp(path[:, 1])
    assert span >= 35
    steps = np.abs(np.diff(path, axis=0)).max(axis=1)
    assert (steps == 1).all()


def test_skeleton_follows_phantom_arch(step1, truth):
    for jaw in ("upper", "lower"):
        skel = step1.jaw(jaw).skeleton
        d, _ = cKDTree(truth.arch_curves[jaw]).query(skel)
        assert d.mean() < 1.5


def test_mip_masks_other_jaw(volume, truth):
    up = mip_z(volume, truth.jaw_masks["upper"])
    low = mip_z(volume, truth.jaw_masks["lower"])
    assert up.data.max() == low.data.max() == 3500
