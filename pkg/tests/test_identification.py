import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbctooth import identification as idn
from cbctooth.detection import Detection
from cbctooth.exceptions import CapacityWarning, SequenceAnomalyWarning

CODE = {"I": 1, "C": 2, "P": 3, "M": 4}
FULL = "MMMPPCIIIICPPMMM"


def dets_from(seq, spacing=20.0, start=10.0):
    return [Detection((start + spacing * k, 100.0, 15.0, 60.0), 0.9, CODE[c]) for k, c in enumerate(seq)]


def fdis(teeth):
    return [t.fdi for t in teeth]


def test_full_upper_sequence():
    out = idn.identify(dets_from(FULL), "upper")
    assert [t.id.number for t in out] == [8, 7, 6, 5, 4, 3, 2, 1, 1, 2, 3, 4, 5, 6, 7, 8]
    assert [t.id.quadrant for t in out] == [1] * 8 + [2] * 8


def test_full_lower_sequence():
    out = idn.identify(dets_from(FULL), "lower")
    assert fdis(out) == [48, 47, 46, 45, 44, 43, 42, 41, 31, 32, 33, 34, 35, 36, 37, 38]


def test_flip_swaps_sides():
    out = idn.identify(dets_from(FULL), "upper", flip=True)
    assert fdis(out)[:2] == [28, 27]


def test_split_between_middle_incisors():
    dets = dets_from(FULL)
    split, anchored = idn.find_split(dets)
    assert anchored and split == pytest.approx((dets[7].box[0] + dets[8].box[0]) / 2)


def test_single_canine():
    (t,) = idn.identify([Detection((100.0, 50.0, 10.0, 40.0), 0.9, 2)], "upper", midline=320)
    assert t.id.number == 3 and t.id.quadrant == 1
    (t,) = idn.identify([Detection((400.0, 50.0, 10.0, 40.0), 0.9, 2)], "lower", midline=320)
    assert t.fdi == 33
    with pytest.raises(ValueError):
        idn.identify([Detection((100.0, 50.0, 10.0, 40.0), 0.9, 2)], "upper")


def test_empty_and_bad_jaw():
    assert idn.identify([], "upper") == []
    assert idn.identify_with_gaps([], "lower") == []
    with pytest.raises(ValueError):
        idn.identify(dets_from(FULL), "middle")


def test_sequence_anomaly_reports_indices():
    seq = "MMMPPCIICIICPPMMM"
    # the extra canine also overflows the quadrant's canine capacity
    with pytest.warns(CapacityWarning), pytest.warns(SequenceAnomalyWarning) as rec:
        idn.identify(dets_from(seq), "upper")
    (anomaly,) = [w.message for w in rec if isinstance(w.message, SequenceAnomalyWarning)]
    assert anomaly.indices


def test_complete_sequence_has_no_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        idn.identify(dets_from(FULL), "upper")
        idn.identify_with_gaps(dets_from(FULL), "upper")


def test_capacity_overflow():
    with pytest.warns(CapacityWarning):
        out = idn.identify(dets_from("MMMMPPCIIIICPPMMM"), "upper")
    assert out[0].id.number is None and out[1].id.number == 8


def test_molar_capacity_two():
    out = idn.identify(dets_from("MMPPCIIIICPPMM"), "upper", molar_capacity=2)
    assert fdis(out)[:2] == [17, 16]


@settings(max_examples=40, deadline=None)
@given(st.permutations(range(16)))
def test_input_order_does_not_matter(perm):
    dets = dets_from(FULL)
    ref = idn.identify(dets, "upper")
    assert idn.identify([dets[k] for k in perm], "upper") == ref


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from("ICPM"), min_size=2, max_size=20))
def test_numbers_match_classes(seq):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for fn in (idn.identify, idn.identify_with_gaps):
            for t in fn(dets_from(seq), "lower"):
                assert t.id.quadrant in (3, 4)
                if t.id.number is not None:
                    assert idn.class_of_number(t.id.number) == t.class_id
            numbered = [t.fdi for t in fn(dets_from(seq), "lower") if t.fdi is not None]
            assert len(numbered) == len(set(numbered))


def test_gaps_equals_identify_when_complete():
    assert idn.identify_with_gaps(dets_from(FULL), "upper") == idn.identify(dets_from(FULL), "upper")


def test_gaps_first_premolars_missing():
    seq = "MMMPCIIIICPMMM"
    out = idn.identify_with_gaps(dets_from(seq), "upper")
    by_class = {}
    for t in out:
        by_class.setdefault(t.class_id, []).append(t)
    assert all(t.id.number is None for t in by_class[3])
    assert sorted(t.fdi for t in by_class[1] + by_class[2] + by_class[4]) == [
        11, 12, 13, 16, 17, 18, 21, 22, 23, 26, 27, 28,
    ]
    # plain identify would misnumber the lone premolar as 4
    assert {t.id.number for t in idn.identify(dets_from(seq), "upper") if t.class_id == 3} == {4}


def test_gaps_one_molar_missing_per_quadrant():
    out = idn.identify_with_gaps(dets_from("MMPPCIIIICPPMM"), "lower")
    assert all(t.id.number is None for t in out if t.class_id == 4)
    assert all(t.id.number is not None for t in out if t.class_id != 4)


def test_gaps_without_four_incisors():
    out = idn.identify_with_gaps(dets_from("MMMPPCIIICPPMMM"), "upper")
    assert all(t.id.number is None for t in out if t.class_id == 1)
    assert [t.fdi for t in out if t.class_id == 2] == [13, 23]


def test_tooth_id_invariants():
    assert idn.ToothID("upper", 2, 6, 4).fdi == 26
    assert idn.ToothID.from_fdi(43) == idn.ToothID("lower", 4, 3, 2)
    assert idn.ToothID("lower", 3).fdi is None
    for args in (("upper", 3, 1, 1), ("lower", 1, 1, 1), ("upper", 1, 9, None), ("upper", 1, 3, 1), ("mid", 1)):
        with pytest.raises(ValueError):
            idn.ToothID(*args)


def test_identification_roundtrip(tmp_path):
    seq = "MMMPCIIIICPMMM"
    out = idn.identify_with_gaps(dets_from(seq), "upper")
    p = str(tmp_path / "id.json")
    idn.save_identification(out, p)
    back = idn.load_identification(p)
    assert [(t.fdi, t.class_id, t.id.quadrant) for t in back] == [(t.fdi, t.class_id, t.id.quadrant) for t in out]
