import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdnhoi.boxes import Corners
from cdnhoi.data import HoiClassTable, HoiDataset, HoiInstance, ImageRecord, ScoredTriplet, save_annotations, \
    save_class_table, save_predictions
from cdnhoi.evaluation import (VocabularyError, average_precision, evaluate, evaluate_files, format_report,
                               match_to_gt)

from helpers import clean_room_map


def test_ap_examples():
    assert average_precision([True, False, True], None, 2) == pytest.approx(0.8333333333, abs=1e-9)
    assert average_precision([True, True], None, 2) == 1.0
    assert average_precision([False, False], None, 2) == 0.0
    assert average_precision([], None, 3) == 0.0
    assert average_precision([True], None, 0) == 0.0
    assert average_precision([False, True], None, 1) == 0.5


def test_ap_rejects_unsorted_scores():
    with pytest.raises(ValueError):
        average_precision([True, False], [0.2, 0.9], 2)


@given(st.lists(st.booleans(), max_size=30), st.integers(0, 5))
def test_ap_bounded(flags, extra):
    n = sum(flags) + extra
    ap = average_precision(flags, None, n)
    assert 0.0 <= ap <= 1.0


@given(st.lists(st.booleans(), min_size=1, max_size=30), st.integers(1, 5))
def test_appending_false_positive_never_raises_ap(flags, extra):
    n = sum(flags) + extra
    assert average_precision(flags + [False], None, n) <= average_precision(flags, None, n) + 1e-15


@given(st.lists(st.booleans(), min_size=1, max_size=30), st.integers(1, 5))
def test_appending_true_positive_never_lowers_ap(flags, extra):
    n = sum(flags) + extra
    assert average_precision(flags + [True], None, n) >= average_precision(flags, None, n) - 1e-15


B = Corners(0, 0, 10, 10)
O = Corners(20, 0, 30, 10)


def _pred(h, o, s, cls=0, act=0, img="a"):
    return ScoredTriplet(h, o, cls, act, s, 1.0, 1.0, img)


def test_match_requires_both_boxes():
    off = Corners(0, 6, 10, 16)  # iou 4/16 with B
    assert match_to_gt([_pred(B, O, 0.9)], [(B, O)]) == [True]
    assert match_to_gt([_pred(off, O, 0.9)], [(B, O)]) == [False]
    assert match_to_gt([_pred(B, off, 0.9)], [(B, O)]) == [False]


def test_duplicate_detection_is_false_positive():
    assert match_to_gt([_pred(B, O, 0.9), _pred(B, O, 0.8)], [(B, O)]) == [True, False]


def test_match_prefers_best_overlap_then_lower_index():
    near = Corners(0, 0, 10, 11)
    assert match_to_gt([_pred(B, O, 0.9)], [(near, O), (B, O)]) == [True]
    flags = match_to_gt([_pred(B, O, 0.9), _pred(near, O, 0.8)], [(near, O), (B, O)])
    assert flags == [True, True]
    assert match_to_gt([_pred(B, O, 0.9), _pred(B, O, 0.8)], [(B, O), (B, O)]) == [True, True]


def _dataset(seed, n_img=6, C_o=2, C_a=2):
    rng = np.random.default_rng(seed)
    images = []
    for i in range(n_img):
        hois = []
        for _ in range(rng.integers(1, 4)):
            x, y = rng.uniform(0, 40, 2)
            hois.append(HoiInstance(Corners(x, y, x + 15, y + 20), Corners(x + 10, y, x + 22, y + 12),
                                    int(rng.integers(C_o)), tuple(sorted({int(rng.integers(C_a)) for _ in range(2)}))))
        images.append(ImageRecord(f"{i:03d}", 64, 64, hois))
    ds = HoiDataset(C_o, C_a, images)
    return ds, HoiClassTable.from_dataset(ds, rare_threshold=3)


def _noisy_predictions(ds, seed):
    rng = np.random.default_rng(seed)
    preds = []
    for rec in ds.images:
        for h in rec.hois:
            for a in range(ds.num_action_classes):
                for _ in range(rng.integers(0, 3)):
                    j = rng.normal(0, 2.5, 4)
                    hb = Corners(h.human_box.x1 + j[0], h.human_box.y1 + j[1],
                                 h.human_box.x2 + j[0], h.human_box.y2 + j[1])
                    ob = Corners(h.object_box.x1 + j[2], h.object_box.y1 + j[3],
                                 h.object_box.x2 + j[2], h.object_box.y2 + j[3])
                    cls = h.object_class if rng.uniform() < 0.8 else int(rng.integers(ds.num_object_classes))
                    preds.append(ScoredTriplet(hb, ob, cls, a, *rng.uniform(0.05, 1, 3), rec.image_id))
    return preds


@pytest.mark.parametrize("seed", range(10))
def test_matches_clean_room(seed):
    ds, table = _dataset(seed)
    preds = _noisy_predictions(ds, seed)
    res = evaluate(preds, ds, table)
    aps, full, rare, nonrare = clean_room_map(preds, ds, table)
    for c, ap in zip(res.classes, res.ap):
        if ap is None:
            assert c not in aps
        else:
            assert ap == pytest.approx(aps[c], abs=1e-9)
    for mine, ref in ((res.map_full, full), (res.map_rare, rare), (res.map_nonrare, nonrare)):
        assert (math.isnan(mine) and math.isnan(ref)) or mine == pytest.approx(ref, abs=1e-9)


def test_perfect_predictions_score_one():
    ds, table = _dataset(0)
    preds = [ScoredTriplet(h.human_box, h.object_box, h.object_class, a, 0.9, 0.9, 0.9, r.image_id)
             for r in ds.images for h in r.hois for a in h.actions]
    assert evaluate(preds, ds, table).map_full == pytest.approx(1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000))
def test_rank_preserving_rescale_keeps_map(seed):
    ds, table = _dataset(seed % 7)
    preds = _noisy_predictions(ds, seed)
    res = evaluate(preds, ds, table)
    squashed = [ScoredTriplet(p.human_box, p.object_box, p.object_class, p.action,
                              p.action_score ** 2, p.object_score ** 2, p.interactive_score ** 2, p.image_id)
                for p in preds]
    res2 = evaluate(squashed, ds, table)
    assert res.ap == res2.ap


def test_empty_predictions_and_empty_split():
    ds, table = _dataset(1)
    res = evaluate([], ds, table)
    assert res.map_full == 0.0
    table_nr = HoiClassTable(table.classes, table.counts, rare_threshold=0)
    assert math.isnan(evaluate([], ds, table_nr).map_rare)
    assert "nan" in format_report(evaluate([], ds, table_nr))


def test_vocabulary_mismatch():
    ds, table = _dataset(2)
    with pytest.raises(VocabularyError):
        evaluate([], ds, table, num_objects=3, num_actions=2)
    small = HoiClassTable(table.classes[:1], table.counts[:1])
    with pytest.raises(VocabularyError):
        evaluate([], ds, small)


def test_evaluate_files_and_report(tmp_path):
    ds, table = _dataset(3)
    preds = _noisy_predictions(ds, 3)
    save_annotations(tmp_path / "gt.jsonl", ds)
    save_class_table(tmp_path / "classes.json", table)
    save_predictions(tmp_path / "p.jsonl", preds, ds.num_object_classes, ds.num_action_classes)
    res = evaluate_files(tmp_path / "p.jsonl", tmp_path / "gt.jsonl", tmp_path / "classes.json")
    assert res.ap == evaluate(preds, ds, table).ap
    report = format_report(res)
    assert report.splitlines()[2].startswith("Default")
    assert f"{100 * res.map_full:.4f}" in report
