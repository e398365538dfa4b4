import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nltrack.evaluation import (FormatError, PredictionRecord, SequenceAnnotation, evaluate, evaluate_many,
                                ingest_sequence, occlusion_ends, parse_groundtruth, precision_curves,
                                read_predictions, recovery_stats, success_curve, write_groundtruth,
                                write_predictions)
from nltrack.geometry import BBox
from nltrack.imaging import save_frame

GT = [BBox.from_xywh(10 + 3 * t, 20, 40, 30) for t in range(20)]


def _fixture_dir(tmp_path, lines, n_frames=3, occ=None, nlp=None):
    d = tmp_path / "seq"
    (d / "img").mkdir(parents=True)
    for t in range(n_frames):
        save_frame(d / "img" / f"{t + 1:04d}.png", np.zeros((40, 50, 3), np.uint8))
    (d / "groundtruth_rect.txt").write_text("\n".join(lines) + "\n")
    if occ is not None:
        (d / "full_occlusion.txt").write_text("\n".join(occ) + "\n")
    if nlp is not None:
        (d / "nlp.txt").write_text(nlp + "\n")
    return d


def test_minimal_fixture_parses(tmp_path):
    d = _fixture_dir(tmp_path, ["1,2,10,20", "3\t4\t10\t20", "5,6,10,20"], occ=["0", "1", "0"], nlp="red dot")
    frames, ann = ingest_sequence(d)
    assert len(frames) == 3 and ann.name == "seq" and ann.description == "red dot"
    assert [b.xywh() for b in ann.boxes] == [(1, 2, 10, 20), (3, 4, 10, 20), (5, 6, 10, 20)]
    assert ann.occluded == [False, True, False]


def test_bad_line_names_line_one(tmp_path):
    d = _fixture_dir(tmp_path, ["bad,data", "1,2,3,4", "1,2,3,4"])
    with pytest.raises(FormatError, match=":1:") as err:
        ingest_sequence(d)
    assert err.value.line == 1


def test_frame_count_mismatch_rejected(tmp_path):
    d = _fixture_dir(tmp_path, ["1,2,3,4"] * 2)
    with pytest.raises(ValueError, match="3 frames"):
        ingest_sequence(d)


def test_absent_target_rows(tmp_path):
    p = tmp_path / "gt.txt"
    p.write_text("0,0,0,0\n5,5,10,10\n")
    boxes = parse_groundtruth(p)
    assert boxes[0] is None and boxes[1].xywh() == (5, 5, 10, 10)
    # absent frames drop out of every denominator
    preds = [BBox.from_xywh(100, 100, 5, 5), boxes[1]]
    assert success_curve(preds, boxes)[2] == success_curve(boxes[1:], boxes[1:])[2] >= 0.99
    assert precision_curves(preds, boxes)["precision"][2] == 1.0


def test_groundtruth_roundtrip_is_lossless(tmp_path):
    rng = np.random.default_rng(0)
    boxes = [None] + [BBox.from_xywh(*rng.uniform(0, 100, 2), *rng.uniform(1, 50, 2)) for _ in range(30)]
    write_groundtruth(tmp_path / "gt.txt", boxes)
    back = parse_groundtruth(tmp_path / "gt.txt")
    assert back[0] is None
    for a, b in zip(boxes[1:], back[1:]):
        assert a.xywh() == b.xywh()


def test_identical_predictions():
    _, curve, auc = success_curve(GT, GT)
    assert auc >= 0.99 and curve[-1] == 0.0
    pc = precision_curves(GT, GT)
    assert np.all(pc["precision"][1][1:] == 1.0) and np.all(pc["norm_precision"][1][1:] == 1.0)


def test_disjoint_predictions_score_zero():
    far = [BBox(1000, 1000, 5, 5)] * len(GT)
    assert success_curve(far, GT)[2] == 0.0


def test_half_at_point_six():
    # a 40-wide box shifted right by 10 px overlaps its GT at IoU 30/50 = 0.6
    gts = [BBox(0, 0, 40, 40)] * 10
    preds = [BBox(10, 0, 40, 40)] * 5 + [BBox(500, 0, 40, 40)] * 5
    thr, curve, _ = success_curve(preds, gts)
    assert curve[50] == 0.5 and curve[59] == 0.5 and curve[60] == 0.0


def test_length_mismatch_rejected():
    with pytest.raises(ValueError):
        success_curve(GT[:3], GT)
    with pytest.raises(ValueError):
        precision_curves(GT[:3], GT)


def test_constant_offset_gives_step():
    gts = [BBox(50, 50, 100, 40)] * 8
    preds = [BBox(60, 50, 100, 40)] * 8
    pc = precision_curves(preds, gts)
    thr, p, _ = pc["precision"]
    assert np.all(p[thr < 10] == 0) and np.all(p[thr >= 10] == 1)
    nthr, n, _ = pc["norm_precision"]
    assert np.all(n[nthr < 0.1 - 1e-9] == 0) and np.all(n[nthr >= 0.1 - 1e-9] == 1)


boxes_st = st.builds(BBox, st.floats(0, 100), st.floats(0, 100), st.floats(1, 60), st.floats(1, 60))


@given(st.lists(st.tuples(boxes_st, boxes_st), min_size=1, max_size=30))
def test_curves_monotone_and_bounded(pairs):
    preds, gts = zip(*pairs)
    _, s, s_auc = success_curve(preds, gts)
    assert np.all(np.diff(s) <= 0) and 0 <= s_auc <= 1
    for _, curve, auc in precision_curves(preds, gts).values():
        assert np.all(np.diff(curve) >= 0) and 0 <= auc <= 1


def test_recovery_on_perfect_predictions():
    occ = [False] * 5 + [True] * 4 + [False] * 11
    rs = recovery_stats(GT, GT, occ)
    assert rs.iou_after_occlusion == 1.0
    assert rs.frames_to_recover_after_occlusion == 1
    assert rs.frames_to_recover_after_loss is None
    assert rs.occlusion_events == 1


@given(st.lists(st.booleans(), min_size=20, max_size=20))
def test_recovery_on_perfect_predictions_any_pattern(occ):
    rs = recovery_stats(GT, GT, occ)
    if occlusion_ends(occ):
        assert rs.iou_after_occlusion == 1.0 and rs.frames_to_recover_after_occlusion == 1
    else:
        assert rs.iou_after_occlusion is None and rs.frames_to_recover_after_occlusion is None
    assert rs.frames_to_recover_after_loss is None


def test_twenty_frame_recovery_at_plus_five():
    occ = [False] * 5 + [True] * 5 + [False] * 10
    far = BBox(1000, 1000, 5, 5)
    # visible again at frame index 10; first overlap four frames later
    preds = [GT[t] if t < 5 or t >= 14 else far for t in range(20)]
    rs = recovery_stats(preds, GT, occ)
    assert rs.frames_to_recover_after_occlusion == 5
    assert rs.frames_to_recover_after_loss == 5
    assert rs.iou_after_occlusion == pytest.approx(6 / 10)


def test_never_recovering_is_censored():
    occ = [False] * 5 + [True] * 5 + [False] * 10
    far = [BBox(1000, 1000, 5, 5)] * 20
    rs = recovery_stats(far, GT, occ)
    assert rs.frames_to_recover_after_occlusion == 10
    assert rs.iou_after_occlusion == 0.0


def test_no_occlusion_events_are_absent_not_zero():
    rs = recovery_stats(GT, GT, [False] * 20)
    assert rs.iou_after_occlusion is None and rs.frames_to_recover_after_occlusion is None


def test_prediction_csv_roundtrip(tmp_path):
    recs = [PredictionRecord(t + 1, b, 0.5 + t / 100, "stable", "visual") for t, b in enumerate(GT)]
    write_predictions(tmp_path / "p.csv", recs)
    assert read_predictions(tmp_path / "p.csv") == recs


def test_malformed_prediction_csv_names_line(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("frame_idx,x,y,w,h,score,state,branch\n1,0,0,5,5,0.9,stable,visual\n2,0,zero,5,5,0.9,stable,visual\n")
    with pytest.raises(FormatError, match=":3:"):
        read_predictions(p)
    p.write_text("1,0,0,5,5\n")
    with pytest.raises(FormatError, match=":1:"):
        read_predictions(p)


def test_report_files(tmp_path):
    ann = SequenceAnnotation("toy", GT, [False] * 20, "red square")
    rep = evaluate("toy", GT, ann, {"seed": 3})
    out = rep.write(tmp_path)
    d = json.loads((out / "toy.json").read_text())
    assert d["meta"]["seed"] == 3 and d["success_auc"] == rep.success_auc
    assert d["meta"]["reoccluded_frames_in_recovery_window"] == "included"
    lines = (out / "toy_success.csv").read_text().splitlines()
    assert lines[0] == "threshold,success" and len(lines) == 102


def test_evaluate_many_pools_frames_in_name_order():
    occ = [False] * 5 + [True] * 5 + [False] * 10
    a = SequenceAnnotation("a", GT, occ)
    far = [BBox(1000, 1000, 5, 5)] * 20
    b = SequenceAnnotation("b", GT, occ)
    rep = evaluate_many({"b": (far, b), "a": (GT, a)})
    assert rep.frames == 40
    assert rep.recovery.occlusion_events == 2
    assert rep.recovery.frames_to_recover_after_occlusion == pytest.approx((1 + 10) / 2)
