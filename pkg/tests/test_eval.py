import json
import logging

import numpy as np
import pytest

from gt360.codec import write_heatmap
from gt360.core import GazeClass, GazeVerdict, HeadBox, HeatmapGrid
from gt360.data import AnnotatedSample, gaussian_grid
from gt360.eval import (
    EvalRecord,
    average_precision,
    ec_prf,
    evaluate_suite,
    heatmap_auc,
    load_predictions,
    mean_l2,
    pair_records,
    point_distance,
    positive_cells,
    write_report,
)
from gt360.exceptions import InvalidInput, ManifestError

HEAD = HeadBox(0.1, 0.1, 0.3, 0.3)


def _peak(row, col):
    values = np.zeros((64, 64))
    values[row, col] = 1.0
    return HeatmapGrid(values)


def _ift(target_cell=(32, 32), p_ec=0.1, p_ift=0.9, head=HEAD):
    point = ((target_cell[1] + 0.5) / 64, (target_cell[0] + 0.5) / 64)
    hm = HeatmapGrid(gaussian_grid(point))
    return GazeVerdict(head, GazeClass.IFT, p_ec, p_ift, hm, point)


def _truth(label, target=None, source="vat", image="a.png", head=HEAD):
    return AnnotatedSample(image, head, label, source, target=target)


def test_point_distance():
    assert point_distance((0.0, 0.0), (0.3, 0.4)) == pytest.approx(0.5)


class TestHeatmapAuc:
    def test_perfect(self):
        target = (0.5, 0.5)
        values = positive_cells(target, 64).astype(float)
        assert heatmap_auc(values, target) == 1.0

    def test_inverted(self):
        target = (0.5, 0.5)
        values = 1.0 - positive_cells(target, 64).astype(float)
        assert heatmap_auc(HeatmapGrid(values), target) == 0.0

    def test_constant_heatmap_is_chance(self):
        assert heatmap_auc(np.full((64, 64), 0.3), (0.2, 0.7)) == 0.5

    def test_cell_mode(self):
        values = _peak(10, 20).values
        assert heatmap_auc(values, (20.5 / 64, 10.5 / 64), mode="cell") == 1.0
        assert positive_cells((0.5, 0.5), 64, "cell").sum() == 1

    def test_disk_is_larger_than_one_cell(self):
        assert positive_cells((0.5, 0.5), 64, "disk").sum() > 1

    def test_unknown_mode(self):
        with pytest.raises(InvalidInput):
            positive_cells((0.5, 0.5), 64, "ring")

    def test_needs_square_grid(self):
        with pytest.raises(InvalidInput):
            heatmap_auc(np.zeros((4, 8)), (0.5, 0.5))


def test_mean_l2():
    records = [
        EvalRecord(_ift((32, 32)), _truth("IFT", (32.5 / 64, 32.5 / 64))),
        EvalRecord(_ift((0, 0)), _truth("IFT", (0.5 / 64 + 0.3, 0.5 / 64 + 0.4))),
    ]
    assert mean_l2(records) == pytest.approx(0.25)
    with pytest.raises(InvalidInput):
        mean_l2([])


def test_average_precision():
    scores = [(0.9, True), (0.8, False), (0.7, True)]
    assert average_precision(scores) == pytest.approx((1.0 + 2 / 3) / 2)
    assert average_precision([(0.2, False), (0.9, True)]) == 1.0


def test_average_precision_single_class():
    with pytest.raises(InvalidInput, match="one positive and one negative"):
        average_precision([(0.9, True), (0.1, True)])


def test_ec_prf():
    assert ec_prf([True, True, False, False], [True, False, True, False]) == pytest.approx(
        (0.5, 0.5, 0.5)
    )
    assert ec_prf([True, False], [True, False]) == (1.0, 1.0, 1.0)


def test_ec_prf_undefined_precision(caplog):
    with caplog.at_level(logging.WARNING):
        assert ec_prf([False, False], [True, False]) == (0.0, 0.0, 0.0)
    assert "EC metrics" in caplog.text


def test_ec_prf_errors():
    with pytest.raises(InvalidInput, match="predictions for"):
        ec_prf([True], [True, False])
    with pytest.raises(InvalidInput, match="at least one EC"):
        ec_prf([True, False], [False, False])


def test_ec_prf_worked_example():
    # 8 true positives, 2 false positives, 1 false negative, 5 true negatives
    preds = [True] * 10 + [False] * 6
    truths = [True] * 8 + [False] * 2 + [True] + [False] * 5
    assert ec_prf(preds, truths) == pytest.approx((0.8, 8 / 9, 16 / 19))


class TestAgainstBruteForce:
    """Each metric against a direct re-count on 100 random cases"""

    def test_heatmap_auc_pairwise(self):
        rng = np.random.default_rng(0)
        for case in range(100):
            # coarse levels force ties
            values = rng.integers(0, 8, (64, 64)) / 7
            target = tuple(rng.uniform(0.0, 1.0, 2))
            mode = "cell" if case % 2 else "disk"
            labels = positive_cells(target, 64, mode)
            pos, neg = values[labels], values[~labels]
            wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
            expected = wins / (len(pos) * len(neg))
            assert heatmap_auc(values, target, mode) == pytest.approx(expected)

    def test_average_precision_step_integral(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(2, 40))
            labels = [True, False] + [bool(v) for v in rng.integers(0, 2, n - 2)]
            scores = [float(v) for v in rng.integers(0, 6, n) / 5]
            pairs = list(zip(scores, labels, strict=True))
            positives = sum(labels)
            expected, last_recall = 0.0, 0.0
            for threshold in sorted(set(scores), reverse=True):
                kept = [label for score, label in pairs if score >= threshold]
                recall = sum(kept) / positives
                expected += (recall - last_recall) * sum(kept) / len(kept)
                last_recall = recall
            assert average_precision(pairs) == pytest.approx(expected)

    def test_mean_l2_first_maximum(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            records, distances = [], []
            for _ in range(int(rng.integers(1, 5))):
                values = rng.integers(0, 4, (64, 64)) / 3
                target = tuple(float(v) for v in rng.uniform(0.0, 1.0, 2))
                best, cell = -1.0, None
                for row in range(64):
                    for col in range(64):
                        if values[row, col] > best:
                            best, cell = values[row, col], (row, col)
                x, y = (cell[1] + 0.5) / 64, (cell[0] + 0.5) / 64
                distances.append(((x - target[0]) ** 2 + (y - target[1]) ** 2) ** 0.5)
                verdict = GazeVerdict(HEAD, GazeClass.IFT, 0.1, 0.9, HeatmapGrid(values), (x, y))
                records.append(EvalRecord(verdict, _truth("IFT", target)))
            assert mean_l2(records) == pytest.approx(sum(distances) / len(distances))

    def test_ec_prf_counts(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(1, 30))
            truths = [True] + [bool(v) for v in rng.integers(0, 2, n - 1)]
            preds = [bool(v) for v in rng.integers(0, 2, n)]
            tp = sum(p and t for p, t in zip(preds, truths, strict=True))
            fp = sum(p and not t for p, t in zip(preds, truths, strict=True))
            fn = sum(t and not p for p, t in zip(preds, truths, strict=True))
            precision = tp / (tp + fp) if tp + fp else 0.0
            recall = tp / (tp + fn)
            f1 = 2 * tp / (2 * tp + fp + fn)
            assert ec_prf(preds, truths) == pytest.approx((precision, recall, f1))


def test_evaluate_suite():
    records = [
        EvalRecord(_ift((32, 32), p_ift=0.9), _truth("IFT", (32.5 / 64, 32.5 / 64))),
        EvalRecord(GazeVerdict(HEAD, "OFT", 0.2, 0.3), _truth("OFT")),
        EvalRecord(GazeVerdict(HEAD, "EC", 0.95), _truth("EC", source="mpii")),
        EvalRecord(GazeVerdict(HEAD, "OFT", 0.3, 0.1), _truth("EC", source="mpii")),
    ]
    report = evaluate_suite(records)
    overall = report["overall"]
    assert report["schema_version"] == 1
    assert overall["auc"] == 1.0
    assert overall["l2"] == pytest.approx(0.0)
    assert overall["ap"] == 1.0
    assert overall["precision"] == 1.0
    assert overall["recall"] == 0.5
    assert sorted(report["per_source"]) == ["mpii", "vat"]
    assert report["per_source"]["mpii"]["auc"] is None
    assert report["per_source"]["vat"]["precision"] is None
    assert report["counts"] == {"records": 4, "ift": 1, "missing_heatmaps": 0, "no_p_ift": 1}


def test_average_precision_ignores_eye_contact_truths():
    records = [
        EvalRecord(_ift((32, 32), p_ift=0.6), _truth("IFT", (32.5 / 64, 32.5 / 64))),
        EvalRecord(GazeVerdict(HEAD, "OFT", 0.2, 0.2), _truth("OFT")),
        EvalRecord(GazeVerdict(HEAD, "OFT", 0.3, 0.9), _truth("EC", source="columbia")),
    ]
    report = evaluate_suite(records)
    assert report["overall"]["ap"] == 1.0
    assert report["per_source"]["columbia"]["ap"] is None


def test_missing_heatmaps_are_counted(caplog):
    records = [EvalRecord(GazeVerdict(HEAD, "EC", 0.9), _truth("IFT", (0.5, 0.5)))]
    with caplog.at_level(logging.WARNING):
        report = evaluate_suite(records)
    assert report["counts"]["missing_heatmaps"] == 1
    assert report["overall"]["auc"] is None
    assert "no predicted heatmap" in caplog.text


def test_evaluate_nothing():
    with pytest.raises(InvalidInput):
        evaluate_suite([])


class TestPredictions:
    def _write(self, tmp_path, lines):
        path = tmp_path.joinpath("pred.jsonl")
        path.write_text("\n".join(json.dumps(line) for line in lines) + "\n")
        return path

    def test_load(self, tmp_path):
        write_heatmap(tmp_path.joinpath("maps", "h0.npy"), _peak(3, 4).values)
        path = self._write(
            tmp_path,
            [
                {
                    "image": "/data/frames/a.png",
                    "box": [0.1, 0.1, 0.3, 0.3],
                    "confidence": 0.9,
                    "class": "IFT",
                    "p_ec": 0.1,
                    "p_ift": 0.8,
                    "target": [4.5 / 64, 3.5 / 64],
                    "heatmap_path": "maps/h0.npy",
                },
                {"image": "a.png", "box": [0.5, 0.5, 0.6, 0.6], "error": "degenerate crop"},
                {"image": "b.png", "box": [0.5, 0.5, 0.6, 0.6], "class": "EC", "p_ec": 0.9},
            ],
        )
        preds = load_predictions(path)
        assert [image for image, _ in preds] == ["/data/frames/a.png", "b.png"]
        verdict = preds[0][1]
        assert verdict.cls is GazeClass.IFT
        assert verdict.heatmap.values[3, 4] == 1.0
        assert preds[1][1].p_ift is None

    def test_ift_without_heatmap(self, tmp_path):
        line = {"image": "a.png", "box": [0.1, 0.1, 0.3, 0.3], "class": "IFT", "p_ec": 0.1}
        with pytest.raises(ManifestError, match="line 1: .*heatmap_path"):
            load_predictions(self._write(tmp_path, [line]))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ManifestError, match="not found"):
            load_predictions(tmp_path.joinpath("pred.jsonl"))


def test_pair_records():
    near = HeadBox(0.11, 0.1, 0.31, 0.3)
    preds = [
        ("a.png", GazeVerdict(HeadBox(0.6, 0.6, 0.9, 0.9), "EC", 0.9)),
        ("a.png", GazeVerdict(near, "OFT", 0.1, 0.2)),
        ("b.png", GazeVerdict(HEAD, "EC", 0.9)),
    ]
    truths = [
        _truth("OFT", image="/data/a.png"),
        _truth("OFT", image="c.png"),
    ]
    records, counts = pair_records(preds, truths)
    assert len(records) == 1
    assert records[0].pred.head == near
    assert counts == {"matched": 1, "unmatched_truths": 1, "unmatched_predictions": 2}


def test_pair_records_keeps_clips_apart():
    preds = [("/data/vat/clipA/00001.jpg", GazeVerdict(HEAD, "EC", 0.9))]
    truths = [_truth("EC", image="/data/vat/clipB/00001.jpg")]
    records, counts = pair_records(preds, truths)
    assert records == []
    assert counts == {"matched": 0, "unmatched_truths": 1, "unmatched_predictions": 1}


def test_pair_records_by_full_path():
    a, b = GazeVerdict(HEAD, "EC", 0.9), GazeVerdict(HEAD, "OFT", 0.2, 0.1)
    preds = [("/data/vat/clipA/00001.jpg", a), ("/data/vat/clipB/00001.jpg", b)]
    truths = [
        _truth("OFT", image="/data/vat/clipB/00001.jpg"),
        _truth("EC", image="/data/vat/clipA/../clipA/00001.jpg"),
    ]
    records, counts = pair_records(preds, truths)
    assert [r.pred for r in records] == [b, a]
    assert counts["matched"] == 2


def test_bare_name_is_ambiguous_across_clips(caplog):
    preds = [("00001.jpg", GazeVerdict(HEAD, "EC", 0.9))]
    truths = [
        _truth("EC", image="/data/vat/clipA/00001.jpg"),
        _truth("EC", image="/data/vat/clipB/00001.jpg"),
    ]
    with caplog.at_level(logging.WARNING):
        records, counts = pair_records(preds, truths)
    assert records == []
    assert counts["unmatched_truths"] == 2
    assert "match several truth images" in caplog.text


def test_pair_records_uses_each_prediction_once():
    preds = [("a.png", GazeVerdict(HEAD, "EC", 0.9))]
    truths = [_truth("EC", image="a.png"), _truth("EC", image="a.png")]
    records, counts = pair_records(preds, truths)
    assert len(records) == 1
    assert counts["unmatched_truths"] == 1


def test_write_report(tmp_path):
    path = tmp_path.joinpath("out", "report.json")
    write_report({"schema_version": 1, "overall": {"auc": None}}, path)
    assert json.loads(path.read_text()) == {"schema_version": 1, "overall": {"auc": None}}
