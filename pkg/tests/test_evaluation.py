import json

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from dfme_od import data, evaluation
from dfme_od.evaluation import ComparisonReport, EvalReport


def raster_iou(a, b, n=1000):
    """Pixel-count IoU on an n x n grid over the unit square (pixel centres)."""
    c = (np.arange(n) + 0.5) / n
    xs, ys = c[None, :], c[:, None]
    ma = (xs >= a[0]) & (xs < a[2]) & (ys >= a[1]) & (ys < a[3])
    mb = (xs >= b[0]) & (xs < b[2]) & (ys >= b[1]) & (ys < b[3])
    union = (ma | mb).sum()
    return (ma & mb).sum() / union if union else 0.0


def test_iou_examples():
    assert evaluation.iou((0.1, 0.2, 0.5, 0.6), (0.1, 0.2, 0.5, 0.6)) == 1.0
    assert evaluation.iou((0, 0, 0.2, 0.2), (0.5, 0.5, 1, 1)) == 0.0
    assert evaluation.iou((0, 0, 0.5, 0.5), (0.25, 0.25, 0.75, 0.75)) == pytest.approx(1 / 7)
    assert raster_iou((0, 0, 0.5, 0.5), (0.25, 0.25, 0.75, 0.75)) == pytest.approx(1 / 7, abs=1e-2)
    assert evaluation.iou((0.3, 0.3, 0.3, 0.3), (0.3, 0.3, 0.3, 0.3)) == 0.0


boxes = st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)).map(
    lambda b: (min(b[0], b[2]), min(b[1], b[3]), max(b[0], b[2]), max(b[1], b[3]))
)


@given(boxes, boxes, st.floats(0.1, 10))
def test_iou_properties(a, b, k):
    v = evaluation.iou(a, b)
    assert 0 <= v <= 1
    assert v == pytest.approx(evaluation.iou(b, a))
    assert evaluation.iou([c * k for c in a], [c * k for c in b]) == pytest.approx(v, abs=1e-9)


def test_repair_boxes():
    out = evaluation.repair_boxes([[0.8, 0.9, 0.2, 0.1], [-0.1, 0.2, 1.3, 0.4]])
    np.testing.assert_allclose(out, [[0.2, 0.1, 0.8, 0.9], [0, 0.2, 1, 0.4]])


def test_accuracy():
    p = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.5, 0.5]])
    assert evaluation.accuracy(p, [0, 1, 0, 0]) == 1.0
    assert evaluation.accuracy(p, [1, 0, 1, 1]) == 0.0
    assert evaluation.accuracy(p, [0, 1, 1, 0]) == 0.75
    with pytest.raises(ValueError):
        evaluation.accuracy(np.zeros((0, 2)), [])


def test_detection_success():
    assert evaluation.detection_success([0.6, 0.4]) == 0.5
    assert evaluation.detection_success([1.0, 1.0]) == 1.0
    assert evaluation.detection_success([0.5]) == 1.0
    with pytest.raises(ValueError):
        evaluation.detection_success([])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.floats(0, 1), st.floats(0, 1))
def test_detection_success_monotone(ious, t1, t2):
    lo, hi = sorted((t1, t2))
    assert evaluation.detection_success(ious, hi) <= evaluation.detection_success(ious, lo)


@pytest.mark.parametrize("attack, baseline, shown", [(91, 93, 98), (82, 88, 93), (73, 91, 80), (42, 42, 100)])
def test_success_rate(attack, baseline, shown):
    assert round(evaluation.success_rate(attack, baseline)) == shown


def test_success_rate_zero_baseline():
    with pytest.raises(ZeroDivisionError):
        evaluation.success_rate(50, 0)


@given(st.floats(0.01, 100), st.floats(0.01, 100))
def test_success_rate_reciprocal(a, b):
    assert evaluation.success_rate(a, b) * evaluation.success_rate(b, a) == pytest.approx(1e4)


class ConstModel(torch.nn.Module):
    def __init__(self, box, c=3):
        super().__init__()
        self.box = torch.tensor(box, dtype=torch.float32)
        self.c = c

    def detect(self, x):
        from dfme_od.models import Detection
        n = x.shape[0]
        probs = torch.zeros(n, self.c)
        probs[:, 0] = 0.9
        return Detection(probs, self.box.expand(n, 4))


def test_constant_box_model_matches_brute_force(shapes_dir):
    ds = data.load_arrays(shapes_dir)
    rep = evaluation.evaluate_model(ConstModel((0.25, 0.25, 0.75, 0.75)), ds)
    brute = 0.0
    for ann in data.read_annotations(shapes_dir):
        nb = data.normalize_annotation(ann)
        ix = max(0.0, min(0.75, nb.x_max) - max(0.25, nb.x_min))
        iy = max(0.0, min(0.75, nb.y_max) - max(0.25, nb.y_min))
        inter = ix * iy
        union = 0.25 + (nb.x_max - nb.x_min) * (nb.y_max - nb.y_min) - inter
        brute += inter / union
    brute /= len(ds)
    assert rep.mean_iou == pytest.approx(brute, abs=1e-9)
    assert evaluation.naive_box_iou(ds.boxes) == pytest.approx(brute, abs=1e-9)
    assert rep.accuracy == pytest.approx(np.mean(ds.labels == 0))
    assert rep.count == 600


def test_degenerate_model_has_zero_detection_success(shapes_dir):
    ds = data.load_arrays(shapes_dir)
    rep = evaluation.evaluate_model(ConstModel((0.0, 0.0, 0.0, 0.0)), ds)
    assert rep.detection_success == 0.0 and rep.mean_iou == 0.0


def test_evaluate_shape_mismatch(shapes_dir):
    ds = data.load_arrays(shapes_dir)
    with pytest.raises(ValueError):
        evaluation.evaluate_model(ConstModel((0.2, 0.2, 0.6, 0.6), c=5), ds)


def test_comparison_report_outputs(tmp_path):
    base = EvalReport(0.93, 0.88, 0.95, 0.5, 100)
    att = EvalReport(0.91, 0.82, 0.9, 0.5, 100)
    rep = ComparisonReport.build(base, att, "victim-a", "student-b")
    assert rep.success_rate_acc == pytest.approx(100 * 0.91 / 0.93)
    text = rep.to_text()
    assert "98" in text and "93" in text
    evaluation.write_report(rep, tmp_path)
    loaded = json.loads((tmp_path / "comparison.json").read_text())
    assert loaded["attack"]["accuracy"] == 0.91
    rows = (tmp_path / "table.csv").read_text().splitlines()
    assert rows[1].split(",") == ["victim-a", "student-b", "93", "91", "98", "88", "82", "93"]


def test_render_overlays(tmp_path):
    from PIL import Image

    imgs = np.random.default_rng(0).random((4, 32, 32, 3)).astype(np.float32)
    gt = np.array([[0.25, 0.25, 0.75, 0.75]] * 4)
    paths = evaluation.render_overlays(imgs[:3], gt, gt, gt[:, [2, 3, 0, 1]], tmp_path / "ov", scale=2)
    assert len(paths) == 3 and all(p.exists() for p in paths)
    im = np.asarray(Image.open(paths[0]))
    # edge at denormalized pixel 0.25 * 64 = 16; the red prediction is drawn over the green GT
    assert tuple(im[16, 30]) == (255, 0, 0)
    gt_only = evaluation.render_overlays(imgs[:1], gt, np.array([[0.0, 0.0, 0.1, 0.1]]), gt, tmp_path / "ov2", scale=2)
    assert tuple(np.asarray(Image.open(gt_only[0]))[16, 30]) == (0, 255, 0)
    assert im.shape == (64, 64 * 2 + 8, 3)


def test_pca_projection_and_scatter(tmp_path):
    rng = np.random.default_rng(0)
    real = rng.random((40, 8, 8, 3))
    gen = rng.random((30, 8, 8, 3)) * 0.5
    pg, pr = evaluation.pca_projection(gen, real)
    both = np.concatenate([pg, pr])
    np.testing.assert_allclose(both.mean(axis=0), 0, atol=1e-6)
    pa, pb = evaluation.pca_projection(real, real)
    radius = np.linalg.norm(pa - pa.mean(0), axis=1).max()
    assert np.linalg.norm(pa.mean(0) - pb.mean(0)) < 0.1 * radius
    out = tmp_path / "scatter.png"
    evaluation.latent_scatter(gen, real, out)
    assert out.stat().st_size > 0
    with pytest.raises(ValueError):
        evaluation.pca_projection(np.zeros((0, 4)), real)


def test_accuracy_curve(tmp_path):
    hist = [{"consumed": 100, "eval": {"accuracy": 0.4}}, {"consumed": 200}, {"consumed": 300, "eval": {"accuracy": 0.6}}]
    evaluation.accuracy_curve(hist, tmp_path / "curve.png", baseline=1.0)
    assert (tmp_path / "curve.png").stat().st_size > 0
