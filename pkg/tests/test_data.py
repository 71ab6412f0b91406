import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dfme_od import data
from dfme_od.data import Annotation, DatasetError, DatasetSpec, NormalizedBox


def test_generate_counts_and_labels(shapes_dir):
    anns = data.read_annotations(shapes_dir)
    assert len(anns) == 600
    assert len(list((shapes_dir / "images").glob("*.png"))) == 600
    counts = np.bincount([a.label for a in anns])
    assert counts.tolist() == [200, 200, 200]


def test_generation_is_deterministic(tmp_path):
    spec = DatasetSpec(class_count=3, side=64, count=50, seed=7)
    data.generate_shapes_dataset(spec, tmp_path / "a")
    data.generate_shapes_dataset(spec, tmp_path / "b")
    a = (tmp_path / "a" / "annotations.jsonl").read_bytes()
    b = (tmp_path / "b" / "annotations.jsonl").read_bytes()
    assert a == b
    for name in ("000000.png", "000049.png"):
        assert (tmp_path / "a" / "images" / name).read_bytes() == (tmp_path / "b" / "images" / name).read_bytes()


def test_box_sizes_within_range(shapes_dir):
    for ann in data.read_annotations(shapes_dir):
        x0, y0, x1, y1 = ann.box_px
        extent = max(x1 - x0, y1 - y0)
        assert 0.3 * 64 <= extent <= 0.6 * 64 + 2


def test_boxes_tightly_bound_rendered_shape(tmp_path):
    spec = DatasetSpec(class_count=3, side=64, count=30, seed=3)
    data.generate_shapes_dataset(spec, tmp_path)
    for s in data.load_dataset(tmp_path):
        img = s.image
        bg = img[0, 0] if True else None
        # background is solid: every pixel differing from the corner colour is object
        corners = [img[0, 0], img[0, -1], img[-1, 0], img[-1, -1]]
        bg = max(corners, key=lambda c: sum(np.allclose(c, d) for d in corners))
        ys, xs = np.nonzero(np.abs(img - bg).sum(axis=2) > 1e-6)
        x0, y0, x1, y1 = data.denormalize_box(s.box, 64, 64)
        assert abs(xs.min() - x0) <= 1 and abs(xs.max() + 1 - x1) <= 1
        assert abs(ys.min() - y0) <= 1 and abs(ys.max() + 1 - y1) <= 1


def test_invalid_spec_writes_nothing(tmp_path):
    out = tmp_path / "bad"
    with pytest.raises(DatasetError):
        data.generate_shapes_dataset(DatasetSpec(class_count=1, count=10), out)
    with pytest.raises(DatasetError):
        data.generate_shapes_dataset(DatasetSpec(size_range=(0.5, 1.2), count=10), out)
    assert not out.exists()


def test_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DatasetError):
        data.generate_shapes_dataset(DatasetSpec(count=2), blocker / "sub")


@pytest.mark.parametrize(
    "box, wh, expected",
    [
        ((100, 50, 200, 150), (200, 200), (0.5, 0.25, 1.0, 0.75)),
        ((0, 0, 64, 48), (64, 48), (0, 0, 1, 1)),
    ],
)
def test_normalize_annotation(box, wh, expected):
    ann = Annotation("x", 0, box, *wh)
    assert data.normalize_annotation(ann) == pytest.approx(expected)


def test_normalize_matches_exact_rationals():
    ann = Annotation("x", 0, (37, 12, 81, 99), 128, 128)
    exact = [Fraction(v, 128) for v in (37, 12, 81, 99)]
    assert tuple(data.normalize_annotation(ann)) == tuple(float(f) for f in exact)
    assert tuple(data.normalize_annotation(ann)) == (0.2890625, 0.09375, 0.6328125, 0.7734375)


def test_normalize_zero_size_rejected():
    with pytest.raises(DatasetError):
        data.normalize_annotation(Annotation("x", 0, (0, 0, 1, 1), 0, 10))


def test_denormalize_examples():
    assert data.denormalize_box((0.5, 0.25, 1.0, 0.75), 200, 200) == (100, 50, 200, 150)
    assert data.denormalize_box((0, 0, 1, 1), 64, 48) == (0, 0, 64, 48)


@st.composite
def annotations(draw):
    w = draw(st.integers(1, 4000))
    h = draw(st.integers(1, 4000))
    x0 = draw(st.floats(0, w, exclude_max=True))
    x1 = draw(st.floats(x0, w, exclude_min=True))
    y0 = draw(st.floats(0, h, exclude_max=True))
    y1 = draw(st.floats(y0, h, exclude_min=True))
    return Annotation("h", 0, (x0, y0, x1, y1), w, h)


@given(annotations())
def test_normalize_denormalize_round_trip(ann):
    nb = data.normalize_annotation(ann)
    assert all(0 <= v <= 1 for v in nb)
    back = data.denormalize_box(nb, ann.width, ann.height)
    assert np.allclose(back, ann.box_px, atol=1e-6 * max(ann.width, ann.height), rtol=0)
    again = data.normalize_annotation(Annotation("h", 0, back, ann.width, ann.height))
    assert np.allclose(again, nb, atol=1e-6)


def test_scale_pixels():
    assert data.scale_pixels(np.array([255]), 8)[0] == 1.0
    assert data.scale_pixels(np.array([0]), 8)[0] == 0.0
    assert data.scale_pixels(np.array([128]), 8)[0] == pytest.approx(128 / 255, abs=1e-7)
    assert data.scale_pixels(np.array([128]), 8)[0] == pytest.approx(0.50196, abs=1e-5)
    with pytest.raises(DatasetError):
        data.scale_pixels(np.array([1]), 12)
    with pytest.raises(DatasetError):
        data.scale_pixels(np.array([256]), 8)


def test_load_dataset_counts_and_ranges(shapes_dir):
    n = 0
    for s in data.load_dataset(shapes_dir):
        assert s.image.shape == (64, 64, 3) and s.image.dtype == np.float32
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert NormalizedBox(*s.box).is_valid()
        assert 0 <= s.label < 3
        n += 1
    assert n == 600


def test_shuffled_load_is_deterministic(shapes_dir):
    a = [s.label for s in data.load_dataset(shapes_dir, shuffle=True, seed=5)]
    b = [s.label for s in data.load_dataset(shapes_dir, shuffle=True, seed=5)]
    c = [s.label for s in data.load_dataset(shapes_dir)]
    assert a == b
    assert a != c and sorted(a) == sorted(c)


def test_missing_image_named(tmp_path):
    data.generate_shapes_dataset(DatasetSpec(count=5, seed=1), tmp_path)
    (tmp_path / "images" / "000003.png").unlink()
    with pytest.raises(DatasetError, match="000003.png"):
        list(data.load_dataset(tmp_path))


def test_malformed_annotation_reports_line(tmp_path):
    data.generate_shapes_dataset(DatasetSpec(count=5, seed=1), tmp_path)
    ann_file = tmp_path / "annotations.jsonl"
    lines = ann_file.read_text().splitlines()
    rec = json.loads(lines[2])
    rec["x_max"] = rec["x_min"]
    lines[2] = json.dumps(rec)
    lines[3] = "{not json"
    ann_file.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match=r"annotations.jsonl:3"):
        list(data.load_dataset(tmp_path))


def test_array_split(shapes_dir):
    ds = data.load_arrays(shapes_dir)
    tr, te = ds.split(100)
    assert len(tr) == 500 and len(te) == 100
    assert ds.class_count == 3
    np.testing.assert_array_equal(te.labels, ds.labels[500:])
