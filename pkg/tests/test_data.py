import json
import math

import numpy as np
import pytest

from yolopeds.data import (
    FormatError, annotate, make_scene, make_scenes, read_detections, read_ground_truth, read_ppm,
    save_scenes, to_tensor, write_detections, write_ground_truth, write_ppm,
)
from yolopeds.head import BBox, Detection, gt_box


def test_ppm_round_trip(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, (7, 5, 3), dtype=np.uint8)
    path = tmp_path / "a.ppm"
    write_ppm(path, rgb)
    assert path.read_bytes()[:2] == b"P6"
    np.testing.assert_array_equal(read_ppm(path), rgb)


def test_ppm_rejects_other_formats(tmp_path):
    path = tmp_path / "a.ppm"
    path.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(FormatError, match="P6"):
        read_ppm(path)


def test_to_tensor_scaling_and_resize():
    rgb = np.full((320, 320, 3), 255, np.uint8)
    t = to_tensor(rgb)
    assert t.shape == (1, 3, 320, 320) and t.dtype == np.float32 and t.max() == 1.0
    small = to_tensor(np.full((40, 60, 3), 51, np.uint8))
    assert small.shape == (1, 3, 320, 320)
    np.testing.assert_allclose(small, 0.2, atol=1e-6)


def test_annotate_draws_three_pixel_outline():
    rgb = np.zeros((100, 100, 3), np.uint8)
    out = annotate(rgb, [BBox(0.5, 0.5, 0.5, 0.5)])
    assert out.shape == rgb.shape and not rgb.any()
    red = (out[..., 0] == 255)
    assert red[25:28, 50].all() and not red[28, 50]
    assert not red[50, 50]


def test_ground_truth_round_trip(tmp_path):
    recs = {"a.ppm": [gt_box(0.5, 0.5, 0.2, 0.3)], "b.ppm": []}
    path = tmp_path / "gt.jsonl"
    write_ground_truth(path, recs)
    assert read_ground_truth(path) == recs


def test_ground_truth_errors_name_the_line(tmp_path):
    path = tmp_path / "gt.jsonl"
    path.write_text('{"image": "a", "boxes": []}\n{"image": "b", "boxes": [[0.5, 0.5, 0, 0.1]]}\n')
    with pytest.raises(FormatError, match=":2:"):
        read_ground_truth(path)
    path.write_text('{"image": "a", "boxes": []}\nnot json\n')
    with pytest.raises(FormatError, match=":2:"):
        read_ground_truth(path)


def test_detections_round_trip(tmp_path):
    d = Detection(BBox(0.4, 0.6, 0.1, 0.2), 0.8, 0.7, 3, (4, 6))
    path = tmp_path / "det.jsonl"
    with path.open("w") as fh:
        write_detections(fh, "x.ppm", [d])
    rec = json.loads(path.read_text())
    assert set(rec) == {"image", "cx", "cy", "w", "h", "obj", "cls", "grid"}
    (back,) = read_detections(path)["x.ppm"]
    assert back.bbox == d.bbox and back.objectness == 0.8 and back.grid == 3


def test_scenes_are_seeded():
    a, b = make_scenes(3, seed=5), make_scenes(3, seed=5)
    assert all(np.array_equal(x.rgb, y.rgb) and x.boxes == y.boxes for x, y in zip(a, b))
    assert not np.array_equal(a[0].rgb, make_scenes(1, seed=6)[0].rgb)


def test_scene_contents():
    rng = np.random.default_rng(1)
    for n in range(30):
        s = make_scene(rng, f"s{n}")
        assert s.rgb.shape == (320, 320, 3) and s.rgb.dtype == np.uint8
        assert 1 <= len(s.boxes) <= 3
        for b in s.boxes:
            x0, y0, x1, y1 = b.corners()
            assert x0 >= 0 and y0 >= 0 and x1 <= 1 + 1e-9 and y1 <= 1 + 1e-9
            # solid, high-contrast fill
            patch = s.rgb[int(round(y0 * 320)):int(round(y1 * 320)), int(round(x0 * 320)):int(round(x1 * 320))]
            assert patch.std(axis=(0, 1)).max() == 0
            assert patch.mean() < 40 or patch.mean() > 215


def test_scene_sizes_span_the_range():
    rng = np.random.default_rng(2)
    scores = [math.sqrt(b.area) for n in range(200) for b in make_scene(rng, "s", max_boxes=1).boxes]
    assert min(scores) < 0.15 and max(scores) > 0.85
    hist = np.histogram(scores, bins=5, range=(0, 1))[0]
    assert (hist > 0).all()


def test_save_scenes(tmp_path):
    gt = save_scenes(make_scenes(2, seed=0), tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ground_truth.jsonl", "scene_0000.ppm", "scene_0001.ppm"]
    assert set(read_ground_truth(gt)) == {"scene_0000.ppm", "scene_0001.ppm"}
