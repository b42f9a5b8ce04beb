import json

import numpy as np
import pytest

from yolopeds import backbone as bb
from yolopeds.autograd import init_weights
from yolopeds.cli import main
from yolopeds.data import read_ground_truth, read_ppm, write_ppm
from yolopeds.train import ToyConfig, toy_init


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def scenes(tmp_path, capsys):
    d = tmp_path / "scenes"
    code, out, _ = run(capsys, "synth", "--out", str(d), "--n", "3", "--seed", "4")
    assert code == 0 and json.loads(out)["images"] == 3
    return d


def test_synth_writes_images_and_truth(scenes):
    assert len(list(scenes.glob("*.ppm"))) == 3
    gt = read_ground_truth(scenes / "ground_truth.jsonl")
    assert all(1 <= len(b) <= 3 for b in gt.values())


def test_detect_blank_image_is_empty(tmp_path, capsys):
    img = tmp_path / "blank.ppm"
    write_ppm(img, np.zeros((320, 320, 3), np.uint8))
    code, out, _ = run(capsys, "detect", "--images", str(img))
    assert code == 0 and out == ""


def test_detect_missing_weights_exits_2(tmp_path, capsys):
    img = tmp_path / "blank.ppm"
    write_ppm(img, np.zeros((32, 32, 3), np.uint8))
    missing = tmp_path / "nope.pwts"
    code, _, err = run(capsys, "detect", "--images", str(img), "--weights", str(missing))
    assert code == 2 and str(missing) in err


def test_detect_rejects_bad_ppm(tmp_path, capsys):
    img = tmp_path / "bad.ppm"
    img.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    code, _, err = run(capsys, "detect", "--images", str(img))
    assert code == 2 and "P6" in err


def test_detect_writes_jsonl_and_annotations(tmp_path, capsys, scenes):
    graph = bb.parse_config(bb.builtin_config("mini"))
    params = init_weights(graph, 0, scheme="fan-in")
    params["head.b"].value[4::6] = 5.0  # force detections everywhere
    params["head.b"].value[5::6] = 5.0
    weights = tmp_path / "w.pwts"
    bb.write_weights(weights, params)
    out = tmp_path / "det.jsonl"
    ann = tmp_path / "ann"
    code, _, _ = run(capsys, "detect", "--config", "mini", "--weights", str(weights), "--images", str(scenes),
                     "--out", str(out), "--annotate", str(ann), "--nms-iou", "0.3")
    assert code == 0
    recs = [json.loads(line) for line in out.read_text().splitlines()]
    assert recs and set(recs[0]) == {"image", "cx", "cy", "w", "h", "obj", "cls", "grid"}
    written = sorted(p.name for p in ann.iterdir())
    assert written == sorted(p.name for p in scenes.glob("*.ppm"))
    assert read_ppm(ann / written[0]).shape == (320, 320, 3)


def test_detect_grid_size_override(tmp_path, capsys):
    img = tmp_path / "x.ppm"
    write_ppm(img, np.zeros((320, 320, 3), np.uint8))
    code, _, _ = run(capsys, "detect", "--images", str(img), "--grid-size", "5")
    assert code == 0


def test_eval_perfect_detections(tmp_path, capsys, scenes):
    gt = read_ground_truth(scenes / "ground_truth.jsonl")
    det = tmp_path / "det.jsonl"
    with det.open("w") as fh:
        for name, boxes in gt.items():
            for b in boxes:
                fh.write(json.dumps({"image": name, "cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h,
                                     "obj": 0.9, "cls": 0.9, "grid": 0}) + "\n")
    code, out, _ = run(capsys, "eval", "--detections", str(det), "--gt", str(scenes / "ground_truth.jsonl"))
    rep = json.loads(out)
    assert code == 0
    assert rep["accuracy"] == 1.0 and rep["fppi"] == 0.0 and rep["miss_rate"] == 0.0
    assert list(rep) == ["tp", "fp", "fn", "accuracy", "mean_iou", "fppi", "miss_rate", "n_images", "n_positives"]


def test_eval_format_error_names_line(tmp_path, capsys, scenes):
    det = tmp_path / "det.jsonl"
    det.write_text('{"image": "scene_0000.ppm", "cx": 0.5}\n')
    code, _, err = run(capsys, "eval", "--detections", str(det), "--gt", str(scenes / "ground_truth.jsonl"))
    assert code == 2 and ":1:" in err


def test_gradcheck_passes_and_catches_corruption(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seed", "0")
    res = json.loads(out)
    assert code == 0 and res["passed"] and res["checked"] >= 200
    code, out, _ = run(capsys, "gradcheck", "--seed", "0", "--corrupt-grad")
    assert code == 1 and not json.loads(out)["passed"]


def test_bench_reports_fields(capsys):
    code, out, _ = run(capsys, "bench", "--config", "mini", "--n", "5", "--warmup", "1", "--threads", "1")
    rep = json.loads(out)
    assert code == 0
    assert {"fps", "latency_p50", "latency_p95", "param_count", "weights_mb"} <= set(rep)
    assert rep["param_count"] == bb.param_count(bb.parse_config(bb.builtin_config("mini")))


def test_unknown_config_exits_2(tmp_path, capsys):
    img = tmp_path / "x.ppm"
    write_ppm(img, np.zeros((8, 8, 3), np.uint8))
    code, _, err = run(capsys, "detect", "--config", "no-such-net", "--images", str(img))
    assert code == 2 and "no-such-net" in err


def test_train_toy_zero_steps_keeps_init(tmp_path, capsys):
    out = tmp_path / "run"
    code, _, _ = run(capsys, "train-toy", "--config", "mini", "--steps", "0", "--n-images", "2", "--out", str(out))
    assert code == 0
    got = bb.read_weights(out / "weights.pwts")
    graph = bb.parse_config(bb.builtin_config("mini"))
    init = toy_init(graph, ToyConfig(), 0)
    assert all(np.array_equal(got[k], init[k].value) for k in init)


def test_train_toy_is_deterministic(tmp_path, capsys):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code, _, _ = run(capsys, "train-toy", "--config", "mini", "--steps", "15", "--n-images", "3",
                         "--out", str(out))
        assert code == 0
        runs.append((out / "weights.pwts").read_bytes())
        log = json.loads((out / "loss_log.json").read_text())
        assert log[-1]["step"] == 15 and {"total", "loc", "op", "cls"} <= set(log[0])
    assert runs[0] == runs[1]
