"""Image and annotation I/O plus the synthetic rectangle-scene generator."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from yolopeds.head import BBox, Detection, gt_box

IMAGE_SIZE = 320


class FormatError(ValueError):
    """An input file is malformed; the message names the file and line."""


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary (P6) 8-bit RGB PPM as an (H, W, 3) uint8 array."""
    path = Path(path)
    with path.open("rb") as fh:
        if fh.read(2) != b"P6":
            raise FormatError(f"{path}: not a binary P6 PPM")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "RGB":
                raise FormatError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
            return np.asarray(im, dtype=np.uint8).copy()
    except (OSError, SyntaxError) as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), "RGB").save(Path(path), format="PPM")


def to_tensor(rgb: np.ndarray, size: tuple[int, int] = (IMAGE_SIZE, IMAGE_SIZE)) -> np.ndarray:
    """uint8 HWC image -> (1, 3, H, W) float32 in [0, 1], bilinearly resized if needed."""
    if rgb.shape[1] != size[0] or rgb.shape[0] != size[1]:
        rgb = np.asarray(Image.fromarray(rgb, "RGB").resize(size, Image.BILINEAR))
    return (rgb.astype(np.float32) / 255.0).transpose(2, 0, 1)[None].copy()


def annotate(rgb: np.ndarray, boxes, width: int = 3, color=(255, 0, 0)) -> np.ndarray:
    im = Image.fromarray(np.asarray(rgb, dtype=np.uint8), "RGB")
    draw = ImageDraw.Draw(im)
    W, H = im.size
    for b in boxes:
        x0, y0, x1, y1 = b.corners()
        draw.rectangle([x0 * W, y0 * H, x1 * W - 1, y1 * H - 1], outline=color, width=width)
    return np.asarray(im)


def list_images(path: str | Path) -> list[Path]:
    path = Path(path)
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() == ".ppm")
    return [path]


def _read_jsonl(path: Path):
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None


def read_ground_truth(path: str | Path) -> dict[str, list[BBox]]:
    out: dict[str, list[BBox]] = {}
    for lineno, rec in _read_jsonl(Path(path)):
        try:
            name = rec["image"]
            boxes = [gt_box(*b) for b in rec["boxes"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}:{lineno}: bad ground-truth record ({exc})") from None
        if name in out:
            raise FormatError(f"{path}:{lineno}: duplicate image {name!r}")
        out[name] = boxes
    return out


def write_ground_truth(path: str | Path, records: dict[str, list[BBox]]) -> None:
    with Path(path).open("w") as fh:
        for name, boxes in records.items():
            fh.write(json.dumps({"image": name, "boxes": [b.to_list() for b in boxes]}) + "\n")


def read_detections(path: str | Path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    for lineno, rec in _read_jsonl(Path(path)):
        try:
            det = Detection(
                BBox(float(rec["cx"]), float(rec["cy"]), float(rec["w"]), float(rec["h"])),
                float(rec["obj"]), float(rec["cls"]), int(rec["grid"]),
            )
            out.setdefault(rec["image"], []).append(det)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}:{lineno}: bad detection record ({exc})") from None
    return out


def write_detections(fh, image: str, dets) -> None:
    for d in dets:
        fh.write(json.dumps(d.to_json(image)) + "\n")


@dataclass
class Scene:
    name: str
    rgb: np.ndarray  # (H, W, 3) uint8
    boxes: list[BBox]


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.3, 0.7, size=(size // 32 + 1, size // 32 + 1, 3))
    smooth = np.asarray(
        Image.fromarray((coarse * 255).astype(np.uint8), "RGB").resize((size, size), Image.BILINEAR),
        dtype=np.float64) / 255
    return np.clip(smooth + rng.normal(0, 0.05, size=(size, size, 3)), 0, 1)


def _sample_box(rng: np.random.Generator, size: int, lo: float, hi: float):
    # sqrt-area uniform on (lo, hi]; aspect h/w log-uniform in [1/2, 2]
    a = hi - rng.uniform(0, hi - lo)
    for _ in range(100):
        r = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
        w, h = a / np.sqrt(r), a * np.sqrt(r)
        if w <= 1 and h <= 1:
            break
    else:
        w = h = a
    pw, ph = max(int(round(w * size)), 4), max(int(round(h * size)), 4)
    x0 = int(rng.integers(0, size - pw + 1))
    y0 = int(rng.integers(0, size - ph + 1))
    return x0, y0, pw, ph


def _overlaps(a, b, gap: int = 2) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return ax < bx + bw + gap and bx < ax + aw + gap and ay < by + bh + gap and by < ay + ah + gap


def make_scene(rng: np.random.Generator, name: str, size: int = IMAGE_SIZE,
               max_boxes: int = 3, area_range: tuple[float, float] = (0.05, 0.95)) -> Scene:
    """1..max_boxes non-overlapping solid rectangles on a noisy textured background."""
    img = _background(rng, size)
    want = int(rng.integers(1, max_boxes + 1))
    rects = []
    for _ in range(50 * want):
        if len(rects) == want:
            break
        r = _sample_box(rng, size, *area_range)
        if not any(_overlaps(r, o) for o in rects):
            rects.append(r)
    boxes = []
    for x0, y0, pw, ph in rects:
        dark = rng.random() < 0.5
        color = rng.uniform(0.0, 0.12, 3) if dark else rng.uniform(0.88, 1.0, 3)
        img[y0:y0 + ph, x0:x0 + pw] = color
        boxes.append(gt_box((x0 + pw / 2) / size, (y0 + ph / 2) / size, pw / size, ph / size))
    rgb = np.round(img * 255).astype(np.uint8)
    return Scene(name, rgb, boxes)


def make_scenes(n: int, seed: int = 0, size: int = IMAGE_SIZE, **kw) -> list[Scene]:
    rng = np.random.default_rng(seed)
    return [make_scene(rng, f"scene_{i:04d}.ppm", size, **kw) for i in range(n)]


def save_scenes(scenes, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for s in scenes:
        write_ppm(out_dir / s.name, s.rgb)
    gt_path = out_dir / "ground_truth.jsonl"
    write_ground_truth(gt_path, {s.name: s.boxes for s in scenes})
    return gt_path
