"""Deterministic synthetic scene generator and annotation I/O.

Scenes are noisy backgrounds with class-colored filled primitives (rectangle,
ellipse or triangle per class), each annotated with a normalized center-format
box. Images round-trip through binary PPM (P6, 8-bit), annotations through a
small JSON schema; a dataset directory holds scene_%05d.ppm / .json pairs and
a catalog.json naming the classes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, IntegrityError, ParseError
from .geometry import Box
from .matching import GroundTruth
from .numeric import Tensor

DEFAULT_CLASSES = ("transformer", "insulator", "bushing", "robot", "uav")

# fill/outline color per default class (index-aligned); extra classes cycle
CLASS_COLORS = (
    (0.90, 0.10, 0.10),  # transformer: red
    (0.55, 0.10, 0.80),  # insulator: purple
    (0.95, 0.85, 0.10),  # bushing: yellow
    (0.15, 0.25, 0.95),  # robot: blue
    (0.10, 0.80, 0.20),  # uav: green
    (0.10, 0.85, 0.85),
    (0.95, 0.50, 0.10),
)

_SHAPES = ("rectangle", "ellipse", "triangle")


def class_color(class_id: int) -> tuple[float, float, float]:
    return CLASS_COLORS[class_id % len(CLASS_COLORS)]


@dataclass(frozen=True)
class SceneConfig:
    image_size: tuple[int, int] = (32, 32)
    max_objects: int = 3
    catalog: tuple[str, ...] = DEFAULT_CLASSES

    def __post_init__(self):
        if self.max_objects < 1:
            raise ContractError("max_objects must be at least 1")
        if not self.catalog or len(set(self.catalog)) != len(self.catalog):
            raise ContractError("catalog must be nonempty with unique names")


@dataclass
class Scene:
    image: Tensor  # [3, H, W] in [0, 1]
    objects: list[GroundTruth]


def _pixel_grid(h: int, w: int):
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    return np.meshgrid(ys, xs, indexing="ij")


def _shape_mask(kind: str, box: Box, h: int, w: int) -> np.ndarray:
    yy, xx = _pixel_grid(h, w)
    x1, y1, x2, y2 = box.to_corners()
    if kind == "rectangle":
        return (xx >= x1) & (xx <= x2) & (yy >= y1) & (yy <= y2)
    if kind == "ellipse":
        nx = (xx - box.cx) / (box.w / 2)
        ny = (yy - box.cy) / (box.h / 2)
        return nx * nx + ny * ny <= 1.0
    # triangle: base on the bottom edge, apex at the top center
    t = np.clip((y2 - yy) / (y2 - y1), 0.0, 1.0)  # 0 at base, 1 at apex
    half = (box.w / 2) * (1.0 - t)
    return (yy >= y1) & (yy <= y2) & (np.abs(xx - box.cx) <= half)


def generate_scene(seed: int, config: SceneConfig = SceneConfig()) -> Scene:
    """Pure function of (seed, config): background noise plus colored objects."""
    rng = np.random.default_rng(seed)
    h, w = config.image_size
    k = len(config.catalog)
    img = rng.uniform(0.15, 0.35, (3, h, w))
    count = int(rng.integers(1, config.max_objects + 1))
    objects = []
    for _ in range(count):
        class_id = int(rng.integers(0, k))
        bw = rng.uniform(0.1, 0.4)
        bh = rng.uniform(0.1, 0.4)
        cx = rng.uniform(bw / 2, 1 - bw / 2)
        cy = rng.uniform(bh / 2, 1 - bh / 2)
        box = Box(cx, cy, bw, bh)
        mask = _shape_mask(_SHAPES[class_id % len(_SHAPES)], box, h, w)
        color = class_color(class_id)
        for ch in range(3):
            img[ch][mask] = color[ch]
        objects.append(GroundTruth(class_id, box))
    return Scene(Tensor(img), objects)


# ---------------------------------------------------------------------------
# PPM codec (P6, 8-bit)


def write_ppm(image: np.ndarray | Tensor, path) -> None:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ContractError(f"expected a [3, H, W] image, got shape {arr.shape}")
    _, h, w = arr.shape
    raster = np.rint(np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(raster.transpose(1, 2, 0).tobytes())


def _next_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise ParseError(f"unexpected end of PPM header at byte {pos}")
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 PPM into a [3, H, W] float64 array in [0, 1]."""
    buf = Path(path).read_bytes()
    magic, pos = _next_token(buf, 0)
    if magic != b"P6":
        raise ParseError(f"not a binary PPM (magic {magic!r} at byte 0)")
    fields = []
    for _ in range(3):
        tok, pos = _next_token(buf, pos)
        if not tok.isdigit():
            raise ParseError(f"bad PPM header token {tok!r} at byte {pos - len(tok)}")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval} at byte {pos - len(str(maxval))}")
    pos += 1  # single whitespace after maxval
    expected = w * h * 3
    raster = buf[pos : pos + expected]
    if len(raster) != expected:
        raise ParseError(f"raster truncated at byte {pos + len(raster)} (expected {expected} bytes)")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return arr.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# annotation JSON and scene/dataset round trips


def annotations_to_json(scene: Scene, image_name: str, catalog) -> dict:
    h, w = scene.image.shape[1:]
    return {
        "image": image_name,
        "width": int(w),
        "height": int(h),
        "objects": [
            {
                "class_id": g.class_id,
                "class_name": catalog[g.class_id],
                "cx": g.box.cx,
                "cy": g.box.cy,
                "w": g.box.w,
                "h": g.box.h,
            }
            for g in scene.objects
        ],
    }


def save_scene(scene: Scene, stem, catalog=DEFAULT_CLASSES) -> None:
    """Write <stem>.ppm and <stem>.json."""
    stem = Path(stem)
    write_ppm(scene.image, stem.with_suffix(".ppm"))
    doc = annotations_to_json(scene, stem.with_suffix(".ppm").name, catalog)
    stem.with_suffix(".json").write_text(json.dumps(doc, indent=1) + "\n")


def load_scene(stem) -> Scene:
    """Read a <stem>.ppm / <stem>.json pair back into a Scene."""
    stem = Path(stem)
    image = read_ppm(stem.with_suffix(".ppm"))
    try:
        doc = json.loads(stem.with_suffix(".json").read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"bad annotation JSON in {stem.with_suffix('.json')}: {e}") from e
    h, w = image.shape[1:]
    if doc.get("width") != w or doc.get("height") != h:
        raise IntegrityError(f"annotation size {doc.get('width')}x{doc.get('height')} mismatches image {w}x{h}")
    objects = []
    for rec in doc.get("objects", []):
        box = Box(rec["cx"], rec["cy"], rec["w"], rec["h"])
        if not box.inside_unit():
            raise IntegrityError(f"object box {box} leaves the unit square")
        objects.append(GroundTruth(int(rec["class_id"]), box))
    if not objects:
        raise IntegrityError(f"scene {stem} has no objects")
    return Scene(Tensor(image), objects)


def save_dataset(scenes: list[Scene], out_dir, catalog=DEFAULT_CLASSES) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, scene in enumerate(scenes):
        save_scene(scene, out / f"scene_{i:05d}", catalog)
    (out / "catalog.json").write_text(json.dumps(list(catalog), indent=1) + "\n")


def load_dataset(data_dir) -> tuple[list[Scene], list[str]]:
    root = Path(data_dir)
    cat_path = root / "catalog.json"
    if not cat_path.exists():
        raise ParseError(f"no catalog.json in {root}")
    catalog = json.loads(cat_path.read_text())
    stems = sorted(p.with_suffix("") for p in root.glob("scene_*.ppm"))
    if not stems:
        raise ParseError(f"no scene_*.ppm files in {root}")
    return [load_scene(stem) for stem in stems], list(catalog)
