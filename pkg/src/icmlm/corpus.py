"""Image-caption data model, synthetic scene corpus, and on-disk persistence."""

from __future__ import annotations

import hashlib
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

DATASET_FORMAT = "icmlm-dataset"
DATASET_VERSION = 1

SHAPES = ("circle", "square", "triangle", "star")
COLORS = ("red", "green", "blue", "yellow", "purple", "cyan")
SIZES = ("small", "large")

COLOR_RGB = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.92, 0.85, 0.10),
    "purple": (0.60, 0.15, 0.80),
    "cyan": (0.10, 0.80, 0.85),
}

_ROWS = ("top", "middle", "bottom")
_COLS = ("left", "center", "right")
_COUNTS = ("one", "two", "three")
_SCENE_VERBS = ("with", "showing")

# POS lexicon of the caption grammar. Synthetic captions are closed over this
# vocabulary, so downstream tagging is exact.
GRAMMAR_LEXICON = {
    **{w: "NN" for w in SHAPES},
    **{w: "NN" for w in ("top", "middle", "bottom", "left", "right", "center")},
    "picture": "NN",
    "shape": "NN",
    "shapes": "NN",
    **{w: "ADJ" for w in COLORS},
    **{w: "ADJ" for w in SIZES},
    "showing": "VB",
    **{w: "OTHER" for w in ("a", "in", "the", "with", "one", "two", "three")},
}


class CorpusError(Exception):
    pass


class ManifestError(CorpusError):
    pass


class DatasetIOError(CorpusError):
    pass


class DatasetVersionError(CorpusError):
    pass


@dataclass(frozen=True)
class ShapePlacement:
    shape: str
    color: str
    cell: int  # 0..8 on a 3x3 scene grid
    size: str


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Recipe for one rendered scene; rendering is a pure function of this."""

    shapes: tuple[ShapePlacement, ...]
    seed: int

    def __post_init__(self):
        if not 1 <= len(self.shapes) <= 3:
            raise ValueError("a scene holds 1 to 3 shapes")
        cells = [s.cell for s in self.shapes]
        if len(set(cells)) != len(cells):
            raise ValueError("shapes must occupy distinct cells")


@dataclass(frozen=True, eq=False)
class ImageRecord:
    image_id: str
    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1], quantized to 1/255 steps
    source_path: str

    def __post_init__(self):
        h, w, c = self.pixels.shape
        if h != w or c != 3:
            raise ValueError(f"image {self.image_id}: expected square HxWx3 pixels")
        self.pixels.setflags(write=False)


@dataclass(frozen=True)
class CaptionRecord:
    caption_id: str
    image_id: str
    text: str


@dataclass(frozen=True, eq=False)
class Dataset:
    images: tuple[ImageRecord, ...]
    captions: tuple[CaptionRecord, ...]
    split: str = "train"
    scenes: dict[str, SyntheticSceneSpec] = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in ("train", "val"):
            raise ValueError(f"unknown split {self.split!r}")
        ids = {im.image_id for im in self.images}
        if len(ids) != len(self.images):
            raise ValueError("duplicate image ids")
        for cap in self.captions:
            if cap.image_id not in ids:
                raise ValueError(f"caption {cap.caption_id} references unknown image {cap.image_id}")

    def image_by_id(self, image_id: str) -> ImageRecord:
        for im in self.images:
            if im.image_id == image_id:
                return im
        raise KeyError(image_id)

    def captions_of(self, image_id: str) -> list[CaptionRecord]:
        return [c for c in self.captions if c.image_id == image_id]


def _quantize(raw: np.ndarray) -> np.ndarray:
    return np.round(np.clip(raw, 0.0, 1.0) * 255.0).astype(np.uint8)


def _dequantize(u8: np.ndarray) -> np.ndarray:
    return u8.astype(np.float32) / np.float32(255.0)


def region_phrase(cell: int) -> str:
    """Readable location of a scene cell: 'center' for the middle, 'row col' otherwise."""
    if cell == 4:
        return "center"
    return f"{_ROWS[cell // 3]} {_COLS[cell % 3]}"


def scene_layout(spec: SyntheticSceneSpec, image_size: int):
    """Background color and per-shape (cx, cy, radius, brightness), all derived from spec.seed.

    Shared by the renderer and the geometry oracle so attention boxes stay exact.
    The background is a random low-intensity color gradient: it varies both
    per image and across the image, so no single region summarizes it and it
    cannot be projected out along one channel direction.
    """
    rng = np.random.default_rng(spec.seed)
    base = rng.uniform(0.02, 0.14, size=3)
    slope = rng.uniform(-0.09, 0.09, size=(2, 3))
    background = (base, slope)
    cell_size = image_size / 3.0
    placements = []
    for shp in spec.shapes:
        row, col = divmod(shp.cell, 3)
        jx, jy = rng.integers(-2, 3, size=2)
        cx = (col + 0.5) * cell_size + float(jx)
        cy = (row + 0.5) * cell_size + float(jy)
        base_r = 5.0 if shp.size == "small" else 8.0
        r = max(2.0, base_r * image_size / 64.0)
        brightness = float(rng.uniform(0.75, 1.0))
        placements.append((cx, cy, r, brightness))
    return background, placements


def _shape_mask(shape: str, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= r
    if shape == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if shape == "star":
        theta = np.arctan2(dy, dx)
        r_eff = r * (0.45 + 0.55 * (0.5 + 0.5 * np.cos(5.0 * theta)))
        return dx * dx + dy * dy <= r_eff * r_eff
    raise ValueError(f"unknown shape {shape!r}")


def _background_canvas(background, image_size: int) -> np.ndarray:
    base, slope = background
    coords = (np.arange(image_size) + 0.5) / image_size - 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    field = base[None, None] + yy[..., None] * slope[0][None, None] + xx[..., None] * slope[1][None, None]
    return np.clip(field, 0.0, 0.3)


def render_scene(spec: SyntheticSceneSpec, image_size: int = 64) -> np.ndarray:
    background, placements = scene_layout(spec, image_size)
    canvas = _background_canvas(background, image_size)
    for shp, (cx, cy, r, brightness) in zip(spec.shapes, placements):
        mask = _shape_mask(shp.shape, cx, cy, r, image_size)
        canvas[mask] = np.asarray(COLOR_RGB[shp.color]) * brightness
    noise_rng = np.random.default_rng(spec.seed + 1)
    canvas += noise_rng.normal(scale=0.015, size=canvas.shape)
    return _dequantize(_quantize(canvas))


def shape_cells(spec: SyntheticSceneSpec, shape_index: int, image_size: int, grid_hw: tuple[int, int]):
    """Feature-grid cells overlapped by the bounding box of one shape."""
    _, placements = scene_layout(spec, image_size)
    cx, cy, r, _ = placements[shape_index]
    gh, gw = grid_hw
    cell_h, cell_w = image_size / gh, image_size / gw
    r0 = max(0, int(np.floor((cy - r) / cell_h)))
    r1 = min(gh - 1, int(np.floor((cy + r - 1e-9) / cell_h)))
    c0 = max(0, int(np.floor((cx - r) / cell_w)))
    c1 = min(gw - 1, int(np.floor((cx + r - 1e-9) / cell_w)))
    return [(rr, cc) for rr in range(r0, r1 + 1) for cc in range(c0, c1 + 1)]


def sample_scene_spec(rng: np.random.Generator) -> SyntheticSceneSpec:
    n_shapes = int(rng.integers(1, 4))
    cells = rng.choice(9, size=n_shapes, replace=False)
    shapes = tuple(
        ShapePlacement(
            shape=SHAPES[rng.integers(len(SHAPES))],
            color=COLORS[rng.integers(len(COLORS))],
            cell=int(cell),
            size=SIZES[rng.integers(len(SIZES))],
        )
        for cell in cells
    )
    return SyntheticSceneSpec(shapes=shapes, seed=int(rng.integers(2**31)))


def scene_captions(spec: SyntheticSceneSpec, rng: np.random.Generator) -> list[str]:
    """One caption per shape plus one scene-level caption."""
    caps = [
        f"a {s.size} {s.color} {s.shape} in the {region_phrase(s.cell)}"
        for s in spec.shapes
    ]
    n = len(spec.shapes)
    verb = _SCENE_VERBS[rng.integers(len(_SCENE_VERBS))]
    noun = "shape" if n == 1 else "shapes"
    caps.append(f"a picture {verb} {_COUNTS[n - 1]} {noun}")
    return caps


def generate_synthetic(n_images: int, seed: int, image_size: int = 64, split: str = "train") -> Dataset:
    """Procedural shapes corpus; pure function of (n_images, seed, image_size)."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    images, captions, scenes = [], [], {}
    for i in range(n_images):
        rng = np.random.default_rng([seed, i])
        spec = sample_scene_spec(rng)
        image_id = f"img_{i:05d}"
        images.append(
            ImageRecord(image_id=image_id, pixels=render_scene(spec, image_size), source_path="synthetic")
        )
        for j, text in enumerate(scene_captions(spec, rng)):
            captions.append(CaptionRecord(caption_id=f"{image_id}_c{j}", image_id=image_id, text=text))
        scenes[image_id] = spec
    return Dataset(images=tuple(images), captions=tuple(captions), split=split, scenes=scenes)


def load_manifest(path, image_size: int = 64, split: str = "train") -> Dataset:
    """Read a JSON-Lines manifest: one {"image": path, "captions": [...]} per line."""
    path = Path(path)
    base = path.parent
    records = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if "image" not in entry or "captions" not in entry:
                raise ManifestError(f"line {lineno}: expected keys 'image' and 'captions'")
            img_path = Path(entry["image"])
            if not img_path.is_absolute():
                img_path = base / img_path
            if not img_path.exists():
                raise ManifestError(f"line {lineno}: image file not found: {img_path}")
            image_id = img_path.stem
            if image_id in records:
                raise ManifestError(f"line {lineno}: duplicate image id {image_id!r}")
            try:
                with Image.open(img_path) as im:
                    im = im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
                    pixels = _dequantize(np.asarray(im, dtype=np.uint8))
            except ManifestError:
                raise
            except Exception as exc:
                raise ManifestError(f"line {lineno}: cannot decode image {img_path}: {exc}") from exc
            records[image_id] = (str(img_path), pixels, list(entry["captions"]))
    images, captions = [], []
    for image_id in sorted(records):
        src, pixels, caps = records[image_id]
        images.append(ImageRecord(image_id=image_id, pixels=pixels, source_path=src))
        for j, text in enumerate(caps):
            captions.append(CaptionRecord(caption_id=f"{image_id}_c{j}", image_id=image_id, text=str(text)))
    return Dataset(images=tuple(images), captions=tuple(captions), split=split)


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def save_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    checksums = {}
    for im in ds.images:
        png_path = out / "images" / f"{im.image_id}.png"
        Image.fromarray(_quantize(im.pixels.astype(np.float64))).save(png_path, format="PNG")
        checksums[im.image_id] = _sha256_file(png_path)
    with open(out / "captions.jsonl", "w", encoding="utf-8") as fh:
        for cap in ds.captions:
            fh.write(json.dumps({"caption_id": cap.caption_id, "image_id": cap.image_id, "text": cap.text}) + "\n")
    if ds.scenes:
        with open(out / "scenes.jsonl", "w", encoding="utf-8") as fh:
            for image_id, spec in ds.scenes.items():
                fh.write(json.dumps({
                    "image_id": image_id,
                    "seed": spec.seed,
                    "shapes": [vars(s) for s in spec.shapes],
                }) + "\n")
    sources = {im.image_id: im.source_path for im in ds.images}
    meta = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "split": ds.split,
        "image_size": int(ds.images[0].pixels.shape[0]) if ds.images else 0,
        "n_images": len(ds.images),
        "n_captions": len(ds.captions),
        "image_sha256": checksums,
        "source_paths": sources,
    }
    with open(out / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_dataset(in_dir) -> Dataset:
    src = Path(in_dir)
    meta_path = src / "meta.json"
    if not meta_path.exists():
        raise DatasetIOError(f"{src}: not a dataset (missing meta.json)")
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format") != DATASET_FORMAT:
        raise DatasetIOError(f"{src}: not a dataset (unexpected format tag)")
    if meta.get("version") != DATASET_VERSION:
        raise DatasetVersionError(
            f"{src}: dataset version {meta.get('version')} incompatible with supported version {DATASET_VERSION}"
        )
    images = []
    for image_id in sorted(meta["image_sha256"]):
        png_path = src / "images" / f"{image_id}.png"
        if not png_path.exists():
            raise DatasetIOError(f"missing image file {png_path}")
        if _sha256_file(png_path) != meta["image_sha256"][image_id]:
            raise DatasetIOError(f"checksum mismatch for image file {png_path}")
        try:
            with Image.open(png_path) as im:
                pixels = _dequantize(np.asarray(im.convert("RGB"), dtype=np.uint8))
        except Exception as exc:
            raise DatasetIOError(f"cannot decode image file {png_path}: {exc}") from exc
        images.append(ImageRecord(
            image_id=image_id,
            pixels=pixels,
            source_path=meta.get("source_paths", {}).get(image_id, "synthetic"),
        ))
    captions = []
    with open(src / "captions.jsonl", "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                captions.append(CaptionRecord(d["caption_id"], d["image_id"], d["text"]))
    scenes = {}
    scenes_path = src / "scenes.jsonl"
    if scenes_path.exists():
        with open(scenes_path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    scenes[d["image_id"]] = SyntheticSceneSpec(
                        shapes=tuple(ShapePlacement(**s) for s in d["shapes"]),
                        seed=d["seed"],
                    )
    return Dataset(images=tuple(images), captions=tuple(captions), split=meta["split"], scenes=scenes)


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    if a.split != b.split or len(a.images) != len(b.images) or a.captions != b.captions:
        return False
    if a.scenes != b.scenes:
        return False
    for ia, ib in zip(a.images, b.images):
        if ia.image_id != ib.image_id or ia.source_path != ib.source_path:
            return False
        if not np.array_equal(ia.pixels, ib.pixels):
            return False
    return True
