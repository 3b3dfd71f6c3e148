"""Synthetic omni-supervised corpora: generation, file formats, loaders.

Scenes are stuff-class background bands plus colored geometric things drawn
with z-order occlusion, so annotations are exactly consistent with the
rendering. Splits live under ``<root>/<split>/`` with an ``index.json``,
images as VLT1 rasters (HxWx3 float32 in [0,1]), masks as column-major
uncompressed RLE starting with the 0-run, and captions in ``captions.jsonl``.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .tensor import load_tensor, save_tensor


class DataError(ValueError):
    """Malformed dataset files or impossible generator configs."""


# ---------------------------------------------------------------------------
# label space

THING_COLORS = {
    "red": (0.85, 0.10, 0.10),
    "blue": (0.10, 0.20, 0.85),
    "yellow": (0.92, 0.86, 0.10),
    "purple": (0.60, 0.15, 0.72),
    "orange": (0.95, 0.55, 0.10),
    "cyan": (0.10, 0.80, 0.85),
    "white": (0.95, 0.95, 0.95),
}

STUFF_COLORS = {
    "sky": (0.65, 0.78, 0.90),
    "grass": (0.20, 0.48, 0.20),
    "sand": (0.82, 0.72, 0.48),
    "water": (0.15, 0.30, 0.65),
    "road": (0.35, 0.35, 0.38),
}

SHAPES = ("circle", "square", "triangle", "diamond", "cross")


@dataclass
class LabelSpace:
    names: list[str]
    is_thing: list[bool]

    def __post_init__(self):
        if len(self.names) != len(set(self.names)):
            raise DataError("label space names must be unique")
        if len(self.names) != len(self.is_thing):
            raise DataError("names and is_thing must align")

    def index(self, name: str) -> int:
        return self.names.index(name)

    def __len__(self):
        return len(self.names)

    @property
    def things(self) -> list[str]:
        return [n for n, t in zip(self.names, self.is_thing) if t]

    @property
    def stuffs(self) -> list[str]:
        return [n for n, t in zip(self.names, self.is_thing) if not t]

    def to_dict(self) -> dict:
        return {"names": self.names, "is_thing": self.is_thing}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSpace":
        return cls(list(d["names"]), list(bool(x) for x in d["is_thing"]))


def unify_label_space(spaces: list[LabelSpace]) -> LabelSpace:
    """Deduplicated union, ordered by first appearance; thing/stuff conflicts rejected."""
    names: list[str] = []
    flags: list[bool] = []
    seen: dict[str, bool] = {}
    for space in spaces:
        for name, is_thing in zip(space.names, space.is_thing):
            if name in seen:
                if seen[name] != is_thing:
                    raise DataError(f"thing/stuff conflict for class {name!r}")
                continue
            seen[name] = is_thing
            names.append(name)
            flags.append(is_thing)
    return LabelSpace(names, flags)


# ---------------------------------------------------------------------------
# RLE (column-major run lengths, starting with the 0-run)


def rle_encode(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask, dtype=np.uint8).ravel(order="F")
    # boundaries of equal-value runs
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [flat.size]])
    runs = []
    expect = 0
    for s, e in zip(starts, ends):
        v = int(flat[s])
        if v != expect:
            runs.append(0)
            expect = v
        runs.append(int(e - s))
        expect = 1 - v
    if not runs:
        runs = [0]
    return runs


def rle_decode(runs: list[int], shape: tuple[int, int]) -> np.ndarray:
    total = int(np.prod(shape))
    if sum(runs) != total:
        raise DataError(f"rle runs sum {sum(runs)} != {total} pixels")
    flat = np.zeros(total, dtype=bool)
    pos, value = 0, False
    for run in runs:
        if run < 0:
            raise DataError("rle runs must be non-negative")
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    return flat.reshape(shape, order="F")


# ---------------------------------------------------------------------------
# scene synthesis


@dataclass
class SceneConfig:
    num_images: int = 8
    image_size: int = 64
    thing_classes: list[str] = field(default_factory=lambda: ["red circle", "blue square", "yellow triangle"])
    stuff_classes: list[str] = field(default_factory=lambda: ["sky", "grass"])
    shapes_per_image: tuple[int, int] = (1, 3)
    stuff_bands: tuple[int, int] = (1, 2)
    min_shape: int = 14
    max_shape: int = 30
    mask_noise: int = 0
    mask_noise_bias: float = 0.5  # probability that pseudo-mask noise dilates (vs erodes)
    sample_fraction: float = 1.0
    caption_template: str = "a {color} {shape} on {stuff}."
    caption_template_pair: str = "a {color} {shape} and a {color2} {shape2} on {stuff}."

    def __post_init__(self):
        if not self.stuff_classes:
            raise DataError("at least one stuff (background) class is required")
        if self.min_shape > self.image_size or self.max_shape > self.image_size:
            raise DataError(
                f"image size {self.image_size} too small for shapes up to {self.max_shape}"
            )
        for name in self.thing_classes:
            parse_thing_name(name)


def parse_thing_name(name: str) -> tuple[str, str]:
    parts = name.split()
    if len(parts) != 2 or parts[1] not in SHAPES:
        raise DataError(f"thing class {name!r} must be '<color> <shape>' with shape in {SHAPES}")
    return parts[0], parts[1]


def _name_color(name: str, palette: dict) -> np.ndarray:
    if name in palette:
        return np.array(palette[name])
    h = zlib.crc32(name.encode()) % 360 / 360.0
    # crude hsv->rgb, saturated
    i = int(h * 6)
    f = h * 6 - i
    v, p, q, t = 0.9, 0.25, 0.9 * (1 - 0.7 * f), 0.25 + 0.65 * f
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i % 6]
    return np.array(rgb)


def _shape_mask(shape: str, size: int, cy: int, cx: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "circle":
        r = min(h, w) / 2
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
    if shape == "square":
        return (np.abs(yy - cy) <= h / 2) & (np.abs(xx - cx) <= w / 2)
    if shape == "triangle":
        top, bottom = cy - h / 2, cy + h / 2
        frac = np.clip((yy - top) / max(h, 1), 0, 1)
        return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= frac * w / 2)
    if shape == "diamond":
        return np.abs(yy - cy) / (h / 2) + np.abs(xx - cx) / (w / 2) <= 1
    if shape == "cross":
        arm_h = (np.abs(yy - cy) <= h / 6) & (np.abs(xx - cx) <= w / 2)
        arm_v = (np.abs(xx - cx) <= w / 6) & (np.abs(yy - cy) <= h / 2)
        return arm_h | arm_v
    raise DataError(f"unknown shape {shape!r}")


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) float32
    segments: list[dict]  # {"class", "is_thing", "mask"} partitioning the image
    things: list[dict]  # {"class", "box", "mask"} visible thing instances


def sample_scene(cfg: SceneConfig, rng: np.random.Generator) -> Scene:
    size = cfg.image_size
    image = np.zeros((size, size, 3), dtype=np.float64)

    lo_b, hi_b = cfg.stuff_bands
    hi_b = min(hi_b, len(cfg.stuff_classes), 2)
    lo_b = min(lo_b, hi_b)
    n_bands = int(rng.integers(lo_b, hi_b + 1)) if hi_b > lo_b else lo_b
    band_classes = list(rng.choice(cfg.stuff_classes, size=n_bands, replace=False))
    stuff_map = np.zeros((size, size), dtype=np.int64)
    if n_bands == 2:
        boundary = int(rng.integers(size // 4, 3 * size // 4))
        stuff_map[boundary:] = 1
    for bi, name in enumerate(band_classes):
        color = _name_color(name, STUFF_COLORS) + rng.uniform(-0.02, 0.02, 3)
        image[stuff_map == bi] = color

    things = []
    if cfg.thing_classes and cfg.shapes_per_image[1] > 0:
        lo, hi = cfg.shapes_per_image
        n_things = int(rng.integers(lo, hi + 1)) if hi > lo else lo
        full_masks = []
        for _ in range(n_things):
            cls = str(rng.choice(cfg.thing_classes))
            color_name, shape = parse_thing_name(cls)
            h = int(rng.integers(cfg.min_shape, cfg.max_shape + 1))
            w = int(rng.integers(cfg.min_shape, cfg.max_shape + 1))
            cy = int(rng.integers(h // 2, size - h // 2)) if size > h else size // 2
            cx = int(rng.integers(w // 2, size - w // 2)) if size > w else size // 2
            mask = _shape_mask(shape, size, cy, cx, h, w)
            color = _name_color(color_name, THING_COLORS) + rng.uniform(-0.03, 0.03, 3)
            image[mask] = color
            full_masks.append((cls, mask))
        occluder = np.zeros((size, size), dtype=bool)
        for cls, mask in reversed(full_masks):
            visible = mask & ~occluder
            occluder |= mask
            if not visible.any():
                continue
            ys, xs = np.nonzero(visible)
            box = [int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1]
            things.append({"class": cls, "box": box, "mask": visible})
        things.reverse()

    image = np.clip(image + rng.uniform(-0.01, 0.01, image.shape), 0.0, 1.0).astype(np.float32)

    segments = [{"class": t["class"], "is_thing": True, "mask": t["mask"]} for t in things]
    thing_pixels = np.zeros((size, size), dtype=bool)
    for t in things:
        thing_pixels |= t["mask"]
    for bi, name in enumerate(band_classes):
        mask = (stuff_map == bi) & ~thing_pixels
        if mask.any():
            segments.append({"class": name, "is_thing": False, "mask": mask})
    return Scene(image, segments, things)


def _noisy_pseudo_mask(
    mask: np.ndarray, box: list[int], radius: int, rng: np.random.Generator, grow_prob: float = 0.5
) -> np.ndarray:
    if radius <= 0:
        return mask.copy()
    grow = bool(rng.random() < grow_prob)
    structure = ndimage.generate_binary_structure(2, 1)
    noisy = (
        ndimage.binary_dilation(mask, structure, iterations=radius)
        if grow
        else ndimage.binary_erosion(mask, structure, iterations=radius)
    )
    clipped = np.zeros_like(mask)
    y0, x0, y1, x1 = box
    clipped[y0:y1, x0:x1] = noisy[y0:y1, x0:x1]
    if not clipped.any():
        return mask.copy()  # erosion wiped the object; fall back to the true mask
    return clipped


def caption_for(scene: Scene, template: str, rng: np.random.Generator, pair_template: str | None = None) -> str:
    if not scene.things:
        stuff = [s for s in scene.segments if not s["is_thing"]]
        return f"a plain {stuff[0]['class']} scene."
    ranked = sorted(scene.things, key=lambda t: -t["mask"].sum())
    biggest = ranked[0]
    color, shape = parse_thing_name(biggest["class"])
    ys, xs = np.nonzero(biggest["mask"])
    cy = int(ys.mean())
    stuff_name = None
    for s in scene.segments:
        if not s["is_thing"]:
            band_ys, _ = np.nonzero(s["mask"])
            if band_ys.size and band_ys.min() <= cy <= band_ys.max():
                stuff_name = s["class"]
                break
    if stuff_name is None:
        stuff_name = next(s["class"] for s in scene.segments if not s["is_thing"])
    if pair_template and len(ranked) > 1 and ranked[1]["class"] != biggest["class"]:
        color2, shape2 = parse_thing_name(ranked[1]["class"])
        return pair_template.format(
            color=color, shape=shape, color2=color2, shape2=shape2, stuff=stuff_name
        )
    return template.format(color=color, shape=shape, stuff=stuff_name)


# ---------------------------------------------------------------------------
# split generation


def _num_kept(cfg: SceneConfig) -> int:
    return int(round(cfg.num_images * cfg.sample_fraction))


def synth_panoptic_samples(cfg: SceneConfig, seed: int) -> list[Scene]:
    rng = np.random.default_rng([seed, 0])
    return [sample_scene(cfg, rng) for _ in range(_num_kept(cfg))]


def generate_synth_panoptic(cfg: SceneConfig, seed: int, out_dir, split_name: str = "panoptic") -> Path:
    scenes = synth_panoptic_samples(cfg, seed)
    space = LabelSpace(
        cfg.thing_classes + cfg.stuff_classes,
        [True] * len(cfg.thing_classes) + [False] * len(cfg.stuff_classes),
    )
    return _write_split(out_dir, split_name, scenes, space, cfg, kind="panoptic")


def generate_synth_detection(cfg: SceneConfig, seed: int, out_dir) -> Path:
    rng = np.random.default_rng([seed, 1])
    scenes = [sample_scene(cfg, rng) for _ in range(_num_kept(cfg))]
    noise_rng = np.random.default_rng([seed, 2])
    for scene in scenes:
        for obj in scene.things:
            obj["pseudo_mask"] = _noisy_pseudo_mask(
                obj["mask"], obj["box"], cfg.mask_noise, noise_rng, cfg.mask_noise_bias
            )
    space = LabelSpace(list(cfg.thing_classes), [True] * len(cfg.thing_classes))
    return _write_split(out_dir, "detection", scenes, space, cfg, kind="detection")


def generate_synth_captions(cfg: SceneConfig, seed: int, out_dir) -> Path:
    rng = np.random.default_rng([seed, 3])
    scenes, captions = [], []
    seen = set()
    attempts = 0
    while len(scenes) < _num_kept(cfg):
        scene = sample_scene(cfg, rng)
        cap = caption_for(scene, cfg.caption_template, rng, cfg.caption_template_pair)
        attempts += 1
        if cap in seen:
            if attempts > 200 * max(cfg.num_images, 1):
                raise DataError("caption space exhausted; add classes or reduce num_images")
            continue
        seen.add(cap)
        scenes.append(scene)
        captions.append(cap)
    space = LabelSpace(
        cfg.thing_classes + cfg.stuff_classes,
        [True] * len(cfg.thing_classes) + [False] * len(cfg.stuff_classes),
    )
    return _write_split(out_dir, "caption", scenes, space, cfg, kind="caption", captions=captions)


def _write_split(out_dir, split: str, scenes, space: LabelSpace, cfg, kind: str, captions=None) -> Path:
    root = Path(out_dir) / split
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, scene in enumerate(scenes):
        image_id = f"{i:06d}"
        save_tensor(root / "images" / f"{image_id}.vlt", scene.image)
        entry = {"id": image_id, "file": f"images/{image_id}.vlt"}
        if kind == "panoptic":
            entry["segments"] = [
                {"class": s["class"], "is_thing": s["is_thing"], "rle": rle_encode(s["mask"])}
                for s in scene.segments
            ]
        elif kind == "detection":
            entry["objects"] = [
                {"class": t["class"], "box": t["box"], "rle": rle_encode(t["pseudo_mask"])}
                for t in scene.things
            ]
        entries.append(entry)
    index = {
        "split": split,
        "stream": kind,
        "image_size": [cfg.image_size, cfg.image_size],
        "label_space": space.to_dict(),
        "images": entries,
    }
    with open(root / "index.json", "w") as fh:
        json.dump(index, fh)
    if kind == "caption":
        with open(root / "captions.jsonl", "w") as fh:
            for entry, cap in zip(entries, captions):
                fh.write(json.dumps({"image_id": entry["id"], "caption": cap}) + "\n")
    return root


# ---------------------------------------------------------------------------
# loading


@dataclass
class PanopticSample:
    image_id: str
    image: np.ndarray
    segments: list[dict]  # {"class", "is_thing", "mask"}


@dataclass
class DetectionSample:
    image_id: str
    image: np.ndarray
    objects: list[dict]  # {"class", "box", "mask"}


@dataclass
class CaptionSample:
    image_id: str
    image: np.ndarray
    caption: str


@dataclass
class Dataset:
    stream: str
    label_space: LabelSpace
    samples: list

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise DataError(f"index.json: {where}.{key} missing")
    return d[key]


def load_dataset(path, stream: str) -> Dataset:
    root = Path(path)
    index_path = root / "index.json"
    if not index_path.exists():
        raise DataError(f"missing {index_path}")
    try:
        with open(index_path) as fh:
            index = json.load(fh)
    except json.JSONDecodeError as e:
        raise DataError(f"{index_path}: malformed JSON at byte {e.pos}") from e

    declared = _require(index, "stream", "index")
    if declared != stream:
        raise DataError(f"{index_path}: stream {declared!r} != requested {stream!r}")
    space = LabelSpace.from_dict(_require(index, "label_space", "index"))
    h, w = _require(index, "image_size", "index")

    captions = {}
    if stream == "caption":
        cap_path = root / "captions.jsonl"
        if not cap_path.exists():
            raise DataError(f"missing {cap_path}")
        with open(cap_path) as fh:
            for ln, line in enumerate(fh):
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as e:
                    raise DataError(f"{cap_path}: line {ln}: malformed JSON at byte {e.pos}") from e
                captions[_require(row, "image_id", f"captions[{ln}]")] = _require(
                    row, "caption", f"captions[{ln}]"
                )

    samples = []
    for i, entry in enumerate(_require(index, "images", "index")):
        where = f"images[{i}]"
        image_id = _require(entry, "id", where)
        image = load_tensor(root / _require(entry, "file", where))
        if image.shape != (h, w, 3):
            raise DataError(f"{where}: raster shape {image.shape} != {(h, w, 3)}")
        if stream == "panoptic":
            segs = []
            cover = np.zeros((h, w), dtype=np.int64)
            for j, s in enumerate(_require(entry, "segments", where)):
                sw = f"{where}.segments[{j}]"
                mask = rle_decode(_require(s, "rle", sw), (h, w))
                segs.append({"class": _require(s, "class", sw), "is_thing": bool(s.get("is_thing", True)), "mask": mask})
                cover += mask
            if segs and not (cover == 1).all():
                raise DataError(f"{where}: segments do not partition the image")
            samples.append(PanopticSample(image_id, image, segs))
        elif stream == "detection":
            objs = []
            for j, o in enumerate(_require(entry, "objects", where)):
                ow = f"{where}.objects[{j}]"
                objs.append(
                    {
                        "class": _require(o, "class", ow),
                        "box": list(_require(o, "box", ow)),
                        "mask": rle_decode(_require(o, "rle", ow), (h, w)),
                    }
                )
            samples.append(DetectionSample(image_id, image, objs))
        elif stream == "caption":
            if image_id not in captions:
                raise DataError(f"{where}: no caption for image {image_id}")
            samples.append(CaptionSample(image_id, image, captions[image_id]))
        else:
            raise DataError(f"unknown stream {stream!r}")
    return Dataset(stream, space, samples)


def flip_sample(sample):
    """Horizontal flip, annotation-consistent."""
    if isinstance(sample, PanopticSample):
        return PanopticSample(
            sample.image_id,
            sample.image[:, ::-1].copy(),
            [{**s, "mask": s["mask"][:, ::-1].copy()} for s in sample.segments],
        )
    if isinstance(sample, DetectionSample):
        w = sample.image.shape[1]
        return DetectionSample(
            sample.image_id,
            sample.image[:, ::-1].copy(),
            [
                {
                    **o,
                    "box": [o["box"][0], w - o["box"][3], o["box"][2], w - o["box"][1]],
                    "mask": o["mask"][:, ::-1].copy(),
                }
                for o in sample.objects
            ],
        )
    if isinstance(sample, CaptionSample):
        return CaptionSample(sample.image_id, sample.image[:, ::-1].copy(), sample.caption)
    raise DataError(f"cannot flip {type(sample).__name__}")
