"""Synthetic shapes corpora and incremental step slicing.

Two corpus styles share the same shape vocabulary but draw colours and
textures from disjoint parameter ranges, so a generator pretrained on one
style sees a measurable distribution shift on the other.
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

BACKGROUND = 0

SHAPES = (
    "circle",
    "square",
    "triangle",
    "star",
    "cross",
    "ring",
    "bar",
    "diamond",
    "hexagon",
    "crescent",
)

STYLES = ("pretrain", "downstream")


def class_name(class_id: int) -> str:
    if class_id == BACKGROUND:
        return "background"
    return SHAPES[class_id - 1]


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # H x W x C float32 in [0, 1]
    mask: np.ndarray  # H x W uint8 class ids
    id: str

    @property
    def classes(self) -> set[int]:
        return {int(c) for c in np.unique(self.mask) if c != BACKGROUND}

    @property
    def dominant_class(self) -> int:
        counts = np.bincount(self.mask.ravel(), minlength=len(SHAPES) + 1)
        counts[BACKGROUND] = 0
        return int(counts.argmax())

    def with_mask(self, mask: np.ndarray) -> "LabeledImage":
        return LabeledImage(self.pixels, mask, self.id)


@dataclass(frozen=True)
class LabelSpace:
    base_classes: tuple[int, ...]
    step_classes: tuple[tuple[int, ...], ...]
    background: int = BACKGROUND

    def __post_init__(self):
        seen: set[int] = set()
        for cs in self.step_classes:
            overlap = seen.intersection(cs)
            if overlap or self.background in cs or len(set(cs)) != len(cs):
                raise ValueError(f"step class sets must be disjoint, got {self.step_classes}")
            seen.update(cs)
        if self.step_classes and tuple(self.step_classes[0]) != tuple(self.base_classes):
            raise ValueError("base classes must equal the first step's classes")

    @property
    def n_steps(self) -> int:
        return len(self.step_classes)

    def classes_upto(self, t: int) -> list[int]:
        """Classes learned in steps 1..t, in learning order (1-based t)."""
        return [c for cs in self.step_classes[:t] for c in cs]

    @property
    def vocabulary(self) -> list[int]:
        return self.classes_upto(self.n_steps)

    def to_dict(self) -> dict:
        return {
            "background": self.background,
            "base_classes": list(self.base_classes),
            "step_classes": [list(cs) for cs in self.step_classes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSpace":
        return cls(
            base_classes=tuple(d["base_classes"]),
            step_classes=tuple(tuple(cs) for cs in d["step_classes"]),
            background=d.get("background", BACKGROUND),
        )


@dataclass(frozen=True)
class CorpusSpec:
    num_classes: int = 8
    image_size: tuple[int, int] = (64, 64)
    images_per_class: int = 50
    style: str = "downstream"
    seed: int = 0

    def validate(self) -> None:
        if self.style not in STYLES:
            raise ValueError(f"unknown style {self.style!r}, expected one of {STYLES}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.num_classes > len(SHAPES):
            raise ValueError(f"num_classes={self.num_classes} exceeds the {len(SHAPES)}-shape vocabulary")
        h, w = self.image_size
        if h < 32 or w < 32:
            raise ValueError(f"image_size must be at least 32x32, got {self.image_size}")
        if self.images_per_class < 0:
            raise ValueError("images_per_class must be >= 0")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "image_size": list(self.image_size),
            "images_per_class": self.images_per_class,
            "style": self.style,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        return cls(
            num_classes=d["num_classes"],
            image_size=tuple(d["image_size"]),
            images_per_class=d["images_per_class"],
            style=d["style"],
            seed=d["seed"],
        )


@dataclass(frozen=True)
class ScenarioSpec:
    n_base: int
    n_novel_per_step: int
    n_steps: int
    class_order: tuple[int, ...] = ()
    seed: int = 0

    def label_space(self, num_classes: int) -> LabelSpace:
        order = tuple(self.class_order) or tuple(range(1, num_classes + 1))
        if sorted(order) != list(range(1, num_classes + 1)):
            raise ValueError(f"class_order {order} is not a permutation of 1..{num_classes}")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        needed = self.n_base + self.n_novel_per_step * (self.n_steps - 1)
        if needed > num_classes:
            raise ValueError(f"scenario needs {needed} classes but the corpus has {num_classes}")
        steps = [order[: self.n_base]]
        for t in range(1, self.n_steps):
            start = self.n_base + (t - 1) * self.n_novel_per_step
            steps.append(order[start : start + self.n_novel_per_step])
        return LabelSpace(base_classes=tuple(steps[0]), step_classes=tuple(tuple(s) for s in steps))

    def to_dict(self) -> dict:
        return {
            "n_base": self.n_base,
            "n_novel_per_step": self.n_novel_per_step,
            "n_steps": self.n_steps,
            "class_order": list(self.class_order),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        return cls(
            n_base=d["n_base"],
            n_novel_per_step=d["n_novel_per_step"],
            n_steps=d["n_steps"],
            class_order=tuple(d.get("class_order", ())),
            seed=d.get("seed", 0),
        )


# (hue ranges, bg value, shape value, stripe frequency, stripe amplitude); pretrain is broad,
# downstream is narrow and sits in ranges pretrain never uses.
_PALETTES = {
    "pretrain": dict(
        hues=((0.16, 0.50), (0.70, 0.98)),
        sat=(0.35, 0.85),
        bg_val=(0.15, 0.40),
        shape_val=(0.70, 0.95),
        freq=(0.5, 2.5),
        amp=(0.01, 0.05),
    ),
    "downstream": dict(
        bg_hues=((0.03, 0.11),),
        shape_hues=((0.56, 0.64),),
        sat=(0.40, 0.65),
        bg_val=(0.70, 0.88),
        shape_val=(0.10, 0.28),
        freq=(3.0, 5.0),
        amp=(0.06, 0.10),
    ),
}


def _pick_hue(rng: np.random.Generator, ranges) -> float:
    lo, hi = ranges[rng.integers(len(ranges))]
    return float(rng.uniform(lo, hi))


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h, s, v), dtype=np.float64)


_LUMA = np.array([0.299, 0.587, 0.114])
MIN_LUMA_CONTRAST = 0.3


def _shape_color(rng, hues, sat, val, bg: np.ndarray) -> np.ndarray:
    """Shape colour with at least MIN_LUMA_CONTRAST against the background (best of 32 draws)."""
    best, best_gap = None, -1.0
    for _ in range(32):
        color = _hsv(_pick_hue(rng, hues), rng.uniform(*sat), rng.uniform(*val))
        gap = abs(float((color - bg) @ _LUMA))
        if gap >= MIN_LUMA_CONTRAST:
            return color
        if gap > best_gap:
            best, best_gap = color, gap
    return best


def _polygon(px: np.ndarray, py: np.ndarray, verts: np.ndarray) -> np.ndarray:
    inside = np.zeros(px.shape, dtype=bool)
    n = len(verts)
    for k in range(n):
        x1, y1 = verts[k]
        x2, y2 = verts[(k + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = (x2 - x1) * (py - y1) / (y2 - y1) + x1
        inside ^= crosses & (px < xint)
    return inside


def _regular(n: int, r: float, phase: float) -> np.ndarray:
    a = phase + 2 * np.pi * np.arange(n) / n
    return np.stack([r * np.cos(a), r * np.sin(a)], axis=1)


def shape_mask(name: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    """Rasterize one shape in local (rotated, centred) pixel coordinates."""
    rho = np.hypot(u, v)
    if name == "circle":
        return rho <= r
    if name == "square":
        return np.maximum(abs(u), abs(v)) <= 0.8 * r
    if name == "triangle":
        return _polygon(u, v, _regular(3, 1.15 * r, np.pi / 2))
    if name == "star":
        outer = _regular(5, 1.1 * r, np.pi / 2)
        inner = _regular(5, 0.45 * r, np.pi / 2 + np.pi / 5)
        verts = np.empty((10, 2))
        verts[0::2], verts[1::2] = outer, inner
        return _polygon(u, v, verts)
    if name == "cross":
        arm = 0.3 * r
        return ((abs(u) <= arm) & (abs(v) <= r)) | ((abs(v) <= arm) & (abs(u) <= r))
    if name == "ring":
        return (rho <= r) & (rho >= 0.55 * r)
    if name == "bar":
        return (abs(u) <= 1.1 * r) & (abs(v) <= 0.3 * r)
    if name == "diamond":
        return abs(u) / r + abs(v) / (0.7 * r) <= 1.0
    if name == "hexagon":
        return _polygon(u, v, _regular(6, r, 0.0))
    if name == "crescent":
        return (rho <= r) & (np.hypot(u - 0.45 * r, v) > 0.8 * r)
    raise ValueError(f"unknown shape {name!r}")


def _render(spec: CorpusSpec, index: int, primary: int) -> LabeledImage:
    h, w = spec.image_size
    style_code = STYLES.index(spec.style)
    rng = np.random.default_rng([spec.seed, style_code, index])
    pal = _PALETTES[spec.style]
    py, px = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5

    if spec.style == "pretrain":
        bg_hue, shape_hues = _pick_hue(rng, pal["hues"]), pal["hues"]
        bg_val, shape_val = pal["bg_val"], pal["shape_val"]
        if rng.random() < 0.5:  # either polarity
            bg_val, shape_val = shape_val, bg_val
    else:
        bg_hue, shape_hues = _pick_hue(rng, pal["bg_hues"]), pal["shape_hues"]
        bg_val, shape_val = pal["bg_val"], pal["shape_val"]
    bg = _hsv(bg_hue, rng.uniform(*pal["sat"]), rng.uniform(*bg_val))

    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(*pal["freq"])
    amp = rng.uniform(*pal["amp"])
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * (px * np.cos(theta) + py * np.sin(theta)) / w + phase)
    img = bg[None, None, :] + amp * wave[..., None]
    mask = np.zeros((h, w), dtype=np.uint8)

    n_extra = int(rng.integers(0, 3))
    classes = [int(c) for c in rng.integers(1, spec.num_classes + 1, size=n_extra)] + [primary]
    side = min(h, w)
    for c in classes:
        r = rng.uniform(0.14, 0.24) * side
        cx = rng.uniform(r, w - r)
        cy = rng.uniform(r, h - r)
        rot = rng.uniform(0, 2 * np.pi)
        dx, dy = px - cx, py - cy
        u = dx * np.cos(rot) + dy * np.sin(rot)
        v = -dx * np.sin(rot) + dy * np.cos(rot)
        m = shape_mask(SHAPES[c - 1], u, v, r)
        color = _shape_color(rng, shape_hues, pal["sat"], shape_val, bg)
        img[m] = color
        mask[m] = c

    img = img + rng.normal(0.0, 0.015, size=img.shape)
    # Quantize to 8 bits so PNG round-trips are lossless.
    pixels = (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)
    return LabeledImage(pixels=pixels, mask=mask, id=f"{spec.style}-{spec.seed}-{index:05d}")


def generate_corpus(spec: CorpusSpec) -> list[LabeledImage]:
    spec.validate()
    out = []
    for k in range(spec.num_classes * spec.images_per_class):
        out.append(_render(spec, k, primary=k % spec.num_classes + 1))
    return out


def relabel_mask(full_mask: np.ndarray, classes: Sequence[int]) -> np.ndarray:
    keep = np.isin(full_mask, np.asarray(list(classes), dtype=full_mask.dtype))
    return np.where(keep, full_mask, np.asarray(BACKGROUND, dtype=full_mask.dtype))


def build_scenario(
    corpus: Sequence[LabeledImage], label_space: LabelSpace
) -> list[list[LabeledImage]]:
    """Slice a corpus into overlapped incremental steps.

    Step t holds every image with at least one pixel of a step-t class, with its
    mask reduced to those classes; the same image may land in several steps.
    """
    steps = []
    for cs in label_space.step_classes:
        cs_arr = np.asarray(cs)
        data = []
        for item in corpus:
            if np.isin(item.mask, cs_arr).any():
                data.append(item.with_mask(relabel_mask(item.mask, cs)))
        steps.append(data)
    return steps


def split_validation(
    corpus: Sequence[LabeledImage], fraction: float, seed: int
) -> tuple[list[LabeledImage], list[LabeledImage]]:
    """Hold out `fraction` of the images of each dominant class."""
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for k, item in enumerate(corpus):
        by_class.setdefault(item.dominant_class, []).append(k)
    held: set[int] = set()
    for c in sorted(by_class):
        idx = by_class[c]
        n_val = int(round(fraction * len(idx)))
        held.update(rng.permutation(idx)[:n_val].tolist())
    train = [x for k, x in enumerate(corpus) if k not in held]
    val = [x for k, x in enumerate(corpus) if k in held]
    return train, val


def channel_mean_histogram(images: Sequence[np.ndarray], bins: int = 10) -> np.ndarray:
    """Per-channel histogram (normalized) of per-image channel means."""
    means = np.stack([np.asarray(im, dtype=np.float64).reshape(-1, im.shape[-1]).mean(0) for im in images])
    hists = [np.histogram(means[:, c], bins=bins, range=(0.0, 1.0))[0] for c in range(means.shape[1])]
    hists = np.asarray(hists, dtype=np.float64)
    return hists / len(images)


def histogram_distance(images_a: Sequence[np.ndarray], images_b: Sequence[np.ndarray], bins: int = 10) -> float:
    """L1 distance between per-channel mean histograms, averaged over channels (range [0, 2])."""
    ha = channel_mean_histogram(images_a, bins)
    hb = channel_mean_histogram(images_b, bins)
    return float(np.abs(ha - hb).sum(axis=1).mean())


# -- persistence --------------------------------------------------------------


def save_corpus(
    corpus: Sequence[LabeledImage],
    out_dir: str | Path,
    spec: CorpusSpec | None = None,
    label_space: LabelSpace | None = None,
) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    items = []
    for item in corpus:
        Image.fromarray(np.round(item.pixels * 255).astype(np.uint8)).save(out / "images" / f"{item.id}.png")
        Image.fromarray(item.mask.astype(np.uint8), mode="L").save(out / "masks" / f"{item.id}.png")
        items.append({"id": item.id, "image": f"images/{item.id}.png", "mask": f"masks/{item.id}.png"})
    num_classes = spec.num_classes if spec else max((max(x.classes, default=0) for x in corpus), default=0)
    manifest = {
        "format": "dreampast-corpus/1",
        "spec": spec.to_dict() if spec else None,
        "style": spec.style if spec else None,
        "seed": spec.seed if spec else None,
        "class_names": {str(c): class_name(c) for c in range(num_classes + 1)},
        "label_space": label_space.to_dict() if label_space else None,
        "items": items,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def load_manifest(corpus_dir: str | Path) -> dict:
    path = Path(corpus_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no corpus manifest at {path}")
    return json.loads(path.read_text())


def load_corpus(corpus_dir: str | Path) -> list[LabeledImage]:
    root = Path(corpus_dir)
    manifest = load_manifest(root)
    out = []
    for it in manifest["items"]:
        px = np.asarray(Image.open(root / it["image"]).convert("RGB"), dtype=np.float32) / 255.0
        mask = np.asarray(Image.open(root / it["mask"]), dtype=np.uint8)
        out.append(LabeledImage(pixels=px, mask=mask.copy(), id=it["id"]))
    return out


def save_scenario(scenario: ScenarioSpec, label_space: LabelSpace, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps({"scenario": scenario.to_dict(), "label_space": label_space.to_dict()}, indent=1, sort_keys=True)
    )


def load_scenario(path: str | Path) -> tuple[ScenarioSpec, LabelSpace]:
    d = json.loads(Path(path).read_text())
    return ScenarioSpec.from_dict(d["scenario"]), LabelSpace.from_dict(d["label_space"])
