"""Deterministic synthetic concept dataset.

Each concept is a shape family with a fixed two-color palette and
texture, rendered a handful of times with varied pose and background.
Palettes step around the hue wheel by the golden angle, so any two
concepts are visually separable even when they share a class noun.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .encoders import IMG_SIZE
from .rng import Rng
from .vocab import CLASS_NOUNS

MAX_IMAGES = 5
SHAPE_FAMILIES = ("circle", "square", "triangle", "ring", "cross", "diamond")
TEXTURES = ("plain", "stripes", "dots")
DATASET_VERSION = 1
GOLDEN_ANGLE = 0.381966011250105

# Anchor RGB values for the vocabulary's color words, used to caption
# renders with the palette they actually show.
COLOR_ANCHORS = {
    "red": (1.0, 0.1, 0.1),
    "orange": (1.0, 0.55, 0.05),
    "amber": (1.0, 0.75, 0.1),
    "yellow": (0.95, 0.95, 0.1),
    "green": (0.1, 0.85, 0.15),
    "teal": (0.05, 0.7, 0.65),
    "cyan": (0.1, 0.9, 0.95),
    "blue": (0.1, 0.25, 0.95),
    "violet": (0.55, 0.15, 0.95),
    "magenta": (0.9, 0.1, 0.9),
    "pink": (1.0, 0.45, 0.7),
    "crimson": (0.85, 0.05, 0.25),
}


def nearest_color_word(rgb) -> str:
    """Vocabulary color word closest to an RGB triple."""
    rgb = np.asarray(rgb, dtype=np.float64)
    best, best_d = None, np.inf
    for word, anchor in COLOR_ANCHORS.items():
        d = float(((rgb - np.asarray(anchor)) ** 2).sum())
        if d < best_d:
            best, best_d = word, d
    return best


@dataclass
class ShapeParams:
    shape: str
    primary: tuple[float, float, float]
    secondary: tuple[float, float, float]
    texture: str
    texture_seed: int

    def to_json(self) -> dict:
        return {
            "shape": self.shape,
            "primary": list(self.primary),
            "secondary": list(self.secondary),
            "texture": self.texture,
            "texture_seed": self.texture_seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ShapeParams":
        return cls(shape=d["shape"], primary=tuple(d["primary"]),
                   secondary=tuple(d["secondary"]), texture=d["texture"],
                   texture_seed=int(d["texture_seed"]))


@dataclass
class SyntheticConcept:
    concept_id: str
    class_noun: str
    params: ShapeParams
    images: np.ndarray = field(repr=False)  # (M, 32, 32, 3) float32 in [0, 1]

    @property
    def num_images(self) -> int:
        return self.images.shape[0]


def _palette(index: int) -> tuple[tuple, tuple]:
    hue = (0.03 + index * GOLDEN_ANGLE) % 1.0
    primary = colorsys.hsv_to_rgb(hue, 0.9, 0.95)
    secondary = colorsys.hsv_to_rgb((hue + 0.5) % 1.0, 0.85, 0.85)
    return tuple(primary), tuple(secondary)


def _shape_mask(shape: str, size: int, cx: float, cy: float, radius: float,
                angle: float) -> np.ndarray:
    """Soft occupancy mask in [0, 1] for one shape instance."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xs - cx, ys - cy
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    if shape == "circle":
        sd = np.sqrt(dx**2 + dy**2) - radius
    elif shape == "square":
        sd = np.maximum(np.abs(u), np.abs(v)) - radius
    elif shape == "diamond":
        sd = (np.abs(u) + np.abs(v)) / np.sqrt(2.0) - radius
    elif shape == "ring":
        sd = np.abs(np.sqrt(dx**2 + dy**2) - radius) - 0.45 * radius
    elif shape == "cross":
        bar = 0.42 * radius
        in_u = np.maximum(np.abs(u) - radius, np.abs(v) - bar)
        in_v = np.maximum(np.abs(v) - radius, np.abs(u) - bar)
        sd = np.minimum(in_u, in_v)
    elif shape == "triangle":
        # Equilateral triangle pointing along +v.
        k = np.sqrt(3.0)
        sd = np.maximum(np.abs(u) * k / 2.0 + v / 2.0, -v) - radius / 2.0
    else:
        raise ValueError(f"unknown shape family {shape!r}")
    return 1.0 / (1.0 + np.exp(sd / 0.7))


def _texture_mask(texture: str, size: int, seed: int) -> np.ndarray:
    trng = Rng(seed).child("texture")
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    if texture == "plain":
        return np.zeros((size, size))
    if texture == "stripes":
        angle = trng.uniform(0.0, np.pi)
        freq = trng.uniform(0.5, 0.9)
        wave = np.sin((np.cos(angle) * xs + np.sin(angle) * ys) * freq)
        return (wave > 0).astype(np.float64)
    if texture == "dots":
        period = trng.integer(4, 7)
        return (((xs % period) < 2) & ((ys % period) < 2)).astype(np.float64)
    raise ValueError(f"unknown texture {texture!r}")


def render_concept_image(params: ShapeParams, pose_rng: Rng,
                         size: int = IMG_SIZE) -> np.ndarray:
    """One 32x32x3 float image of the concept with a random pose/background."""
    bg_level = pose_rng.uniform(0.2, 0.5)
    bg_tint = pose_rng.normal((3,), np.float64) * 0.08
    img = np.clip(bg_level + bg_tint, 0.0, 1.0)[None, None, :] * np.ones((size, size, 3))

    cx = size / 2.0 + pose_rng.uniform(-0.12, 0.12) * size
    cy = size / 2.0 + pose_rng.uniform(-0.12, 0.12) * size
    radius = pose_rng.uniform(0.30, 0.44) * size
    angle = pose_rng.uniform(0.0, 2.0 * np.pi)

    mask = _shape_mask(params.shape, size, cx, cy, radius, angle)
    tex = _texture_mask(params.texture, size, params.texture_seed)
    fill = (np.asarray(params.primary)[None, None, :] * (1.0 - tex[:, :, None])
            + np.asarray(params.secondary)[None, None, :] * tex[:, :, None])
    img = img * (1.0 - mask[:, :, None]) + fill * mask[:, :, None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_dataset(seed: int, num_concepts: int,
                     images_per_concept: int) -> list[SyntheticConcept]:
    """Deterministic concept set; class nouns cycle through a small pool,
    so any six concepts are guaranteed to share a noun somewhere."""
    if num_concepts < 1:
        raise ValueError("num_concepts must be >= 1")
    if not 1 <= images_per_concept <= MAX_IMAGES:
        raise ValueError(f"images_per_concept must be in 1..{MAX_IMAGES}")
    root = Rng(seed).child("dataset")
    concepts = []
    for i in range(num_concepts):
        crng = root.child(f"concept{i}")
        primary, secondary = _palette(i)
        params = ShapeParams(
            shape=crng.choice(SHAPE_FAMILIES),
            primary=primary,
            secondary=secondary,
            texture=crng.choice(TEXTURES),
            texture_seed=crng.integer(0, 2**31 - 1),
        )
        images = np.stack([
            render_concept_image(params, crng.child(f"pose{j}"))
            for j in range(images_per_concept)
        ])
        concepts.append(SyntheticConcept(
            concept_id=f"concept{i:03d}",
            class_noun=CLASS_NOUNS[i % len(CLASS_NOUNS)],
            params=params,
            images=images,
        ))
    return concepts


# -- disk layout: <root>/concepts/<id>/{meta.json, img_<i>.png} --------------


def save_image_png(img: np.ndarray, path) -> None:
    arr = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_dataset(concepts: list[SyntheticConcept], root, seed: int | None = None,
                 vocab=None) -> None:
    root = Path(root)
    (root / "concepts").mkdir(parents=True, exist_ok=True)
    meta = {"version": DATASET_VERSION, "seed": seed,
            "concepts": [c.concept_id for c in concepts]}
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    if vocab is not None:
        vocab.save(root / "vocabulary.mbvc")
    for c in concepts:
        cdir = root / "concepts" / c.concept_id
        cdir.mkdir(parents=True, exist_ok=True)
        cmeta = {
            "version": DATASET_VERSION,
            "concept_id": c.concept_id,
            "class_noun": c.class_noun,
            "generator_params": c.params.to_json(),
            "num_images": c.num_images,
        }
        (cdir / "meta.json").write_text(json.dumps(cmeta, indent=2, sort_keys=True))
        for j in range(c.num_images):
            save_image_png(c.images[j], cdir / f"img_{j}.png")


def load_concept(concept_dir) -> SyntheticConcept:
    cdir = Path(concept_dir)
    meta = json.loads((cdir / "meta.json").read_text())
    images = np.stack([
        load_image_png(cdir / f"img_{j}.png") for j in range(meta["num_images"])
    ])
    return SyntheticConcept(
        concept_id=meta["concept_id"],
        class_noun=meta["class_noun"],
        params=ShapeParams.from_json(meta["generator_params"]),
        images=images,
    )


def load_dataset(root) -> list[SyntheticConcept]:
    root = Path(root)
    meta = json.loads((root / "meta.json").read_text())
    return [load_concept(root / "concepts" / cid) for cid in meta["concepts"]]
