"""Deterministic synthetic scenes and few-shot concept sets.

Images are generated directly at latent resolution with four channels:
RGB plus a texture channel.  Base-training objects are flat colored shapes
with an empty texture channel; concept objects carry a color outside the
base palette and a texture pattern, which makes them recognizable as a new
concept.  All placement arithmetic is integer and all randomness comes from
:class:`~conceptsplit.rng.SplitMix64`, so scenes are identical across
platforms.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import SplitMix64, derive
from .text import COLORS, SHAPES

PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
    "white": (1.0, 1.0, 1.0),
}
assert tuple(PALETTE) == COLORS

CHANNELS = 4
MAX_PLACEMENT_TRIES = 100


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: int
    center: tuple[int, int]
    size: int  # half-extent in pixels

    def bbox(self) -> tuple[int, int, int, int]:
        cy, cx = self.center
        return cy - self.size, cx - self.size, cy + self.size, cx + self.size


@dataclass
class Scene:
    canvas: np.ndarray
    caption: list[str]
    objects: list[SceneObject] = field(default_factory=list)

    @property
    def text(self) -> str:
        return " ".join(self.caption)


def shape_mask(shape: str, center, size: int, height: int, width: int) -> np.ndarray:
    """Boolean pixel mask of a shape; always inside its bounding box."""
    cy, cx = center
    yy, xx = np.mgrid[0:height, 0:width]
    dy, dx = yy - cy, xx - cx
    inside = (np.abs(dy) <= size) & (np.abs(dx) <= size)
    if shape == "square":
        return inside
    if shape == "circle":
        return inside & (dy * dy + dx * dx <= size * size + size)
    if shape == "triangle":
        # apex at the top row of the box, base along the bottom row
        return inside & (2 * np.abs(dx) <= dy + size)
    raise ValueError(f"unknown shape {shape!r}")


def _boxes_clear(a, b, gap: int = 1) -> bool:
    ay0, ax0, ay1, ax1 = a
    by0, bx0, by1, bx1 = b
    return ay1 + gap < by0 or by1 + gap < ay0 or ax1 + gap < bx0 or bx1 + gap < ax0


def _place(rng: SplitMix64, size: int, height: int, width: int, taken,
           tries: int = 20) -> tuple[int, int] | None:
    if 2 * size + 1 > min(height, width):
        return None
    for _ in range(tries):
        cy = size + rng.below(height - 2 * size)
        cx = size + rng.below(width - 2 * size)
        box = (cy - size, cx - size, cy + size, cx + size)
        if all(_boxes_clear(box, t) for t in taken):
            return cy, cx
    return None


def gen_scene(seed: int, count: int, height: int = 16, width: int = 16,
              sizes=(2, 3)) -> Scene:
    """Scene with ``count`` non-overlapping flat-colored shapes on black.

    A layout that cannot be completed is redrawn from scratch (the stream
    continues), up to ``MAX_PLACEMENT_TRIES`` layouts.
    """
    if count not in (1, 2, 3):
        raise ValueError(f"object count must be 1, 2 or 3, got {count}")
    rng = SplitMix64(seed)
    for _ in range(MAX_PLACEMENT_TRIES):
        objects, taken = [], []
        for _k in range(count):
            shape = rng.choice(SHAPES)
            color = rng.below(len(COLORS))
            size = rng.choice(sizes)
            center = _place(rng, size, height, width, taken)
            if center is None:
                break
            obj = SceneObject(shape, color, center, size)
            taken.append(obj.bbox())
            objects.append(obj)
        else:
            break
    else:
        raise PlacementError(f"could not place {count} objects on a {height}x{width} canvas "
                             f"after {MAX_PLACEMENT_TRIES} layouts")
    canvas = np.zeros((height, width, CHANNELS))
    caption: list[str] = []
    for k, obj in enumerate(objects):
        if k:
            caption.append("and")
        m = shape_mask(obj.shape, obj.center, obj.size, height, width)
        canvas[m, :3] = PALETTE[COLORS[obj.color]]
        caption += ["a", COLORS[obj.color], obj.shape]
    return Scene(canvas, caption, objects)


def gen_base_dataset(seed: int, count: int, counts=(1, 2), height: int = 16,
                     width: int = 16) -> list[Scene]:
    scenes = []
    for i in range(count):
        s = derive(seed, i)
        scenes.append(gen_scene(s, counts[i % len(counts)], height, width))
    return scenes


@dataclass(frozen=True)
class ConceptSpec:
    """A personalized concept: a textured, off-palette object bound to one word."""

    name: str
    word: str
    shape: str
    color: tuple[float, float, float]
    pattern: str = "checker"  # "checker" | "stripes"
    seed: int = 0

    def texture(self, height: int, width: int) -> np.ndarray:
        yy, xx = np.mgrid[0:height, 0:width]
        if self.pattern == "checker":
            return ((yy + xx) % 2).astype(float)
        if self.pattern == "stripes":
            return (yy % 2).astype(float)
        raise ValueError(f"unknown pattern {self.pattern!r}")


DEFAULT_CONCEPTS = {
    "orange_checker_square": ConceptSpec("orange_checker_square", "square", "square",
                                         (1.0, 0.5, 0.0), "checker", seed=101),
    "purple_striped_circle": ConceptSpec("purple_striped_circle", "circle", "circle",
                                         (0.5, 0.0, 1.0), "stripes", seed=202),
}

BACKGROUND_LEVELS = (0.0, 0.1, 0.2, 0.3)


def gen_concept_set(spec: ConceptSpec, count: int, height: int = 16, width: int = 16,
                    seed: int | None = None) -> list[np.ndarray]:
    """``count`` single-object images of the concept on varied gray backgrounds."""
    base = spec.seed if seed is None else seed
    images = []
    tex = spec.texture(height, width)
    sizes = tuple(s for s in (3, 4) if 2 * s + 1 <= min(height, width))
    if count and not sizes:
        raise PlacementError(f"a {height}x{width} canvas is too small for a concept object")
    for i in range(count):
        rng = SplitMix64(derive(base, i))
        level = rng.choice(BACKGROUND_LEVELS)
        size = rng.choice(sizes)
        center = _place(rng, size, height, width, [])
        img = np.zeros((height, width, CHANNELS))
        img[..., :3] = level
        m = shape_mask(spec.shape, center, size, height, width)
        img[m, :3] = spec.color
        img[m, 3] = tex[m]
        images.append(img)
    return images


def object_signature(images, masks) -> np.ndarray:
    """Mean per-channel value over the object pixels of a set of images."""
    vals = [img[m] for img, m in zip(images, masks)]
    return np.concatenate(vals).mean(axis=0)


def write_manifest(scenes: list[Scene], seeds: list[int], directory, container_name="images.csc"):
    """Store scene arrays in one container plus a JSON manifest of ``{seed, caption, file}``."""
    from .container import save_container

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays, entries = {}, []
    for seed, sc in zip(seeds, scenes):
        key = f"scene_{seed}"
        arrays[key] = sc.canvas
        entries.append({"seed": seed, "caption": sc.text, "file": f"{container_name}:{key}"})
    save_container(directory / container_name, {"kind": "dataset", "count": len(entries)}, arrays)
    (directory / "manifest.json").write_text(json.dumps(entries, indent=1))
    return directory / "manifest.json"


def read_manifest(path) -> tuple[list[np.ndarray], list[str]]:
    from .container import load_container

    path = Path(path)
    entries = json.loads(path.read_text())
    cache: dict[str, dict] = {}
    images, captions = [], []
    for e in entries:
        fname, key = e["file"].split(":", 1)
        if fname not in cache:
            cache[fname] = load_container(path.parent / fname)[1]
        images.append(cache[fname][key])
        captions.append(e["caption"])
    return images, captions
