"""Seeded synthetic tissue tiles with ground-truth instances and classes."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .losses import parse_kv_config
from .maps import EIGHT_CONNECTED, PathLike

N_NUCLEI_CLASSES = 5
MAX_ATTEMPTS = 500

# base RGB per nuclei class 1..5; all darker than the tissue background
_NUCLEUS_RGB = np.array(
    [
        [70, 40, 120],
        [50, 30, 95],
        [105, 70, 150],
        [120, 95, 125],
        [90, 60, 135],
    ],
    dtype=np.float64,
)
_TISSUE_RGB = np.array([236, 188, 208], dtype=np.float64)


class InfeasibleSceneError(RuntimeError):
    """The requested nuclei cannot be placed under the overlap limit."""


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    count: int = 5
    radius_min: float = 4.0
    radius_max: float = 8.0
    overlap: float = 0.0
    mixture: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2)
    seed: int = 0
    min_interior: int = 3

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0 or self.count < 0:
            raise ValueError("canvas must be non-empty and count non-negative")
        if not 2 <= self.radius_min <= self.radius_max:
            raise ValueError(f"need 2 <= radius_min <= radius_max, got {self.radius_min}, {self.radius_max}")
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError(f"overlap must lie in [0, 1), got {self.overlap}")
        if len(self.mixture) != N_NUCLEI_CLASSES or min(self.mixture) < 0 or abs(sum(self.mixture) - 1) > 1e-9:
            raise ValueError(f"mixture needs {N_NUCLEI_CLASSES} non-negative weights summing to 1")
        if 2 * self.radius_max + 1 > min(self.height, self.width):
            raise ValueError("canvas too small for radius_max")

    @classmethod
    def from_text(cls, text: str) -> SceneSpec:
        cfg = parse_kv_config(text)
        kwargs: dict = {}
        for key in ("height", "width", "count", "seed", "min_interior"):
            if key in cfg:
                kwargs[key] = int(cfg[key])
        for key in ("radius_min", "radius_max", "overlap"):
            if key in cfg:
                kwargs[key] = float(cfg[key])
        if "mixture" in cfg:
            kwargs["mixture"] = tuple(float(x) for x in cfg["mixture"].split(","))
        unknown = set(cfg) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path: PathLike) -> SceneSpec:
        return cls.from_text(Path(path).read_text())


def edges_from_labels(labels: np.ndarray) -> np.ndarray:
    """Instance pixels with an in-image 8-neighbor carrying a different label."""
    labels = np.asarray(labels)
    h, w = labels.shape
    edge = np.zeros((h, w), dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == dc == 0:
                continue
            ps = (slice(max(0, -dr), h - max(0, dr)), slice(max(0, -dc), w - max(0, dc)))
            qs = (slice(max(0, dr), h - max(0, -dr)), slice(max(0, dc), w - max(0, -dc)))
            edge[ps] |= labels[ps] != labels[qs]
    return edge & (labels != 0)


def _ellipse(shape, cy, cx, a, b, theta) -> np.ndarray:
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _instance_ok(labels: np.ndarray, idx: int, edges: np.ndarray, min_interior: int) -> bool:
    region = labels == idx
    if not region.any():
        return False
    if ndimage.label(region, structure=EIGHT_CONNECTED)[1] != 1:
        return False
    interior = region & ~edges
    n_parts = ndimage.label(interior, structure=EIGHT_CONNECTED)[1]
    return n_parts == 1 and int(interior.sum()) >= min_interior


def place_nuclei(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Instance LabelMap and per-instance class array (index 0 unused)."""
    shape = (spec.height, spec.width)
    labels = np.zeros(shape, dtype=np.int32)
    classes = [0]
    margin = spec.radius_max
    for idx in range(1, spec.count + 1):
        for _ in range(MAX_ATTEMPTS):
            a, b = rng.uniform(spec.radius_min, spec.radius_max, size=2)
            theta = rng.uniform(0.0, np.pi)
            cy = rng.uniform(margin, spec.height - 1 - margin)
            cx = rng.uniform(margin, spec.width - 1 - margin)
            mask = _ellipse(shape, cy, cx, a, b, theta)
            covered = labels[mask]
            hit = np.bincount(covered, minlength=idx)
            if hit[1:].sum() > spec.overlap * mask.sum():
                continue
            old_areas = np.bincount(labels.ravel(), minlength=idx)
            if np.any(hit[1:] > spec.overlap * old_areas[1:]):
                continue
            trial = labels.copy()
            trial[mask] = idx
            edges = edges_from_labels(trial)
            touched = [j for j in range(1, idx) if hit[j]] + [idx]
            if all(_instance_ok(trial, j, edges, spec.min_interior) for j in touched):
                labels = trial
                break
        else:
            raise InfeasibleSceneError(
                f"could not place nucleus {idx} of {spec.count} within {MAX_ATTEMPTS} attempts"
            )
        classes.append(int(rng.choice(np.arange(1, N_NUCLEI_CLASSES + 1), p=spec.mixture)))
    return labels, np.asarray(classes, dtype=np.uint16)


def render(labels: np.ndarray, instance_class: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Stained-tissue-like RGB: textured pink tissue, darker purple nuclei."""
    h, w = labels.shape
    texture = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=3.0) * 40.0
    image = _TISSUE_RGB[None, None, :] + texture[..., None]
    cls = instance_class[labels]
    fg = labels > 0
    nuclei = _NUCLEUS_RGB[np.maximum(cls, 1) - 1]
    chromatin = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=1.0) * 25.0
    image[fg] = nuclei[fg] + chromatin[fg][:, None]
    image += rng.normal(0.0, 4.0, size=image.shape)
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(rgb, instance labels, class map)``; identical for identical specs."""
    rng = np.random.default_rng(spec.seed)
    labels, instance_class = place_nuclei(spec, rng)
    image = render(labels, instance_class, rng)
    class_map = instance_class[labels].astype(np.uint16)
    return image, labels, class_map


def oracle_maps(labels: np.ndarray, class_map: np.ndarray, n_classes: int = 6):
    """Ideal network outputs for a scene: binary semantic and edge maps, one-hot classes."""
    semantic = (labels > 0).astype(np.float32)
    edges = edges_from_labels(labels).astype(np.float32)
    probs = np.eye(n_classes, dtype=np.float32)[class_map]
    return semantic, edges, probs
