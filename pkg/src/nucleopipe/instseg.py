"""Marker-controlled watershed turning semantic + edge maps into nuclei instances.

Pipeline for one tile:

1. keep edge proposals with probability >= ``edge_threshold``;
2. binarize the semantic map at ``semantic_threshold`` and clear edge pixels;
   the surviving 8-connected components (area >= ``min_instance_area``) are
   the sure-foreground markers;
3. flood the distance-to-foreground field from those markers; pixels where two
   basins meet are ridgelines;
4. background markers are sub-threshold pixels that are neither on a
   ridgeline nor 8-adjacent to a foreground marker;
5. flood ``1 - semantic`` from all markers, confined to the binarized
   foreground; each foreground marker becomes one instance.

All flooding uses 8-connectivity and a ``(surface value, row-major index)``
priority, so results are bit-stable.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .maps import EIGHT_CONNECTED, relabel_sequential

_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


@dataclass(frozen=True)
class WatershedConfig:
    edge_threshold: float = 0.10
    min_instance_area: int = 3
    semantic_threshold: float = 0.5
    controlled: bool = True

    def __post_init__(self):
        for name in ("edge_threshold", "semantic_threshold"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.min_instance_area < 1:
            raise ValueError(f"min_instance_area must be >= 1, got {self.min_instance_area}")


@dataclass(frozen=True)
class MarkerField:
    """Sure-foreground marker ids (0 = none) and the background-marker mask."""

    foreground: np.ndarray
    background: np.ndarray

    @property
    def count(self) -> int:
        return int(self.foreground.max(initial=0))

    def unknown(self) -> np.ndarray:
        return (self.foreground == 0) & ~self.background

    def as_seeds(self) -> np.ndarray:
        """Seed array for :func:`flood`: ids 1..K, background as K+1."""
        seeds = self.foreground.astype(np.int64)
        seeds[self.background] = self.count + 1
        return seeds


def label_components(mask: np.ndarray) -> np.ndarray:
    """8-connected components numbered 1..K in row-major order of first pixel."""
    labels, _ = ndimage.label(mask, structure=EIGHT_CONNECTED)
    return labels.astype(np.int32)


def remove_small(labels: np.ndarray, min_area: int) -> np.ndarray:
    """Drop ids with fewer than ``min_area`` pixels and renumber 1..K."""
    areas = np.bincount(labels.ravel())
    small = areas < min_area
    small[0] = False
    out = labels.copy()
    out[small[labels]] = 0
    return relabel_sequential(out).astype(np.int32)


def dilate8(mask: np.ndarray) -> np.ndarray:
    return ndimage.binary_dilation(mask, structure=EIGHT_CONNECTED)


def threshold_edges(edges: np.ndarray, cfg: WatershedConfig) -> np.ndarray:
    """Edge proposals kept for marker extraction (probability >= threshold)."""
    return np.asarray(edges) >= cfg.edge_threshold


def foreground_markers(semantic: np.ndarray, edge_mask: np.ndarray, cfg: WatershedConfig) -> np.ndarray:
    if semantic.shape != edge_mask.shape:
        raise ValueError(f"semantic {semantic.shape} and edge mask {edge_mask.shape} differ in shape")
    sure = (np.asarray(semantic) >= cfg.semantic_threshold) & ~edge_mask
    return remove_small(label_components(sure), cfg.min_instance_area)


def _edt_1d(f: list[float], n: int) -> list[float]:
    # lower envelope of parabolas y = f[q] + (x - q)^2, skipping infinite sites
    inf = float("inf")
    v = [0] * n
    z = [0.0] * (n + 1)
    k = -1
    for q in range(n):
        if f[q] == inf:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -inf
            z[1] = inf
            continue
        while True:
            p = v[k]
            s = ((f[q] + q * q) - (f[p] + p * p)) / (2 * q - 2 * p)
            if s <= z[k]:
                k -= 1
                if k < 0:
                    break
            else:
                break
        k += 1
        v[k] = q
        z[k] = s if k > 0 else -inf
        z[k + 1] = inf
    if k < 0:
        return [inf] * n
    out = [0.0] * n
    j = 0
    for x in range(n):
        while z[j + 1] < x:
            j += 1
        p = v[j]
        out[x] = (x - p) * (x - p) + f[p]
    return out


def distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from each true pixel to the nearest false pixel.

    Separable two-pass algorithm: per-column distances by forward/backward
    scans, then per-row lower envelopes of parabolas. False pixels are 0;
    a mask without any false pixel is infinitely far from one everywhere.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    inf = np.inf
    g = np.full((h, w), inf)
    run = np.full(w, inf)
    for i in range(h):
        run = np.where(mask[i], run + 1, 0.0)
        g[i] = run
    run = np.full(w, inf)
    for i in range(h - 1, -1, -1):
        run = np.where(mask[i], run + 1, 0.0)
        g[i] = np.minimum(g[i], run)
    sq = g * g
    out = np.empty((h, w))
    for i in range(h):
        out[i] = _edt_1d(sq[i].tolist(), w)
    return np.sqrt(out)


def flood(surface: np.ndarray, seeds: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Priority flood of ``seeds`` (ids > 0) over ``surface``.

    Pixels are processed in ``(surface value, row-major index)`` order; an
    unlabeled pixel takes the label of the first processed 8-neighbor. With
    ``mask`` given, only masked pixels can be entered (seeds may lie outside).
    Unreached pixels stay 0.
    """
    h, w = surface.shape
    pw = w + 2
    # one-pixel frame of "already queued" pixels removes all bounds checks
    labels = np.zeros((h + 2, pw), dtype=np.int64)
    labels[1:-1, 1:-1] = seeds
    closed = np.ones((h + 2, pw), dtype=bool)
    inner = np.ones((h, w), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    closed[1:-1, 1:-1] = ~inner | (seeds != 0)
    padded_surface = np.zeros((h + 2, pw))
    padded_surface[1:-1, 1:-1] = surface

    lab = labels.ravel().tolist()
    closed_flat = closed.ravel().tolist()
    surf = padded_surface.ravel().tolist()
    steps = [dr * pw + dc for dr, dc in _OFFSETS]

    heap = [(surf[i], i) for i in np.flatnonzero(labels.ravel()).tolist()]
    heapq.heapify(heap)
    pop, push = heapq.heappop, heapq.heappush
    while heap:
        _, i = pop(heap)
        current = lab[i]
        for step in steps:
            j = i + step
            if not closed_flat[j]:
                closed_flat[j] = True
                lab[j] = current
                push(heap, (surf[j], j))
    return np.asarray(lab, dtype=np.int64).reshape(h + 2, pw)[1:-1, 1:-1]


def flood_with_lines(surface: np.ndarray, seeds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Priority flood that keeps watershed lines between basins.

    A pixel is labeled when popped: if its already-labeled 8-neighbors carry
    exactly one id it joins that basin, if they carry several it becomes a
    line pixel. Line pixels do not propagate. Returns ``(basins, lines)``.
    """
    h, w = surface.shape
    pw = w + 2
    labels = np.zeros((h + 2, pw), dtype=np.int64)
    labels[1:-1, 1:-1] = seeds
    queued = np.ones((h + 2, pw), dtype=bool)
    queued[1:-1, 1:-1] = seeds != 0
    padded_surface = np.zeros((h + 2, pw))
    padded_surface[1:-1, 1:-1] = surface

    lab = labels.ravel().tolist()
    queued_flat = queued.ravel().tolist()
    surf = padded_surface.ravel().tolist()
    steps = [dr * pw + dc for dr, dc in _OFFSETS]
    line = -1

    heap = [(surf[i], i) for i in np.flatnonzero(labels.ravel()).tolist()]
    heapq.heapify(heap)
    pop, push = heapq.heappop, heapq.heappush
    while heap:
        _, i = pop(heap)
        if lab[i] == 0:
            seen = {lab[i + step] for step in steps} - {0, line}
            lab[i] = seen.pop() if len(seen) == 1 else line
        if lab[i] == line:
            continue
        for step in steps:
            j = i + step
            if not queued_flat[j]:
                queued_flat[j] = True
                push(heap, (surf[j], j))
    out = np.asarray(lab, dtype=np.int64).reshape(h + 2, pw)[1:-1, 1:-1]
    lines = out == line
    out[lines] = 0
    return out, lines


def ridgelines(components: np.ndarray) -> np.ndarray:
    """Watershed lines of the distance-to-component field seeded by the components."""
    components = np.asarray(components)
    if components.max(initial=0) == 0:
        return np.zeros(components.shape, dtype=bool)
    dist = distance_transform(components == 0)
    return flood_with_lines(dist, components)[1]


def build_markers(semantic: np.ndarray, edges: np.ndarray, cfg: WatershedConfig) -> MarkerField:
    fg = foreground_markers(semantic, threshold_edges(edges, cfg), cfg)
    ridge = ridgelines(fg)
    bg = (np.asarray(semantic) < cfg.semantic_threshold) & ~ridge & ~dilate8(fg > 0)
    return MarkerField(fg, bg)


def regional_maxima(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Boolean mask of 8-connected plateaus inside ``mask`` with no higher neighbor."""
    h, w = values.shape
    v = np.where(mask, values, -np.inf)
    padded = np.pad(v, 1, constant_values=-np.inf)
    higher_nbr = np.zeros((h, w), dtype=bool)
    for dr, dc in _OFFSETS:
        higher_nbr |= padded[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w] > v
    cand = mask & ~higher_nbr
    # a plateau touching an equal-valued non-candidate is not a maximum
    while True:
        pc = np.pad(cand, 1)
        pm = np.pad(mask, 1)
        leak = np.zeros((h, w), dtype=bool)
        for dr, dc in _OFFSETS:
            nbr_v = padded[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
            nbr_c = pc[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
            nbr_m = pm[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
            leak |= cand & nbr_m & ~nbr_c & (nbr_v == v)
        if not leak.any():
            return cand
        cand &= ~leak


def _plain_watershed(semantic: np.ndarray, cfg: WatershedConfig) -> np.ndarray:
    fg = semantic >= cfg.semantic_threshold
    if not fg.any():
        return np.zeros(semantic.shape, dtype=np.int32)
    dist = distance_transform(fg)
    seeds = label_components(regional_maxima(dist, fg))
    labels = flood(-dist, seeds, fg).astype(np.int32)
    return remove_small(labels, cfg.min_instance_area)


def segment_instances(semantic: np.ndarray, edges: np.ndarray, cfg: WatershedConfig | None = None) -> np.ndarray:
    """Instance LabelMap (ids 1..K, 0 = background) from semantic and edge maps."""
    cfg = cfg or WatershedConfig()
    semantic = np.asarray(semantic, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.float64)
    if semantic.shape != edges.shape or semantic.ndim != 2:
        raise ValueError(f"semantic {semantic.shape} and edge {edges.shape} maps must be equal 2-D shapes")
    if not cfg.controlled:
        return _plain_watershed(semantic, cfg)

    markers = build_markers(semantic, edges, cfg)
    k = markers.count
    if k == 0:
        return np.zeros(semantic.shape, dtype=np.int32)
    basins = flood(1.0 - semantic, markers.as_seeds(), semantic >= cfg.semantic_threshold)
    basins[basins > k] = 0
    return basins.astype(np.int32)
