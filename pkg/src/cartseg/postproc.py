"""Connected components of binary voxel masks and largest-component filtering."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Volume

CONNECTIVITIES = (6, 18, 26)


def neighbour_offsets(connectivity: int) -> list[tuple[int, int, int]]:
    """Offsets to neighbours that come earlier in x-fastest scan order."""
    if connectivity not in CONNECTIVITIES:
        raise ValueError(f"connectivity must be one of {CONNECTIVITIES}, got {connectivity}")
    max_l1 = {6: 1, 18: 2, 26: 3}[connectivity]
    out = []
    for o in itertools.product((-1, 0, 1), repeat=3):
        l1 = sum(map(abs, o))
        if l1 == 0 or l1 > max_l1:
            continue
        # scan index is x + dx*(y + dy*z): compare (z, y, x) lexicographically
        if (o[2], o[1], o[0]) < (0, 0, 0):
            out.append(o)
    return out


@dataclass
class ComponentSet:
    labels: np.ndarray  # int32, 0 = background, 1..K in first-encounter order
    sizes: list[tuple[int, int]]  # (label, voxel count), largest first, ties by label
    connectivity: int = 26

    @property
    def count(self) -> int:
        return len(self.sizes)


def _as_mask(mask) -> np.ndarray:
    arr = mask.voxels if isinstance(mask, Volume) else np.asarray(mask)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3-D mask, got shape {arr.shape}")
    if arr.dtype != bool and not np.isin(arr, (0, 1)).all():
        raise ValueError("label_components needs a binary mask (values 0/1)")
    return arr.astype(bool, copy=False)


def label_components(mask, connectivity: int = 26) -> ComponentSet:
    """Union-find over foreground voxels, one pass over the backward neighbours."""
    fg = _as_mask(mask)
    offsets = neighbour_offsets(connectivity)
    dims = fg.shape
    # compact ids follow scan order (x fastest)
    flat_fg = fg.ravel(order="F")
    n = int(flat_fg.sum())
    idf = np.full(fg.size, -1, dtype=np.int64)
    idf[flat_fg] = np.arange(n)
    ids = idf.reshape(dims, order="F")

    parent = list(range(n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for o in offsets:
        # pair voxel v with v + o where both are inside the grid
        src = tuple(slice(max(-d, 0), s - max(d, 0)) for d, s in zip(o, dims))
        dst = tuple(slice(max(d, 0), s - max(-d, 0)) for d, s in zip(o, dims))
        both = fg[src] & fg[dst]
        if not both.any():
            continue
        for a, b in zip(ids[src][both].tolist(), ids[dst][both].tolist()):
            ra, rb = find(a), find(b)
            if ra != rb:
                # keep the earliest voxel as root so roots mark first encounter
                if ra < rb:
                    parent[rb] = ra
                else:
                    parent[ra] = rb

    roots = np.fromiter((find(i) for i in range(n)), dtype=np.int64, count=n)
    uniq, inverse, counts = np.unique(roots, return_inverse=True, return_counts=True)
    # uniq is sorted by root id, i.e. by first encounter in scan order
    lab_flat = np.zeros(fg.size, dtype=np.int32)
    lab_flat[flat_fg] = inverse.astype(np.int32) + 1
    labels = lab_flat.reshape(dims, order="F")
    sizes = sorted(((i + 1, int(c)) for i, c in enumerate(counts)), key=lambda t: (-t[1], t[0]))
    return ComponentSet(labels, sizes, connectivity)


def keep_largest(components: ComponentSet, k: int = 2, keep_labels: Sequence[int] | None = None) -> np.ndarray:
    """Mask (uint8) of the ``k`` largest components, or of ``keep_labels`` when given."""
    if keep_labels is not None:
        available = {lab for lab, _ in components.sizes}
        missing = [lab for lab in keep_labels if lab not in available]
        if missing:
            listing = ", ".join(f"{lab}:{n}" for lab, n in components.sizes)
            raise KeyError(f"labels {missing} not present; available label:size = [{listing}]")
        chosen = list(keep_labels)
    else:
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        chosen = [lab for lab, _ in components.sizes[:k]]
    return np.isin(components.labels, chosen).astype(np.uint8)


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    arr = prob.voxels if isinstance(prob, Volume) else np.asarray(prob)
    return (arr >= threshold).astype(np.uint8)


def postprocess(
    mask,
    k: int = 2,
    connectivity: int = 26,
    keep_labels: Sequence[int] | None = None,
) -> np.ndarray:
    return keep_largest(label_components(mask, connectivity), k, keep_labels)
