"""Panorama feature stores and heading-centered slice extraction.

A panorama is summarized by eight 60-degree slices at 45-degree spacing;
the slice whose center is nearest the agent's heading plus its two left
and two right neighbors feed the agent.  Three feature variants exist:

* ``prefinal``  - per node an (8, D) array of slice vectors,
* ``semseg``    - per node an (8, 25) array of per-class area fractions,
* ``fourth``    - per node a (W, C, 100) azimuth-indexed map; extraction
  concatenates the selected slices' columns, averages the C channels and
  cuts a 100-column window around the heading, giving a 100 x 100 matrix.

``none`` is the image-free baseline and yields an empty slice set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .errors import FeatureStoreError

VARIANTS = ("prefinal", "fourth", "semseg", "none")

NUM_SLICES = 8
SLICE_SPACING_DEG = 45.0
SLICE_FOV_DEG = 60.0
FOURTH_WINDOW = 100
FOURTH_COLUMN_DIM = 100
SEMSEG_CLASSES = 25
SEMSEG_TOL = 1e-6

SEMSEG_CLASS_NAMES = (
    "road", "sidewalk", "building", "wall", "fence",
    "pole", "traffic-light", "traffic-sign", "vegetation", "terrain",
    "sky", "person", "rider", "car", "truck",
    "bus", "train", "motorcycle", "bicycle", "crosswalk",
    "curb", "banner", "storefront", "awning", "billboard",
)


def nearest_slice(heading: float) -> int:
    """Index of the slice whose center azimuth is nearest to ``heading``."""
    return int((heading % 360.0 + SLICE_SPACING_DEG / 2.0) // SLICE_SPACING_DEG) % NUM_SLICES


def slice_selection(heading: float) -> list[int]:
    """The heading-aligned slice plus two on each side, left to right."""
    c = nearest_slice(heading)
    return [(c + off) % NUM_SLICES for off in (-2, -1, 0, 1, 2)]


@dataclass(frozen=True)
class SliceSet:
    """Ordered slice vectors (left to right) for one heading."""

    slices: np.ndarray  # (S, D); S=5 for prefinal/semseg, 100 for fourth, 0 for none
    heading: float

    @property
    def count(self) -> int:
        return int(self.slices.shape[0])

    def flat(self) -> np.ndarray:
        return self.slices.reshape(-1)


class PanoFeatureStore:
    """Immutable per-node feature arrays for one variant."""

    def __init__(self, variant: str, features: dict[str, np.ndarray]):
        if variant not in VARIANTS:
            raise FeatureStoreError(f"unknown variant {variant!r}")
        self.variant = variant
        self.features = {k: np.asarray(v, dtype=np.float32) for k, v in features.items()}
        self._validate()

    def _validate(self) -> None:
        if self.variant == "none":
            return
        shapes = {arr.shape for arr in self.features.values()}
        if len(shapes) > 1:
            raise FeatureStoreError(f"non-uniform feature dims across nodes: {sorted(shapes)}")
        if not self.features:
            return
        shape = next(iter(shapes))
        if self.variant in ("prefinal", "semseg"):
            if len(shape) != 2 or shape[0] != NUM_SLICES:
                raise FeatureStoreError(f"{self.variant} store needs (8, D) arrays, got {shape}")
            if self.variant == "semseg" and shape[1] != SEMSEG_CLASSES:
                raise FeatureStoreError(f"semseg store needs (8, 25) arrays, got {shape}")
        elif self.variant == "fourth":
            if len(shape) != 3 or shape[2] != FOURTH_COLUMN_DIM:
                raise FeatureStoreError(
                    f"fourth store needs (W, C, {FOURTH_COLUMN_DIM}) arrays, got {shape}"
                )

    @property
    def slice_dim(self) -> int:
        """Feature dim of one extracted slice vector."""
        if self.variant == "none" or not self.features:
            return 0
        shape = next(iter(self.features.values())).shape
        if self.variant == "fourth":
            return FOURTH_COLUMN_DIM
        return int(shape[1])

    @property
    def slice_count(self) -> int:
        if self.variant == "none":
            return 0
        return FOURTH_WINDOW if self.variant == "fourth" else 5

    def array(self, key: str) -> np.ndarray:
        try:
            return self.features[key]
        except KeyError:
            raise FeatureStoreError(f"node key {key!r} missing from {self.variant} store") from None

    def validate_nodes(self, keys: Iterable[str]) -> None:
        missing = [k for k in keys if k not in self.features]
        if missing:
            raise FeatureStoreError(
                f"{self.variant} store is missing {len(missing)} nodes, e.g. {missing[:3]}"
            )

    # --- persistence ------------------------------------------------------

    def save(self, path: str) -> None:
        arrays = {f"feat::{k}": v for k, v in self.features.items()}
        meta = {
            "variant": self.variant,
            "dims": list(next(iter(self.features.values())).shape) if self.features else [],
            "node_count": len(self.features),
        }
        np.savez(path, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
                 **arrays)

    @classmethod
    def load(cls, path: str) -> "PanoFeatureStore":
        with np.load(path) as payload:
            meta = json.loads(bytes(payload["meta"]).decode())
            features = {
                key[len("feat::"):]: payload[key] for key in payload.files if key.startswith("feat::")
            }
        if meta["node_count"] != len(features):
            raise FeatureStoreError(
                f"{path}: header claims {meta['node_count']} nodes, file has {len(features)}"
            )
        return cls(meta["variant"], features)


def extract_prefinal(store: PanoFeatureStore, key: str, heading: float) -> SliceSet:
    """The five heading-selected slice vectors, left to right."""
    if store.variant != "prefinal":
        raise FeatureStoreError(f"prefinal extraction on a {store.variant} store")
    arr = store.array(key)
    return SliceSet(arr[slice_selection(heading)], heading)


def extract_semseg(store: PanoFeatureStore, key: str, heading: float) -> SliceSet:
    """Heading-selected class-coverage vectors; each must sum to one."""
    if store.variant != "semseg":
        raise FeatureStoreError(f"semseg extraction on a {store.variant} store")
    arr = store.array(key)
    out = arr[slice_selection(heading)]
    sums = out.sum(axis=1, dtype=np.float64)
    if np.any(out < -SEMSEG_TOL) or np.any(np.abs(sums - 1.0) > 1e-4):
        raise FeatureStoreError(f"semseg vectors for {key!r} are not normalized coverages")
    return SliceSet(out, heading)


def _slice_columns(width: int, slice_idx: int) -> np.ndarray:
    """Column indices (mod W) covered by one 60-degree slice."""
    per_slice = int(round(width * SLICE_FOV_DEG / 360.0))
    deg_per_col = 360.0 / width
    start = int(round((slice_idx * SLICE_SPACING_DEG - SLICE_FOV_DEG / 2.0) / deg_per_col))
    return (start + np.arange(per_slice)) % width


def extract_fourth(store: PanoFeatureStore, key: str, heading: float) -> SliceSet:
    """100 x 100 window of channel-averaged columns centered on the heading.

    The five selected slices' column ranges are concatenated along width
    (overlaps between adjacent slices are duplicated, as in the source
    feature maps), channels are averaged, and a 100-column window is cut
    around the heading's position inside the concatenated strip.
    """
    if store.variant != "fourth":
        raise FeatureStoreError(f"fourth-layer extraction on a {store.variant} store")
    arr = store.array(key)
    width = arr.shape[0]
    deg_per_col = 360.0 / width
    selection = slice_selection(heading)
    col_blocks = [_slice_columns(width, s) for s in selection]
    per_slice = len(col_blocks[0])
    strip = arr[np.concatenate(col_blocks)]  # (5*per_slice, C, 100)
    strip = strip.mean(axis=1, dtype=np.float64).astype(np.float32)  # (5*per_slice, 100)

    center_slice = selection[2]
    head_col = int(round((heading % 360.0) / deg_per_col)) % width
    start_c = int(round((center_slice * SLICE_SPACING_DEG - SLICE_FOV_DEG / 2.0) / deg_per_col))
    offset = (head_col - start_c) % width
    center_pos = 2 * per_slice + offset
    lo = center_pos - FOURTH_WINDOW // 2
    hi = center_pos + FOURTH_WINDOW // 2
    if lo < 0 or hi > strip.shape[0]:
        raise FeatureStoreError(
            f"window [{lo}, {hi}) exceeds concatenated width {strip.shape[0]} "
            f"(store width {width} is too small)"
        )
    return SliceSet(strip[lo:hi], heading)


def extract(store: PanoFeatureStore, key: str, heading: float) -> SliceSet:
    """Variant dispatch; ``none`` yields an empty slice set."""
    if store.variant == "none":
        return SliceSet(np.zeros((0, 0), dtype=np.float32), heading)
    if store.variant == "prefinal":
        return extract_prefinal(store, key, heading)
    if store.variant == "semseg":
        return extract_semseg(store, key, heading)
    return extract_fourth(store, key, heading)


def empty_store() -> PanoFeatureStore:
    """Store for the image-free baseline."""
    return PanoFeatureStore("none", {})
