"""Proxy-dense keypoints from sparse annotations and correspondence pair sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Keypoint3D


class SchemaError(ValueError):
    """Keypoint names and skeleton edges do not fit together."""


class EmptyBatchError(ValueError):
    """Two images share no visible dense keypoint."""


class Keypoint2D(NamedTuple):
    name: str
    x: float
    y: float
    visible: bool = True


@dataclass(frozen=True)
class Template:
    """Annotated 3D template: sparse keypoints plus the category skeleton."""

    name: str
    keypoints: tuple[Keypoint3D, ...]
    skeleton: tuple[tuple[str, str], ...]
    required_visible: tuple[str, ...] = ()

    def __post_init__(self):
        names = [kp.name for kp in self.keypoints]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate keypoint names in template {self.name!r}")
        check_skeleton(self.skeleton, names)
        missing = set(self.required_visible) - set(names)
        if missing:
            raise SchemaError(f"required keypoints not in template: {sorted(missing)}")

    @property
    def names(self) -> list[str]:
        return [kp.name for kp in self.keypoints]

    def dense_size(self, samples_per_edge: int) -> int:
        return len(self.keypoints) + len(self.skeleton) * samples_per_edge


@dataclass
class DenseKeypoints:
    """Dense keypoints in canonical id order.

    Ids are assigned sparse keypoints first (declaration order), then the
    interior samples of each edge in edge order.
    """

    ids: np.ndarray
    xy: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        self.visible = np.asarray(self.visible, dtype=bool)
        if not (len(self.ids) == len(self.xy) == len(self.visible)):
            raise ValueError("ids, xy and visible must have equal length")

    def __len__(self):
        return len(self.ids)

    def subset(self, mask: np.ndarray) -> DenseKeypoints:
        return DenseKeypoints(self.ids[mask], self.xy[mask], self.visible[mask])


@dataclass(frozen=True)
class PruneConfig:
    occlusion_radius: float = 4.0
    depth_margin: float = 1e-3


@dataclass
class CorrespondencePairBatch:
    """Pairs ``(x, x', s)``; ``ids`` holds the image-1 dense id of each pair."""

    xy1: np.ndarray
    xy2: np.ndarray
    labels: np.ndarray
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.xy1 = np.asarray(self.xy1, dtype=np.float64).reshape(-1, 2)
        self.xy2 = np.asarray(self.xy2, dtype=np.float64).reshape(-1, 2)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.ids is None:
            self.ids = np.full(len(self.labels), -1, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        n = len(self.labels)
        if not (len(self.xy1) == len(self.xy2) == len(self.ids) == n):
            raise ValueError("pair arrays must have equal length")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be 0 or 1")

    def __len__(self):
        return len(self.labels)


def check_skeleton(edges, names) -> None:
    universe = set(names)
    for a, b in edges:
        if a == b:
            raise SchemaError(f"self-loop on keypoint {a!r}")
        for end in (a, b):
            if end not in universe:
                raise SchemaError(f"edge endpoint {end!r} is not a known keypoint")


def _densify_coords(coords: dict, order: Sequence[str], edges, samples_per_edge: int):
    if samples_per_edge < 0:
        raise ValueError("samples_per_edge must be non-negative")
    out = [np.asarray(coords[name], dtype=np.float64) for name in order]
    t = np.arange(1, samples_per_edge + 1) / (samples_per_edge + 1)
    for a, b in edges:
        pa = np.asarray(coords[a], dtype=np.float64)
        pb = np.asarray(coords[b], dtype=np.float64)
        out.extend(pa + tj * (pb - pa) for tj in t)
    return np.array(out).reshape(len(out), -1)


def densify(
    sparse: Sequence[Keypoint2D],
    skeleton: Sequence[tuple[str, str]],
    samples_per_edge: int,
    order: Sequence[str] | None = None,
) -> DenseKeypoints:
    """Sample ``samples_per_edge`` interior points along every skeleton edge.

    Args:
        sparse: annotated 2D keypoints.
        skeleton: undirected edges over keypoint names.
        samples_per_edge: interior samples per edge, at ``t = j / (s + 1)``.
        order: declaration order of the keypoint names. Defaults to the
            order of ``sparse``; pass the template order when annotations
            may be stored in a different order.

    An interior sample is visible only when both edge endpoints are.
    """
    by_name = {}
    for kp in sparse:
        if kp.name in by_name:
            raise SchemaError(f"duplicate keypoint {kp.name!r}")
        by_name[kp.name] = kp
    order = list(order) if order is not None else [kp.name for kp in sparse]
    missing = [n for n in order if n not in by_name]
    if missing:
        raise SchemaError(f"keypoints missing from annotation: {missing}")
    check_skeleton(skeleton, order)
    coords = {n: (by_name[n].x, by_name[n].y) for n in order}
    xy = _densify_coords(coords, order, skeleton, samples_per_edge)
    vis = [bool(by_name[n].visible) for n in order]
    for a, b in skeleton:
        vis.extend([bool(by_name[a].visible and by_name[b].visible)] * samples_per_edge)
    return DenseKeypoints(np.arange(len(xy)), xy, np.array(vis, dtype=bool))


def densify_template(template: Template, samples_per_edge: int) -> np.ndarray:
    """3D dense points of ``template`` with the same id scheme as ``densify``."""
    coords = {kp.name: kp.position for kp in template.keypoints}
    return _densify_coords(coords, template.names, template.skeleton, samples_per_edge)


def has_required(sparse: Sequence[Keypoint2D], required: Sequence[str]) -> bool:
    """Class-specific filter: every name in ``required`` is annotated visible."""
    vis = {kp.name: kp.visible for kp in sparse}
    return all(vis.get(name, False) for name in required)


def occluded_mask(xy: np.ndarray, depths: np.ndarray, visible: np.ndarray,
                  config: PruneConfig = PruneConfig()) -> np.ndarray:
    """Flag points with a visible, nearer neighbour within the occlusion radius."""
    occluded = np.zeros(len(xy), dtype=bool)
    idx = np.flatnonzero(visible)
    if len(idx) < 2:
        return occluded
    tree = cKDTree(xy[idx])
    pairs = tree.query_pairs(config.occlusion_radius, output_type="ndarray")
    if len(pairs) == 0:
        return occluded
    i, j = idx[pairs[:, 0]], idx[pairs[:, 1]]
    di, dj = depths[i], depths[j]
    occluded[i[dj < di - config.depth_margin]] = True
    occluded[j[di < dj - config.depth_margin]] = True
    return occluded


def prune(dense: DenseKeypoints, depths, config: PruneConfig = PruneConfig()) -> DenseKeypoints:
    """Drop self-occluded and invisible points.

    A point is occluded when another visible point projects within
    ``occlusion_radius`` pixels and is nearer by more than ``depth_margin``.
    """
    depths = np.asarray(depths, dtype=np.float64)
    if depths.shape != (len(dense),):
        raise ValueError(f"expected {len(dense)} depths, got shape {depths.shape}")
    occ = occluded_mask(dense.xy, depths, dense.visible, config)
    return dense.subset(dense.visible & ~occ)


def make_pairs(
    d1: DenseKeypoints,
    d2: DenseKeypoints,
    negatives_per_positive: int,
    rng_seed: int,
    image2_shape: tuple[int, int],
    negative_radius: float = 8.0,
    max_tries: int = 1000,
) -> CorrespondencePairBatch:
    """One positive per shared visible id, each followed by its negatives.

    Negatives pair the image-1 point with uniform image-2 locations at least
    ``negative_radius`` pixels away from the true correspondence.
    """
    if negatives_per_positive < 0:
        raise ValueError("negatives_per_positive must be non-negative")
    h, w = image2_shape
    pos2 = {int(i): p for i, p, v in zip(d2.ids, d2.xy, d2.visible) if v}
    common = [(int(i), p) for i, p, v in zip(d1.ids, d1.xy, d1.visible) if v and int(i) in pos2]
    if not common:
        raise EmptyBatchError("no dense keypoint is visible in both images")
    rng = np.random.default_rng(rng_seed)
    xy1, xy2, labels, ids = [], [], [], []
    r2 = negative_radius ** 2
    for kid, p1 in common:
        p2 = pos2[kid]
        xy1.append(p1)
        xy2.append(p2)
        labels.append(1)
        ids.append(kid)
        for _ in range(negatives_per_positive):
            for _ in range(max_tries):
                cand = rng.uniform((0.0, 0.0), (w - 1, h - 1))
                if np.sum((cand - p2) ** 2) >= r2:
                    break
            else:
                raise ValueError(
                    f"could not place a negative {negative_radius}px away from id {kid} "
                    f"in a {h}x{w} image"
                )
            xy1.append(p1)
            xy2.append(cand)
            labels.append(0)
            ids.append(kid)
    return CorrespondencePairBatch(np.array(xy1), np.array(xy2), np.array(labels), np.array(ids))
