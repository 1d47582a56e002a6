"""Angle binning, the geometric structure-aware classification loss, pose
decoding and a non-learned exhaustive-search pose estimator."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .correspondence import MultiViewCorrespondenceSet, thread_count
from .descriptor import bilinear
from .geometry import Camera, EulerPose, Keypoint3D, euler_to_rotation, project_points

KINDS = ("azimuth", "elevation", "tilt")
LOG_EPS = 1e-9


class AngleRangeError(ValueError):
    pass


@dataclass(frozen=True)
class AngleBinning:
    """Centred bins for azimuth/tilt (period 360), uniform bins on [-90, 90] for elevation."""

    bins: int = 360
    kind: str = "azimuth"

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("need at least two bins")
        if self.kind not in KINDS:
            raise ValueError(f"unknown angle kind {self.kind!r}")

    @property
    def circular(self) -> bool:
        return self.kind != "elevation"

    @property
    def width(self) -> float:
        return (360.0 if self.circular else 180.0) / self.bins

    def center(self, j: int) -> float:
        if not 0 <= j < self.bins:
            raise IndexError(f"bin {j} out of range for {self.bins} bins")
        if self.kind == "elevation":
            return -90.0 + (j + 0.5) * self.width
        c = j * self.width
        if self.kind == "tilt" and c >= 180.0:
            c -= 360.0
        return c

    def centers(self) -> np.ndarray:
        return np.array([self.center(j) for j in range(self.bins)])

    def distance(self, i, j) -> np.ndarray:
        """Distance in degrees between bin centres (circular where periodic)."""
        d = np.abs(np.asarray(i) - np.asarray(j)) * self.width
        if self.circular:
            d = np.minimum(d, 360.0 - d)
        return d


def encode_bin(angle: float, binning: AngleBinning) -> int:
    if not math.isfinite(angle):
        raise AngleRangeError(f"non-finite angle {angle}")
    if binning.kind == "elevation":
        if not -90.0 <= angle <= 90.0:
            raise AngleRangeError(f"elevation {angle} outside [-90, 90]")
        return min(int(math.floor((angle + 90.0) / binning.width)), binning.bins - 1)
    lo, hi = (0.0, 360.0) if binning.kind == "azimuth" else (-180.0, 180.0)
    if not lo <= angle < hi:
        raise AngleRangeError(f"{binning.kind} {angle} outside [{lo}, {hi})")
    w = binning.width
    return int(math.floor(((angle + w / 2.0) % 360.0) / w)) % binning.bins


def soft_targets(gt_bin: int, sigma: float, binning: AngleBinning) -> np.ndarray:
    """Weights ``exp(-d(j, gt) / sigma)`` normalised to sum to one."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    d = binning.distance(np.arange(binning.bins), gt_bin)
    w = np.exp(-d / sigma)
    return w / w.sum()


def geometric_aware_loss(logits: np.ndarray, gt_bin: int, sigma: float,
                         binning: AngleBinning) -> tuple[float, np.ndarray]:
    """Soft-label cross entropy over angle bins.

    Args:
        logits: pre-softmax scores, one per bin.
        gt_bin: ground-truth bin index.
        sigma: decay of the target weights, in degrees.
        binning: bin layout used for the circular distance.

    Returns:
        ``(loss, grad)`` where ``grad = softmax(logits) - targets``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != (binning.bins,):
        raise ValueError(f"expected {binning.bins} scores, got shape {logits.shape}")
    w = soft_targets(gt_bin, sigma, binning)
    z = logits - logits.max()
    log_p = z - math.log(np.sum(np.exp(z)))
    loss = float(-np.sum(w * log_p))
    return loss, np.exp(log_p) - w


def decode_angle(dist: np.ndarray, binning: AngleBinning) -> float:
    # np.argmax returns the first maximum
    return binning.center(int(np.argmax(dist)))


def decode_pose(az: np.ndarray, el: np.ndarray, ti: np.ndarray,
                binnings: Sequence[AngleBinning] | None = None) -> EulerPose:
    """Bin centre of the most probable bin of each angle; ties go to the lowest index."""
    if binnings is None:
        binnings = [AngleBinning(len(d), k) for d, k in zip((az, el, ti), KINDS)]
    return EulerPose(*(decode_angle(d, b) for d, b in zip((az, el, ti), binnings)))


@dataclass(frozen=True)
class PoseHypothesisGrid:
    """Cartesian grid of poses, iterated azimuth-major then elevation then tilt."""

    azimuths: tuple[float, ...]
    elevations: tuple[float, ...] = (10.0,)
    tilts: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        for name in ("azimuths", "elevations", "tilts"):
            vals = tuple(float(v) for v in getattr(self, name))
            if not vals:
                raise ValueError(f"pose grid has no {name}")
            object.__setattr__(self, name, vals)

    @classmethod
    def regular(cls, azimuth_step: float = 5.0, elevations=(10.0,), tilts=(0.0,)):
        if not azimuth_step > 0:
            raise ValueError("azimuth step must be positive")
        n = int(math.ceil(360.0 / azimuth_step - 1e-9))
        return cls(tuple(i * azimuth_step for i in range(n)), tuple(elevations), tuple(tilts))

    @property
    def shape(self) -> tuple[int, int, int]:
        return (len(self.azimuths), len(self.elevations), len(self.tilts))

    def poses(self) -> list[EulerPose]:
        return [EulerPose(a, e, t) for a in self.azimuths for e in self.elevations for t in self.tilts]


@dataclass
class SearchResult:
    pose: EulerPose
    grid: PoseHypothesisGrid
    scores: np.ndarray
    distributions: dict[str, np.ndarray]

    def scored_lines(self) -> list[str]:
        """``az el ti score`` lines in grid order."""
        return [
            f"{p.azimuth:g} {p.elevation:g} {p.tilt:g} {s:.9g}"
            for p, s in zip(self.grid.poses(), self.scores.ravel())
        ]


def _score_chunk(maps, view_visible, points, rotations, cam, eps):
    xy, _, inside = project_points(points, rotations, cam)
    total = np.zeros(len(rotations))
    count = 0
    for v in range(maps.shape[0]):
        for k in np.flatnonzero(view_visible[v]):
            vals = np.zeros(len(rotations))
            ok = inside[:, k]
            if np.any(ok):
                vals[ok] = bilinear(maps[v, k], xy[ok, k])
            total += np.log(vals + eps)
            count += 1
    return total / count if count else total


def _marginal(scores: np.ndarray, axis_keep: int, values, binning: AngleBinning) -> np.ndarray:
    other = tuple(a for a in range(3) if a != axis_keep)
    best = scores.max(axis=other)
    p = np.exp(best - best.max())
    p /= p.sum()
    dist = np.zeros(binning.bins)
    for val, pv in zip(values, p):
        dist[encode_bin(val, binning)] += pv
    return dist


def search_estimate(
    mvk: MultiViewCorrespondenceSet,
    template: Sequence[Keypoint3D],
    cam: Camera,
    grid: PoseHypothesisGrid,
    view_schedule: Sequence[EulerPose],
    bins: int = 360,
    eps: float = LOG_EPS,
    threads: int | None = None,
) -> SearchResult:
    """Score every grid pose by how well its keypoint projections hit the maps.

    For hypothesis ``P`` the score is the mean over views ``v`` and keypoints
    ``k`` visible in view ``v`` of ``log(C[v, k](x_k(P)) + eps)``, where
    ``x_k(P)`` is the projection of keypoint ``k`` under ``P``. A projection
    outside the map contributes ``log(eps)``. The first grid pose wins ties.
    """
    if len(template) != mvk.n or len(view_schedule) != mvk.m:
        raise ValueError(
            f"set layout {mvk.m}x{mvk.n} does not match {len(view_schedule)} views "
            f"x {len(template)} keypoints"
        )
    if tuple(mvk.shape) != cam.shape:
        raise ValueError(f"map size {mvk.shape} differs from camera image size {cam.shape}")
    points = np.array([kp.position for kp in template], dtype=np.float64)
    view_rot = np.stack([euler_to_rotation(p) for p in view_schedule])
    _, _, view_visible = project_points(points, view_rot, cam)

    poses = grid.poses()
    rotations = np.stack([euler_to_rotation(p) for p in poses])
    threads = thread_count() if threads is None else threads
    chunks = np.array_split(np.arange(len(poses)), max(1, min(threads, len(poses) // 64 or 1)))
    work = [(mvk.maps, view_visible, points, rotations[c], cam, eps) for c in chunks]
    if len(work) > 1:
        with ThreadPoolExecutor(max_workers=len(work)) as pool:
            parts = list(pool.map(lambda a: _score_chunk(*a), work))
    else:
        parts = [_score_chunk(*work[0])]
    flat = np.concatenate(parts)
    scores = flat.reshape(grid.shape)
    best = int(np.argmax(flat))
    dists = {
        "azimuth": _marginal(scores, 0, grid.azimuths, AngleBinning(bins, "azimuth")),
        "elevation": _marginal(scores, 1, grid.elevations, AngleBinning(bins, "elevation")),
        "tilt": _marginal(scores, 2, grid.tilts, AngleBinning(bins, "tilt")),
    }
    return SearchResult(poses[best], grid, scores, dists)


class PoseEstimator(Protocol):
    """Anything that turns a fused correspondence set into three angle distributions.

    ``local_descriptors`` is the query image's descriptor map; learned
    estimators may use it, the search estimator ignores it.
    """

    def estimate(self, mvk: MultiViewCorrespondenceSet,
                 local_descriptors: np.ndarray | None = None) -> dict[str, np.ndarray]: ...


@dataclass
class SearchEstimator:
    template: Sequence[Keypoint3D]
    camera: Camera
    grid: PoseHypothesisGrid
    view_schedule: Sequence[EulerPose]
    bins: int = 360

    def estimate(self, mvk, local_descriptors=None):
        return search_estimate(mvk, self.template, self.camera, self.grid,
                               self.view_schedule, self.bins).distributions
