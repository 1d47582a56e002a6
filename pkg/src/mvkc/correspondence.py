"""Keypoint correspondence maps from descriptor correlation, and multi-view fusion.

Each map is computed with a fixed reduction order so that results do not
depend on how keypoints or views are batched or scheduled across threads.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .descriptor import SampleRangeError, sample_many


class EmptyKeypointSetError(ValueError):
    pass


def thread_count() -> int:
    """Worker cap from ``MVKC_THREADS``; 0 or unset means one per CPU."""
    try:
        n = int(os.environ.get("MVKC_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def hadamard(descriptor: np.ndarray, L2: np.ndarray) -> np.ndarray:
    """Rectified correlation ``max(0, <descriptor, L2[i, j]>)`` over the map."""
    descriptor = np.asarray(descriptor, dtype=np.float64)
    if descriptor.ndim != 1 or descriptor.shape[0] != L2.shape[-1]:
        raise ValueError(f"descriptor of size {descriptor.shape} vs map depth {L2.shape[-1]}")
    # elementwise product + last-axis sum: identical bits whether called per keypoint or batched
    return np.maximum(0.0, np.sum(L2 * descriptor, axis=-1))


def softmax_map(H: np.ndarray) -> np.ndarray:
    """Softmax over the whole (h, w) grid, with max subtraction."""
    H = np.asarray(H, dtype=np.float64)
    e = np.exp(H - H.max())
    return e / e.sum()


def _one_map(v: np.ndarray, L2: np.ndarray) -> np.ndarray:
    return softmax_map(hadamard(v, L2))


def uniform_map(h: int, w: int) -> np.ndarray:
    return np.full((h, w), 1.0 / (h * w))


def correspondence_set(
    L1: np.ndarray,
    keypoints: Sequence[tuple[int, tuple[float, float]]],
    L2: np.ndarray,
    threads: int | None = None,
) -> np.ndarray:
    """Stack of correspondence maps, one per ``(id, (x, y))`` keypoint of image 1.

    Returns:
        (N, h, w) array in the order of ``keypoints``.
    """
    if len(keypoints) == 0:
        raise EmptyKeypointSetError("no keypoints given")
    if L1.shape[-1] != L2.shape[-1]:
        raise ValueError(f"descriptor dimension mismatch: {L1.shape[-1]} vs {L2.shape[-1]}")
    descs = []
    for kid, xy in keypoints:
        try:
            descs.append(sample_many(L1, np.asarray(xy, dtype=np.float64).reshape(1, 2))[0])
        except SampleRangeError as err:
            raise SampleRangeError(f"keypoint {kid}: {err}") from None
    threads = thread_count() if threads is None else threads
    if threads > 1 and len(descs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            maps = list(pool.map(lambda v: _one_map(v, L2), descs))
    else:
        maps = [_one_map(v, L2) for v in descs]
    return np.stack(maps)


@dataclass
class MultiViewCorrespondenceSet:
    """``maps[v, k]`` is the map of keypoint ``k`` rendered in view ``v``."""

    maps: np.ndarray

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64)
        if self.maps.ndim != 4:
            raise ValueError(f"expected (m, N, h, w), got shape {self.maps.shape}")

    @property
    def m(self) -> int:
        return self.maps.shape[0]

    @property
    def n(self) -> int:
        return self.maps.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.maps.shape[2:]

    @property
    def channels(self) -> np.ndarray:
        """(m * N, h, w) view-major channel stack; channel ``v * N + k``."""
        return self.maps.reshape(self.m * self.n, *self.shape)


def fuse_views(sets: Sequence[np.ndarray]) -> MultiViewCorrespondenceSet:
    if not sets:
        raise ValueError("no correspondence sets to fuse")
    first = np.shape(sets[0])
    for i, s in enumerate(sets):
        if np.ndim(s) != 3 or np.shape(s) != first:
            raise ValueError(f"set {i} has shape {np.shape(s)}, expected {first}")
    return MultiViewCorrespondenceSet(np.stack(sets))


def multi_view_set(
    view_maps: Sequence[np.ndarray],
    view_keypoints: Sequence[Sequence[tuple[int, tuple[float, float] | None]]],
    L2: np.ndarray,
    threads: int | None = None,
) -> MultiViewCorrespondenceSet:
    """Correspondence sets of every rendered view against ``L2``, fused.

    ``view_keypoints[v]`` lists ``(id, xy)`` in canonical order; ``xy`` may be
    ``None`` for a keypoint not visible in that view, which yields a uniform
    (uninformative) map so the channel layout stays fixed.
    """
    if len(view_maps) != len(view_keypoints):
        raise ValueError("one keypoint list per view is required")
    h, w = L2.shape[:2]
    threads = thread_count() if threads is None else threads
    sets = []
    for L1, kps in zip(view_maps, view_keypoints):
        present = [(kid, xy) for kid, xy in kps if xy is not None]
        stack = np.empty((len(kps), h, w))
        computed = correspondence_set(L1, present, L2, threads) if present else []
        j = 0
        for i, (_, xy) in enumerate(kps):
            if xy is None:
                stack[i] = uniform_map(h, w)
            else:
                stack[i] = computed[j]
                j += 1
        sets.append(stack)
    return fuse_views(sets)
