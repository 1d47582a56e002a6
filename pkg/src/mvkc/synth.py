"""Synthetic stand-ins for rendered and real images.

An oracle render assigns every dense keypoint id a fixed unit descriptor
(shared by all renders of the template) and stamps it on the 2x2 pixel
stencil around the keypoint's projection, so bilinear sampling at the exact
projection returns the descriptor. Everything else is background: random unit
vectors whose correlation with every keypoint descriptor is at most 0.3.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .correspondence import MultiViewCorrespondenceSet, multi_view_set
from .descriptor import LinearDescriptorHead, TrainingExample, normalize
from .estimator import PoseHypothesisGrid, SearchResult, search_estimate
from .geometry import (
    Camera,
    DegeneratePoseError,
    EulerPose,
    Keypoint3D,
    euler_to_rotation,
    project_points,
    viewpoint_schedule,
)
from .skeleton import DenseKeypoints, PruneConfig, Template, densify_template, make_pairs, occluded_mask

BACKGROUND_MAX_DOT = 0.3

CHAIR = Template(
    name="chair",
    keypoints=(
        Keypoint3D("back_top_left", (-0.5, -1.0, 0.5)),
        Keypoint3D("back_top_right", (0.5, -1.0, 0.5)),
        Keypoint3D("seat_back_left", (-0.5, 0.0, 0.5)),
        Keypoint3D("seat_back_right", (0.5, 0.0, 0.5)),
        Keypoint3D("seat_front_left", (-0.5, 0.0, -0.5)),
        Keypoint3D("seat_front_right", (0.5, 0.0, -0.5)),
        Keypoint3D("leg_back_left", (-0.5, 1.0, 0.5)),
        Keypoint3D("leg_back_right", (0.5, 1.0, 0.5)),
        Keypoint3D("leg_front_left", (-0.5, 1.0, -0.5)),
        Keypoint3D("leg_front_right", (0.5, 1.0, -0.5)),
    ),
    skeleton=(
        ("back_top_left", "back_top_right"),
        ("back_top_left", "seat_back_left"),
        ("back_top_right", "seat_back_right"),
        ("seat_back_left", "seat_back_right"),
        ("seat_back_right", "seat_front_right"),
        ("seat_front_right", "seat_front_left"),
        ("seat_front_left", "seat_back_left"),
        ("seat_back_left", "seat_front_right"),
        ("seat_back_right", "seat_front_left"),
        ("seat_back_left", "leg_back_left"),
        ("seat_back_right", "leg_back_right"),
        ("seat_front_left", "leg_front_left"),
        ("seat_front_right", "leg_front_right"),
    ),
)

DEFAULT_CAMERA = Camera(focal=140.0, cx=63.5, cy=63.5, distance=4.0, height=128, width=128)


def dense_template(template: Template, samples_per_edge: int) -> list[Keypoint3D]:
    """Dense template keypoints named by their dense id."""
    pts = densify_template(template, samples_per_edge)
    return [Keypoint3D(str(i), tuple(p)) for i, p in enumerate(pts)]


def codebook(n_ids: int, dim: int, seed: int) -> np.ndarray:
    """Per-id unit descriptors; orthonormal when ``dim >= n_ids``."""
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(max(n_ids, dim), dim))
    if dim >= n_ids:
        q, _ = np.linalg.qr(g[:dim].T)
        return q.T[:n_ids].copy()
    return normalize(g[:n_ids])


def background(h: int, w: int, book: np.ndarray, rng: np.random.Generator,
               max_dot: float = BACKGROUND_MAX_DOT) -> np.ndarray:
    """Rejection-sampled unit vectors with dot <= ``max_dot`` to every codebook row."""
    d = book.shape[1]
    out = np.empty((h * w, d))
    filled = 0
    rate = 0.5
    while filled < h * w:
        need = h * w - filled
        n = max(int(1.2 * need / rate), 256)
        cand = normalize(rng.normal(size=(n, d)))
        keep = np.max(cand @ book.T, axis=1) <= max_dot
        rate = max(keep.mean(), 0.01)
        cand = cand[keep][:need]
        out[filled:filled + len(cand)] = cand
        filled += len(cand)
    return out.reshape(h, w, d)


@dataclass
class Render:
    """One oracle render: descriptors plus its dense keypoint annotation."""

    pose: EulerPose
    descriptors: np.ndarray
    keypoints: DenseKeypoints
    depths: np.ndarray

    def visible_xy(self, ids) -> list[tuple[int, tuple[float, float] | None]]:
        """``(id, xy)`` for each id, with ``None`` where the id is not stamped."""
        lookup = {int(i): (float(p[0]), float(p[1]))
                  for i, p, v in zip(self.keypoints.ids, self.keypoints.xy, self.keypoints.visible) if v}
        return [(int(i), lookup.get(int(i))) for i in ids]


def render_oracle(
    template: Template,
    cam: Camera,
    pose: EulerPose,
    seed: int,
    dim: int = 64,
    samples_per_edge: int = 3,
    codebook_seed: int = 0,
    noise: float = 0.0,
    prune_config: PruneConfig | None = PruneConfig(),
) -> Render:
    """Oracle descriptor map of ``template`` seen at ``pose``.

    Args:
        noise: expected norm of an isotropic Gaussian perturbation added to
            each stamped descriptor before re-normalisation (view-dependent
            appearance change).
        prune_config: occlusion pruning applied before stamping; ``None``
            stamps every in-image keypoint.

    Raises:
        DegeneratePoseError: if the whole template is behind the camera.
    """
    pts = densify_template(template, samples_per_edge)
    xy, depth, visible = project_points(pts, euler_to_rotation(pose), cam)
    if not np.any(depth > 0):
        raise DegeneratePoseError(f"template behind the camera at {pose}")
    if prune_config is not None:
        visible = visible & ~occluded_mask(np.nan_to_num(xy), depth, visible, prune_config)
    book = codebook(len(pts), dim, codebook_seed)
    rng = np.random.default_rng(seed)
    h, w = cam.shape
    dmap = background(h, w, book, rng)
    stamps = book.copy()
    if noise > 0:
        stamps = normalize(stamps + noise / np.sqrt(dim) * rng.normal(size=stamps.shape))
    # far to near so nearer keypoints overwrite
    for i in sorted(np.flatnonzero(visible), key=lambda i: -depth[i]):
        x0 = int(np.clip(np.floor(xy[i, 0]), 0, max(w - 2, 0)))
        y0 = int(np.clip(np.floor(xy[i, 1]), 0, max(h - 2, 0)))
        dmap[y0:y0 + 2, x0:x0 + 2] = stamps[i]
    kps = DenseKeypoints(np.arange(len(pts)), np.nan_to_num(xy, nan=-1.0), visible)
    return Render(pose, dmap, kps, depth)


def annotation_row(image: str, template: Template, render: Render) -> dict:
    """Annotation JSON object: named sparse keypoints and dense ids."""
    rows = []
    n_sparse = len(template.keypoints)
    for i, p, v in zip(render.keypoints.ids, render.keypoints.xy, render.keypoints.visible):
        entry = {"dense_id": int(i), "xy": [float(p[0]), float(p[1])], "visible": bool(v)}
        if i < n_sparse:
            entry["name"] = template.keypoints[i].name
        rows.append(entry)
    return {"image": image, "pose": list(render.pose.as_tuple()), "keypoints": rows}


@dataclass
class HarnessConfig:
    views: int = 3
    samples_per_edge: int = 3
    keypoint_samples: int = 0
    dim: int = 64
    azimuth_step: float = 5.0
    noise: float = 0.0
    prune: bool = True
    codebook_seed: int = 0


def _render_seed(seed: int, pose: EulerPose) -> int:
    key = [int(round(v * 1000)) % (2 ** 32) for v in pose.as_tuple()]
    return int(np.random.SeedSequence([seed, *key]).generate_state(1)[0])


def closed_loop_views(
    gt: EulerPose,
    seed: int,
    view_counts,
    config: HarnessConfig = HarnessConfig(),
    template: Template = CHAIR,
    cam: Camera = DEFAULT_CAMERA,
    threads: int | None = 1,
) -> dict[int, tuple[SearchResult, MultiViewCorrespondenceSet]]:
    """Run the pipeline for several view counts on one shared query render.

    Every render's seed is derived from ``seed`` and its pose, so a view that
    appears in two schedules is rendered once and shared. The query uses the
    seed of its ground-truth pose under a distinct stream.
    """
    if config.keypoint_samples > config.samples_per_edge:
        raise ValueError("correspondence keypoints must be a subset of the rendered ones")
    prune_cfg = PruneConfig() if config.prune else None
    common = dict(dim=config.dim, samples_per_edge=config.samples_per_edge,
                  codebook_seed=config.codebook_seed, noise=config.noise, prune_config=prune_cfg)
    query = render_oracle(template, cam, gt, _render_seed(seed + 1, gt), **common)
    kp_template = dense_template(template, config.keypoint_samples)
    ids = subset_ids(template, config.keypoint_samples, config.samples_per_edge)
    grid = PoseHypothesisGrid.regular(config.azimuth_step, (gt.elevation,), (gt.tilt,))
    cache = {}
    out = {}
    for m in view_counts:
        schedule = viewpoint_schedule(m)
        views = []
        for p in schedule:
            if p not in cache:
                cache[p] = render_oracle(template, cam, p, _render_seed(seed, p), **common)
            views.append(cache[p])
        mvk = multi_view_set(
            [v.descriptors for v in views], [v.visible_xy(ids) for v in views], query.descriptors, threads
        )
        out[m] = (search_estimate(mvk, kp_template, cam, grid, schedule, threads=threads), mvk)
    return out


def closed_loop(gt: EulerPose, seed: int, config: HarnessConfig = HarnessConfig(),
                template: Template = CHAIR, cam: Camera = DEFAULT_CAMERA,
                threads: int | None = 1) -> tuple[SearchResult, MultiViewCorrespondenceSet]:
    """Render a query and the schedule views, build mvK, and search the pose grid.

    ``keypoint_samples`` sets the density of the keypoints the correspondence
    set is built for; stamped renders always use ``samples_per_edge``.
    """
    return closed_loop_views(gt, seed, [config.views], config, template, cam, threads)[config.views]


def subset_ids(template: Template, s_small: int, s_big: int) -> list[int]:
    """Dense ids at density ``s_big`` of the points that exist at density ``s_small``."""
    n = len(template.keypoints)
    ids = list(range(n))
    step = (s_big + 1) // (s_small + 1)
    if (s_big + 1) % (s_small + 1):
        raise ValueError("keypoint density must divide the render density")
    for e in range(len(template.skeleton)):
        ids.extend(n + e * s_big + step * j - 1 for j in range(1, s_small + 1))
    return ids


def head_dataset(
    n_examples: int = 8,
    size: tuple[int, int] = (12, 12),
    signal_channels: int = 6,
    nuisance_channels: int = 6,
    dim: int = 8,
    positives: int = 12,
    negatives_per_positive: int = 2,
    nuisance_scale: float = 1.0,
    seed: int = 0,
) -> tuple[LinearDescriptorHead, list[TrainingExample]]:
    """Image pairs whose correspondences are defined by a known head.

    Image 2 is image 1 circularly shifted, with the signal channels copied and
    the nuisance channels redrawn. The ground-truth head reads only the signal
    channels, so it maps corresponding locations to identical descriptors.
    """
    rng = np.random.default_rng(seed)
    h, w = size
    c = signal_channels + nuisance_channels
    weight = np.zeros((c, dim))
    weight[:signal_channels] = rng.normal(size=(signal_channels, dim))
    gt_head = LinearDescriptorHead(weight, np.zeros(dim))
    data = []
    for ex in range(n_examples):
        f1 = np.concatenate([rng.normal(size=(h, w, signal_channels)),
                             nuisance_scale * rng.normal(size=(h, w, nuisance_channels))], axis=2)
        dy, dx = rng.integers(1, h), rng.integers(1, w)
        f2 = np.roll(f1, (dy, dx), axis=(0, 1)).copy()
        f2[..., signal_channels:] = nuisance_scale * rng.normal(size=(h, w, nuisance_channels))
        ys = rng.integers(0, h, positives)
        xs = rng.integers(0, w, positives)
        p1 = np.stack([xs, ys], axis=1).astype(float)
        p2 = np.stack([(xs + dx) % w, (ys + dy) % h], axis=1).astype(float)
        ids = np.arange(positives)
        d1 = DenseKeypoints(ids, p1, np.ones(positives, bool))
        d2 = DenseKeypoints(ids, p2, np.ones(positives, bool))
        batch = make_pairs(d1, d2, negatives_per_positive, seed * 1000 + ex, (h, w), negative_radius=2.0)
        data.append(TrainingExample(f1, f2, batch))
    return gt_head, data
