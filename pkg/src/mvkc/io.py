"""Binary tensor formats (DMAP, FGRD, CSET), JSON inputs, and PGM/PPM heatmaps."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .correspondence import MultiViewCorrespondenceSet
from .estimator import SearchResult
from .evaluation import Detection, GroundTruthObject, PoseRecord
from .geometry import Camera, EulerPose, Keypoint3D
from .skeleton import Keypoint2D, Template

VERSION = 1
_LE_F32 = np.dtype("<f4")


class FormatError(ValueError):
    """A file does not follow its declared binary or JSON layout."""


def _write_tensor(path, magic: bytes, dims, values) -> None:
    values = np.ascontiguousarray(values, dtype=_LE_F32)
    header = magic + struct.pack(f"<{1 + len(dims)}I", VERSION, *dims)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(values.tobytes())


def _read_tensor(path, magic: bytes, ndims: int):
    data = Path(path).read_bytes()
    head = 4 + 4 * (1 + ndims)
    if len(data) < head or data[:4] != magic:
        raise FormatError(f"{path}: missing {magic.decode()} magic")
    version, *dims = struct.unpack_from(f"<{1 + ndims}I", data, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    count = int(np.prod(dims))
    if len(data) != head + 4 * count:
        raise FormatError(f"{path}: expected {count} floats, found {(len(data) - head) // 4}")
    arr = np.frombuffer(data, dtype=_LE_F32, offset=head, count=count)
    return arr.astype(np.float64).reshape(dims)


def write_dmap(path, dmap: np.ndarray) -> None:
    _write_tensor(path, b"DMAP", dmap.shape, dmap)


def read_dmap(path) -> np.ndarray:
    return _read_tensor(path, b"DMAP", 3)


def write_fgrd(path, grid: np.ndarray) -> None:
    _write_tensor(path, b"FGRD", grid.shape, grid)


def read_fgrd(path) -> np.ndarray:
    return _read_tensor(path, b"FGRD", 3)


def write_cset(path, mvk: MultiViewCorrespondenceSet) -> None:
    _write_tensor(path, b"CSET", mvk.maps.shape, mvk.maps)


def read_cset(path) -> MultiViewCorrespondenceSet:
    return MultiViewCorrespondenceSet(_read_tensor(path, b"CSET", 4))


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: {err}") from None


def load_template(path) -> Template:
    doc = _load_json(path)
    try:
        kps = tuple(Keypoint3D(k["name"], tuple(float(v) for v in k["xyz"])) for k in doc["keypoints"])
        return Template(
            doc["name"],
            kps,
            tuple((a, b) for a, b in doc.get("skeleton", [])),
            tuple(doc.get("required_visible", [])),
        )
    except (KeyError, TypeError) as err:
        raise FormatError(f"{path}: malformed template ({err})") from None


def template_to_json(t: Template) -> dict:
    doc = {
        "name": t.name,
        "keypoints": [{"name": k.name, "xyz": list(k.position)} for k in t.keypoints],
        "skeleton": [list(e) for e in t.skeleton],
    }
    if t.required_visible:
        doc["required_visible"] = list(t.required_visible)
    return doc


def load_camera(path) -> Camera:
    doc = _load_json(path)
    try:
        return Camera(float(doc["focal"]), float(doc["cx"]), float(doc["cy"]),
                      float(doc["distance"]), int(doc["height"]), int(doc["width"]))
    except (KeyError, TypeError) as err:
        raise FormatError(f"{path}: malformed camera ({err})") from None


def camera_to_json(cam: Camera) -> dict:
    return {"focal": cam.focal, "cx": cam.cx, "cy": cam.cy, "distance": cam.distance,
            "height": cam.height, "width": cam.width}


def read_jsonl(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as err:
                    raise FormatError(f"{path}:{n}: {err}") from None
    return rows


def write_jsonl(path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def annotation_keypoints(row: dict) -> list[Keypoint2D]:
    """Sparse (named) keypoints of one annotation row."""
    return [Keypoint2D(k["name"], float(k["xy"][0]), float(k["xy"][1]), bool(k.get("visible", True)))
            for k in row["keypoints"] if "name" in k]


def _pose(values) -> EulerPose:
    return EulerPose(*(float(v) for v in values))


def load_pose_records(predictions, ground_truth) -> list[PoseRecord]:
    """Join prediction rows with annotation rows on ``image``."""
    gt = {row["image"]: _pose(row["pose"]) for row in ground_truth}
    records = []
    for row in predictions:
        if row["image"] not in gt:
            raise FormatError(f"no ground truth for image {row['image']!r}")
        records.append(PoseRecord(row["image"], _pose(row["pose"]), gt[row["image"]]))
    return records


def load_detections(rows) -> list[Detection]:
    return [Detection(r["image"], tuple(r["bbox"]), float(r["score"]), float(r["azimuth"])) for r in rows]


def load_ground_truth_objects(rows) -> list[GroundTruthObject]:
    return [GroundTruthObject(r["image"], tuple(r["bbox"]), float(r["pose"][0]), bool(r.get("difficult", False)))
            for r in rows if "bbox" in r]


def write_scored_grid(path, result: SearchResult) -> None:
    Path(path).write_text("\n".join(result.scored_lines()) + "\n")


def write_distributions(path, result: SearchResult) -> None:
    Path(path).write_text(json.dumps({k: v.tolist() for k, v in result.distributions.items()}) + "\n")


# black -> red -> yellow
COLOR_STOPS = np.array([[0, 0, 0], [255, 0, 0], [255, 255, 0]], dtype=np.float64)


def heatmap_levels(cmap: np.ndarray) -> np.ndarray:
    """Min-max scale a map to 0..255 (all zeros for a constant map)."""
    cmap = np.asarray(cmap, dtype=np.float64)
    lo, hi = cmap.min(), cmap.max()
    if hi <= lo:
        return np.zeros(cmap.shape, dtype=np.uint8)
    return np.rint(255.0 * (cmap - lo) / (hi - lo)).astype(np.uint8)


def colorize(levels: np.ndarray) -> np.ndarray:
    t = levels.astype(np.float64) / 255.0 * (len(COLOR_STOPS) - 1)
    i = np.minimum(t.astype(np.int64), len(COLOR_STOPS) - 2)
    f = (t - i)[..., None]
    rgb = COLOR_STOPS[i] * (1 - f) + COLOR_STOPS[i + 1] * f
    return np.rint(rgb).astype(np.uint8)


def write_heatmap(path, cmap: np.ndarray, color: bool = False) -> None:
    """Binary PGM (P5), or PPM (P6) through the three-stop ramp when ``color``."""
    levels = heatmap_levels(cmap)
    h, w = levels.shape
    if color:
        body, magic = colorize(levels).tobytes(), b"P6"
    else:
        body, magic = levels.tobytes(), b"P5"
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        fh.write(body)


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    magic, w, h, maxval = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise FormatError(f"{path}: unsupported pixmap")
    body = data[len(data) - w * h * (3 if magic == b"P6" else 1):]
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w, 3) if magic == b"P6" else arr.reshape(h, w)
