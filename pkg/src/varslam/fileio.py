"""Dataset / solution JSON and the plain-text trajectory format.

Dataset JSON (``schema_version`` 1) has top-level keys, in this order:
``schema_version, meta, prototypes, ground_truth, odometry, keyframes``.
Floats are written with 17 significant digits and rotations as 3x3
matrices, so reading and re-writing reproduces the same bytes.

Trajectory text: one pose per line,
``timestamp tx ty tz qx qy qz qw``, timestamp = frame index with six
decimals, translation in shortest round-trip form, quaternion on a fixed
grid of 12 decimal places with ``qw >= 0``. The grid point is chosen so that
normalising it and rounding again returns the same point, which makes
export -> import -> export byte-identical.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .association import Detection, Landmark, WeightMatrix
from .generative import EncodedFeature, LabelPrototype, PrototypeTable
from .geometry import (
    EulerAngle,
    Se3Pose,
    TrigOrientation,
    quaternion_to_rotation,
    rotation_to_quaternion,
)
from .optimizer import Solution
from .simulator import (
    Dataset,
    Keyframe,
    NoiseConfig,
    OdometryEdge,
    TrajectoryConfig,
    WorldConfig,
    WorldLandmark,
)

SCHEMA_VERSION = 1
QUAT_DECIMALS = 12
_QUAT_STEP = 10.0**-QUAT_DECIMALS


class ParseError(ValueError):
    """Malformed input; the message names the file position or field path."""


class SchemaVersionMismatch(ParseError):
    pass


# ---------------------------------------------------------------------------
# Deterministic JSON emitter
# ---------------------------------------------------------------------------


def _float17(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"cannot serialise non-finite value {x}")
    s = "%.17g" % x
    # keep it a JSON number that reads back as a float
    if not any(c in s for c in ".en"):
        s += ".0"
    return s


def _emit(obj, indent: int, level: int, out: list[str]) -> None:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, bool) or obj is None:
        out.append(json.dumps(obj))
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(_float17(obj))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, np.ndarray):
        _emit(obj.tolist(), indent, level, out)
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        for i, (k, v) in enumerate(obj.items()):
            out.append(pad + json.dumps(str(k)) + ": ")
            _emit(v, indent, level + 1, out)
            out.append(",\n" if i + 1 < len(obj) else "\n")
        out.append(end + "}")
    elif isinstance(obj, (list, tuple)):
        if all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool) for v in obj):
            # numeric rows stay on one line
            parts: list[str] = []
            for v in obj:
                _emit(v, indent, level, parts)
            out.append("[" + ", ".join(parts) + "]")
            return
        out.append("[\n")
        for i, v in enumerate(obj):
            out.append(pad)
            _emit(v, indent, level + 1, out)
            out.append(",\n" if i + 1 < len(obj) else "\n")
        out.append(end + "]")
    else:
        raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(obj, indent: int = 1) -> str:
    out: list[str] = []
    _emit(obj, indent, 0, out)
    out.append("\n")
    return "".join(out)


def _write_text(path, text: str) -> int:
    data = text.encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return len(data)


def _load_json(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror or exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: top level must be an object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"{path}: schema_version {version!r}, expected {SCHEMA_VERSION}")
    return doc


class _Reader:
    """Field access that reports the JSON path of whatever is missing or malformed."""

    def __init__(self, source):
        self.source = source

    def fail(self, where: str, msg: str):
        raise ParseError(f"{self.source}: {where}: {msg}")

    def get(self, obj, key, where):
        if not isinstance(obj, dict):
            self.fail(where, "expected an object")
        if key not in obj:
            self.fail(f"{where}.{key}", "missing")
        return obj[key]

    def num(self, obj, key, where) -> float:
        v = self.get(obj, key, where)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(f"{where}.{key}", f"expected a number, got {type(v).__name__}")
        return float(v)

    def int(self, obj, key, where) -> int:
        v = self.get(obj, key, where)
        if isinstance(v, bool) or not isinstance(v, int):
            self.fail(f"{where}.{key}", "expected an integer")
        return v

    def list(self, obj, key, where) -> list:
        v = self.get(obj, key, where)
        if not isinstance(v, list):
            self.fail(f"{where}.{key}", "expected a list")
        return v

    def array(self, obj, key, where, shape=None) -> np.ndarray:
        v = self.get(obj, key, where)
        try:
            a = np.array(v, dtype=float)
        except (TypeError, ValueError):
            self.fail(f"{where}.{key}", "expected a numeric array")
        if a.dtype == object or (shape is not None and a.shape != shape):
            self.fail(f"{where}.{key}", f"expected shape {shape}, got {a.shape}")
        return a

    def build(self, where, fn, *args, **kw):
        try:
            return fn(*args, **kw)
        except (ValueError, TypeError, KeyError) as exc:
            self.fail(where, str(exc))


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def _pose_obj(x: Se3Pose) -> dict:
    return {"rotation": x.rotation, "translation": x.translation}


def _read_pose(rd: _Reader, obj, where) -> Se3Pose:
    r = rd.array(obj, "rotation", where, (3, 3))
    t = rd.array(obj, "translation", where, (3,))
    return rd.build(where, Se3Pose, r, t)


def _feature_obj(f: EncodedFeature) -> dict:
    return {
        "mu_sc": f.mu_sc,
        "mu_si": f.mu_si,
        "sigma_s": f.sigma_s,
        "mu_sv": f.mu_sv.as_vector(),
        "sigma_sv": f.sigma_sv,
    }


def _read_feature(rd: _Reader, obj, where) -> EncodedFeature:
    mu_sv = TrigOrientation.from_vector(rd.array(obj, "mu_sv", where, (6,)))
    return rd.build(
        where,
        EncodedFeature,
        rd.array(obj, "mu_sc", where),
        rd.array(obj, "mu_si", where),
        rd.num(obj, "sigma_s", where),
        mu_sv,
        rd.array(obj, "sigma_sv", where, (6,)),
    )


def dataset_to_dict(d: Dataset) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "meta": {
            "seed": d.seed,
            "world": asdict(d.world),
            "trajectory": asdict(d.trajectory_config),
            "noise": asdict(d.noise),
        },
        "prototypes": {
            "dim_c": d.prototypes.dim_c,
            "dim_i": d.prototypes.dim_i,
            "entries": [
                {"category_id": p.category_id, "instance_id": p.instance_id, "mu_c": p.mu_c, "mu_i": p.mu_i}
                for p in d.prototypes.entries
            ],
        },
        "ground_truth": {
            "poses": [_pose_obj(x) for x in d.trajectory],
            "landmarks": [
                {
                    "id": l.id,
                    "position": l.position,
                    "orientation": l.orientation.as_array(),
                    "category_id": l.category_id,
                    "instance_id": l.instance_id,
                }
                for l in d.landmarks
            ],
        },
        "odometry": [
            {"source": e.source, "target": e.target, **_pose_obj(e.measurement), "sigma": e.sigma}
            for e in d.odometry
        ],
        "keyframes": [
            {
                "frame": k.frame,
                "detections": [
                    {
                        "coord": det.coord,
                        "sigma_t": det.sigma_t,
                        "landmark_id": det.landmark_id,
                        "feature": _feature_obj(det.feature),
                    }
                    for det in k.detections
                ],
            }
            for k in d.keyframes
        ],
    }


def _config(rd: _Reader, obj, key, where, cls):
    v = rd.get(obj, key, where)
    if not isinstance(v, dict):
        rd.fail(f"{where}.{key}", "expected an object")
    return rd.build(f"{where}.{key}", cls, **v)


def dataset_from_dict(doc: dict, source="<dataset>") -> Dataset:
    rd = _Reader(source)
    meta = rd.get(doc, "meta", "$")
    world = _config(rd, meta, "world", "meta", WorldConfig)
    traj_cfg = _config(rd, meta, "trajectory", "meta", TrajectoryConfig)
    noise = _config(rd, meta, "noise", "meta", NoiseConfig)

    pr = rd.get(doc, "prototypes", "$")
    entries = []
    for i, e in enumerate(rd.list(pr, "entries", "prototypes")):
        w = f"prototypes.entries[{i}]"
        entries.append(
            rd.build(w, LabelPrototype, rd.int(e, "category_id", w), rd.int(e, "instance_id", w),
                     rd.array(e, "mu_c", w), rd.array(e, "mu_i", w))
        )
    table = rd.build("prototypes", PrototypeTable, rd.int(pr, "dim_c", "prototypes"),
                     rd.int(pr, "dim_i", "prototypes"), tuple(entries))

    gt = rd.get(doc, "ground_truth", "$")
    poses = [_read_pose(rd, p, f"ground_truth.poses[{i}]") for i, p in enumerate(rd.list(gt, "poses", "ground_truth"))]
    landmarks = []
    for i, l in enumerate(rd.list(gt, "landmarks", "ground_truth")):
        w = f"ground_truth.landmarks[{i}]"
        ori = rd.array(l, "orientation", w, (3,))
        landmarks.append(
            rd.build(w, WorldLandmark, rd.int(l, "id", w), rd.array(l, "position", w, (3,)),
                     EulerAngle(*ori), rd.int(l, "category_id", w), rd.int(l, "instance_id", w))
        )

    odometry = []
    for i, e in enumerate(rd.list(doc, "odometry", "$")):
        w = f"odometry[{i}]"
        odometry.append(
            rd.build(w, OdometryEdge, rd.int(e, "source", w), rd.int(e, "target", w),
                     _read_pose(rd, e, w), rd.array(e, "sigma", w, (6,)))
        )

    keyframes = []
    for i, k in enumerate(rd.list(doc, "keyframes", "$")):
        w = f"keyframes[{i}]"
        frame = rd.int(k, "frame", w)
        if not 0 <= frame < len(poses):
            rd.fail(f"{w}.frame", f"frame {frame} outside the trajectory")
        dets = []
        for j, det in enumerate(rd.list(k, "detections", w)):
            wd = f"{w}.detections[{j}]"
            lid = rd.get(det, "landmark_id", wd)
            if lid is not None and (isinstance(lid, bool) or not isinstance(lid, int)):
                rd.fail(f"{wd}.landmark_id", "expected an integer or null")
            feat = _read_feature(rd, rd.get(det, "feature", wd), f"{wd}.feature")
            dets.append(rd.build(wd, Detection, frame, rd.array(det, "coord", wd, (3,)), feat,
                                 rd.num(det, "sigma_t", wd), lid))
        keyframes.append(Keyframe(frame, tuple(dets)))

    if len(odometry) != max(len(poses) - 1, 0):
        rd.fail("odometry", f"{len(odometry)} edges for {len(poses)} poses")
    seed = rd.int(meta, "seed", "meta")
    return Dataset(table, poses, landmarks, odometry, keyframes, world, traj_cfg, noise, seed)


def write_dataset(d: Dataset, path) -> int:
    """Write ``d`` as JSON; returns the number of bytes written."""
    return _write_text(path, dumps(dataset_to_dict(d)))


def read_dataset(path) -> Dataset:
    return dataset_from_dict(_load_json(path), path)


def read_config(path) -> tuple[WorldConfig, TrajectoryConfig, NoiseConfig]:
    """Simulation config: one JSON object with optional ``world``, ``trajectory`` and ``noise`` sections."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    rd = _Reader(path)
    if not isinstance(doc, dict):
        rd.fail("$", "expected an object")
    unknown = set(doc) - {"world", "trajectory", "noise"}
    if unknown:
        rd.fail("$", f"unknown sections {sorted(unknown)}")
    out = []
    for key, cls in (("world", WorldConfig), ("trajectory", TrajectoryConfig), ("noise", NoiseConfig)):
        out.append(_config(rd, doc, key, "$", cls) if key in doc else cls())
    return tuple(out)


# ---------------------------------------------------------------------------
# Solutions
# ---------------------------------------------------------------------------


def solution_to_dict(s: Solution) -> dict:
    cats = s.landmark_categories or [None] * len(s.landmarks)
    return {
        "schema_version": SCHEMA_VERSION,
        "closed_loop": s.closed_loop,
        "trajectory": [_pose_obj(x) for x in s.trajectory],
        "landmarks": [
            {
                "id": l.id,
                "position": l.position,
                "orientation": l.orientation.as_array(),
                "category": c,
                "feature_c": l.feature_c,
                "feature_i": l.feature_i,
            }
            for l, c in zip(s.landmarks, cats)
        ],
        "cost_history": list(s.cost_history),
        "lm_cost_histories": [list(h) for h in s.lm_cost_histories],
        "weights": [
            {
                "frame": f,
                "landmark_ids": list(w.landmark_ids),
                "unassigned": list(w.unassigned),
                "matrix": [list(row) for row in w.weights],
            }
            for f, w in sorted(s.final_weights.items())
        ],
    }


def write_solution(s: Solution, path) -> int:
    return _write_text(path, dumps(solution_to_dict(s)))


def read_solution(path) -> Solution:
    doc = _load_json(path)
    rd = _Reader(path)
    traj = [_read_pose(rd, p, f"trajectory[{i}]") for i, p in enumerate(rd.list(doc, "trajectory", "$"))]
    landmarks, cats = [], []
    for i, l in enumerate(rd.list(doc, "landmarks", "$")):
        w = f"landmarks[{i}]"
        ori = rd.array(l, "orientation", w, (3,))
        landmarks.append(
            rd.build(w, Landmark, rd.int(l, "id", w), rd.array(l, "position", w, (3,)), EulerAngle(*ori),
                     rd.array(l, "feature_c", w), rd.array(l, "feature_i", w))
        )
        c = rd.get(l, "category", w)
        cats.append(-1 if c is None else int(c))
    weights = {}
    for i, e in enumerate(rd.list(doc, "weights", "$")):
        w = f"weights[{i}]"
        f = rd.int(e, "frame", w)
        mat = np.array(rd.get(e, "matrix", w), dtype=float)
        ids = tuple(int(v) for v in rd.list(e, "landmark_ids", w))
        if mat.size and (mat.ndim != 2 or mat.shape[1] != len(ids)):
            rd.fail(f"{w}.matrix", "shape does not match landmark_ids")
        weights[f] = WeightMatrix(f, mat.reshape(-1, len(ids)), ids, tuple(int(v) for v in rd.list(e, "unassigned", w)))
    closed = rd.get(doc, "closed_loop", "$")
    if not isinstance(closed, bool):
        rd.fail("closed_loop", "expected a boolean")
    return Solution(
        trajectory=traj,
        landmarks=landmarks,
        final_weights=weights,
        cost_history=[float(v) for v in rd.list(doc, "cost_history", "$")],
        lm_cost_histories=[[float(v) for v in h] for h in rd.list(doc, "lm_cost_histories", "$")],
        landmark_categories=cats,
        closed_loop=closed,
    )


# ---------------------------------------------------------------------------
# Trajectory text format
# ---------------------------------------------------------------------------


def _fmt_exact(x: float) -> str:
    s = repr(float(x) + 0.0)
    return s[:-2] if s.endswith(".0") else s


def _fmt_quat(x: float) -> str:
    s = ("%.*f" % (QUAT_DECIMALS, x)).rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def _to_grid(q: np.ndarray) -> np.ndarray:
    return np.array([float(_fmt_quat(v)) for v in q])


def _grid_stable(g: np.ndarray) -> bool:
    # re-reading g and re-gridding the recovered rotation must land on g again
    back = _to_grid(rotation_to_quaternion(quaternion_to_rotation(g)))
    return bool(np.array_equal(back, g) or np.array_equal(back, -g))


# offsets (in grid steps) tried on the two largest components, nearest first
_OFFSETS = sorted(((a, b) for a in range(-3, 4) for b in range(-3, 4)), key=lambda m: (abs(m[0]) + abs(m[1]), m))


def canonical_quaternion(r: np.ndarray) -> np.ndarray:
    """Quaternion (qx, qy, qz, qw) of ``r`` on the text grid, sign fixed so qw >= 0.

    Picks the grid point nearest the true quaternion whose rotation maps back
    onto the same grid point, so re-reading and re-exporting cannot move it.
    """
    g0 = _to_grid(rotation_to_quaternion(r))
    big = np.argsort(-np.abs(g0), kind="stable")[:2]
    for m in _OFFSETS:
        g = g0.copy()
        g[big] += np.array(m) * _QUAT_STEP
        g = _to_grid(g)
        if _grid_stable(g):
            break
    else:  # pragma: no cover - never observed
        raise RuntimeError("no stable quaternion grid point found")
    nz = np.flatnonzero(g)
    if g[3] < 0 or (g[3] == 0 and g[nz[0]] < 0):
        g = -g
    return g + 0.0


def format_trajectory_line(frame: int, x: Se3Pose) -> str:
    q = canonical_quaternion(x.rotation)
    fields = ["%.6f" % frame] + [_fmt_exact(v) for v in x.translation] + [_fmt_quat(v) for v in q]
    return " ".join(fields)


def export_trajectory(poses: list[Se3Pose], path) -> int:
    """One line per pose, timestamp = frame index."""
    return _write_text(path, "".join(format_trajectory_line(i, x) + "\n" for i, x in enumerate(poses)))


def parse_trajectory(text: str, source="<trajectory>") -> tuple[list[float], list[Se3Pose]]:
    stamps: list[float] = []
    poses: list[Se3Pose] = []
    if text and not text.endswith("\n"):
        raise ParseError(f"{source}: last line is not newline-terminated")
    for n, line in enumerate(text.splitlines(), start=1):
        fields = line.split(" ")
        if len(fields) != 8:
            raise ParseError(f"{source}:{n}: expected 8 fields, got {len(fields)}")
        try:
            vals = [float(v) for v in fields]
        except ValueError as exc:
            raise ParseError(f"{source}:{n}: {exc}") from exc
        if not all(math.isfinite(v) for v in vals):
            raise ParseError(f"{source}:{n}: non-finite value")
        if stamps and vals[0] <= stamps[-1]:
            raise ParseError(f"{source}:{n}: timestamps must increase strictly")
        q = np.array(vals[4:])
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ParseError(f"{source}:{n}: quaternion norm {np.linalg.norm(q):.9f} is not 1")
        stamps.append(vals[0])
        poses.append(Se3Pose(quaternion_to_rotation(q), np.array(vals[1:4])))
    return stamps, poses


def import_trajectory(path) -> list[Se3Pose]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror or exc}") from exc
    return parse_trajectory(text, path)[1]
