"""Synthetic worlds, loop trajectories and keyframe detections.

Detections are generated straight from the observation model: a noisy
robot-frame coordinate plus an encoding sampled by
:func:`varslam.generative.emulate_encoding`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .association import Detection, Landmark
from .generative import PrototypeTable, emulate_encoding, sample_prototypes
from .geometry import (
    EulerAngle,
    Se3Pose,
    euler_array_to_rotation,
    pose_from_xyz_yaw,
    rotation_to_euler,
    se3_compose,
    se3_exp,
    se3_inverse,
)

SHAPES = ("square_loop", "circle", "figure_eight")
# Deviations stored on measurements never go below these, so a noise-free
# dataset still yields finite whitened residuals.
MIN_ODOM_SIGMA = 1e-3
MIN_SIGMA_T = 1e-3


@dataclass
class WorldConfig:
    num_landmarks: int = 12
    arena_half_extent: float = 6.0
    height_half_extent: float = 0.5
    num_categories: int = 3
    instances_per_category: int = 2
    dim_c: int = 8
    dim_i: int = 8
    separation: float = 5.0
    # landmark elevations are drawn from [-max_elevation, max_elevation]
    max_elevation: float = math.pi / 4
    # this many landmarks share label (0, 0); the rest are uniform
    dominant_label_count: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.num_landmarks < 0 or self.arena_half_extent <= 0 or self.height_half_extent < 0:
            raise ValueError("world counts and extents must be non-negative")
        if not 0 <= self.dominant_label_count <= self.num_landmarks:
            raise ValueError("dominant_label_count must lie in [0, num_landmarks]")
        if not 0 <= self.max_elevation < math.pi / 2:
            raise ValueError("max_elevation must lie in [0, pi/2)")


@dataclass
class TrajectoryConfig:
    shape: str = "square_loop"
    side_or_radius: float = 8.0
    num_frames: int = 120
    keyframe_stride: int = 15
    height: float = 0.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown trajectory shape {self.shape!r}")
        if self.num_frames < 2 or self.keyframe_stride < 1 or self.side_or_radius <= 0:
            raise ValueError("need num_frames >= 2, keyframe_stride >= 1, positive size")


@dataclass
class NoiseConfig:
    odom_sigma_rot: float = 0.01
    odom_sigma_trans: float = 0.05
    sigma_t: float = 0.5
    sigma_enc: float = 0.3
    sigma_v: float = 0.05
    detection_range: float = 8.0
    fov_half_angle: float = math.pi / 3
    detection_prob: float = 1.0

    def __post_init__(self):
        vals = (self.odom_sigma_rot, self.odom_sigma_trans, self.sigma_t, self.sigma_enc,
                self.sigma_v, self.detection_range, self.fov_half_angle)
        if any(v < 0 for v in vals):
            raise ValueError("noise parameters must be non-negative")
        if not 0.0 <= self.detection_prob <= 1.0:
            raise ValueError("detection_prob must lie in [0, 1]")

    @classmethod
    def noiseless(cls, **kw) -> "NoiseConfig":
        base = dict(odom_sigma_rot=0.0, odom_sigma_trans=0.0, sigma_t=0.0, sigma_enc=0.0, sigma_v=0.0)
        base.update(kw)
        return cls(**base)


@dataclass(frozen=True, eq=False)
class WorldLandmark:
    id: int
    position: np.ndarray
    orientation: EulerAngle
    category_id: int
    instance_id: int

    def as_landmark(self, table: PrototypeTable) -> Landmark:
        p = table.lookup(self.category_id, self.instance_id)
        return Landmark(self.id, self.position, self.orientation, p.mu_c, p.mu_i)


@dataclass(frozen=True, eq=False)
class OdometryEdge:
    source: int
    target: int
    measurement: Se3Pose
    sigma: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sigma, dtype=float).reshape(6).copy()
        if np.any(s <= 0):
            raise ValueError("odometry deviations must be positive")
        s.setflags(write=False)
        object.__setattr__(self, "sigma", s)


@dataclass(frozen=True, eq=False)
class Keyframe:
    frame: int
    detections: tuple[Detection, ...] = ()


@dataclass(eq=False)
class Dataset:
    prototypes: PrototypeTable
    trajectory: list[Se3Pose]
    landmarks: list[WorldLandmark]
    odometry: list[OdometryEdge]
    keyframes: list[Keyframe]
    world: WorldConfig = field(default_factory=WorldConfig)
    trajectory_config: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seed: int = 0

    @property
    def start_pose(self) -> Se3Pose:
        """Known start pose; fixes the gauge of the estimation problem."""
        return self.trajectory[0]

    @property
    def num_detections(self) -> int:
        return sum(len(k.detections) for k in self.keyframes)


def _world_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0])


def _sim_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1])


def generate_world(cfg: WorldConfig) -> tuple[PrototypeTable, list[WorldLandmark]]:
    rng = _world_rng(cfg.seed)
    table = sample_prototypes(
        cfg.num_categories, cfg.instances_per_category, cfg.dim_c, cfg.dim_i, cfg.separation, rng
    )
    labels = table.labels
    n = cfg.num_landmarks
    xy = rng.uniform(-cfg.arena_half_extent, cfg.arena_half_extent, size=(n, 2))
    z = rng.uniform(-cfg.height_half_extent, cfg.height_half_extent, size=n)
    az = rng.uniform(-math.pi, math.pi, size=n)
    el = rng.uniform(-cfg.max_elevation, cfg.max_elevation, size=n)
    inp = rng.uniform(-math.pi, math.pi, size=n)
    label_idx = rng.integers(0, len(labels), size=n)
    label_idx[: cfg.dominant_label_count] = 0
    landmarks = [
        WorldLandmark(
            id=j,
            position=np.array([xy[j, 0], xy[j, 1], z[j]]),
            orientation=EulerAngle(az[j], el[j], inp[j]),
            category_id=labels[label_idx[j]][0],
            instance_id=labels[label_idx[j]][1],
        )
        for j in range(n)
    ]
    return table, landmarks


def trajectory_pose_at(cfg: TrajectoryConfig, k: float) -> Se3Pose:
    """Pose at (possibly fractional) frame index ``k``; period ``num_frames``."""
    u = (k / cfg.num_frames) % 1.0
    s = cfg.side_or_radius
    if cfg.shape == "square_loop":
        d = u * 4.0 * s
        edge = int(math.floor(d / s + 1e-9)) % 4
        frac = d - edge * s
        corners = [(-s / 2, -s / 2), (s / 2, -s / 2), (s / 2, s / 2), (-s / 2, s / 2)]
        dirs = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)]
        cx, cy = corners[edge]
        dx, dy = dirs[edge]
        return pose_from_xyz_yaw(cx + frac * dx, cy + frac * dy, cfg.height, math.atan2(dy, dx))
    theta = 2.0 * math.pi * u
    if cfg.shape == "circle":
        return pose_from_xyz_yaw(s * math.cos(theta), s * math.sin(theta), cfg.height, theta + math.pi / 2)
    # figure eight (lemniscate of Gerono), crossing the origin at theta = 0 and pi
    x, y = s * math.sin(theta), 0.5 * s * math.sin(2.0 * theta)
    dx, dy = s * math.cos(theta), s * math.cos(2.0 * theta)
    return pose_from_xyz_yaw(x, y, cfg.height, math.atan2(dy, dx))


def generate_trajectory(cfg: TrajectoryConfig) -> list[Se3Pose]:
    return [trajectory_pose_at(cfg, k) for k in range(cfg.num_frames)]


def keyframe_indices(num_frames: int, stride: int) -> list[int]:
    return list(range(0, num_frames, stride))


def is_visible(pose: Se3Pose, point, noise: NoiseConfig) -> bool:
    """Range and view-cone test; the camera looks along the body x axis."""
    rel = pose.rotation.T @ (np.asarray(point, dtype=float) - pose.translation)
    dist = float(np.linalg.norm(rel))
    if dist > noise.detection_range:
        return False
    if dist == 0.0:
        return True
    return math.acos(max(-1.0, min(1.0, rel[0] / dist))) <= noise.fov_half_angle


def integrate_odometry(start: Se3Pose, edges: list[OdometryEdge]) -> list[Se3Pose]:
    poses = [start]
    for e in edges:
        poses.append(se3_compose(poses[-1], e.measurement))
    return poses


def simulate(
    world: tuple[PrototypeTable, list[WorldLandmark]],
    trajectory: list[Se3Pose],
    noise: NoiseConfig,
    seed: int,
    stride: int = 15,
    world_cfg: WorldConfig | None = None,
    trajectory_cfg: TrajectoryConfig | None = None,
) -> Dataset:
    table, landmarks = world
    rng = _sim_rng(seed)

    odom_sigma = np.maximum(
        [noise.odom_sigma_rot] * 3 + [noise.odom_sigma_trans] * 3, MIN_ODOM_SIGMA
    )
    noise_sigma = np.array([noise.odom_sigma_rot] * 3 + [noise.odom_sigma_trans] * 3)
    odometry = []
    for t in range(len(trajectory) - 1):
        rel = se3_compose(se3_inverse(trajectory[t]), trajectory[t + 1])
        xi = noise_sigma * rng.standard_normal(6)
        odometry.append(OdometryEdge(t, t + 1, se3_compose(rel, se3_exp(xi)), odom_sigma))

    lm_rot = euler_array_to_rotation(np.array([l.orientation.as_array() for l in landmarks])) if landmarks else []
    sigma_t = max(noise.sigma_t, MIN_SIGMA_T)
    keyframes = []
    for f in keyframe_indices(len(trajectory), stride):
        x = trajectory[f]
        dets = []
        for l, r_l in zip(landmarks, lm_rot):
            if not is_visible(x, l.position, noise):
                continue
            if rng.random() >= noise.detection_prob:
                continue
            coord = x.rotation.T @ (l.position - x.translation) + noise.sigma_t * rng.standard_normal(3)
            rel = rotation_to_euler(x.rotation.T @ r_l)
            proto = table.lookup(l.category_id, l.instance_id)
            feat = emulate_encoding(proto, rel, noise.sigma_enc, noise.sigma_v, rng)
            dets.append(Detection(f, coord, feat, sigma_t, landmark_id=l.id))
        order = rng.permutation(len(dets))
        keyframes.append(Keyframe(f, tuple(dets[i] for i in order)))

    return Dataset(
        prototypes=table,
        trajectory=list(trajectory),
        landmarks=list(landmarks),
        odometry=odometry,
        keyframes=keyframes,
        world=world_cfg if world_cfg is not None else WorldConfig(num_landmarks=len(landmarks)),
        trajectory_config=trajectory_cfg if trajectory_cfg is not None else TrajectoryConfig(
            num_frames=max(len(trajectory), 2), keyframe_stride=stride
        ),
        noise=noise,
        seed=seed,
    )


def make_dataset(world: WorldConfig, traj: TrajectoryConfig, noise: NoiseConfig, seed: int | None = None) -> Dataset:
    """World, trajectory and measurements from configs; ``seed`` overrides ``world.seed``."""
    if seed is not None:
        world = WorldConfig(**{**world.__dict__, "seed": seed})
    table_and_landmarks = generate_world(world)
    return simulate(
        table_and_landmarks,
        generate_trajectory(traj),
        noise,
        world.seed,
        stride=traj.keyframe_stride,
        world_cfg=world,
        trajectory_cfg=traj,
    )
