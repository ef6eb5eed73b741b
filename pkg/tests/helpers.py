"""Shared builders for graph and dataset tests."""

import numpy as np

from varslam.association import Detection, Landmark, WeightMatrix
from varslam.generative import EncodedFeature
from varslam.geometry import EulerAngle, TrigOrientation, se3_compose, se3_exp
from varslam.optimizer import PoseFeatureGraph, graph_from_dataset
from varslam.simulator import NoiseConfig, OdometryEdge, TrajectoryConfig, WorldConfig, make_dataset


def noiseless_dataset(num_landmarks=6, num_frames=120, stride=15, seed=0, **noise_kw):
    world = WorldConfig(num_landmarks=num_landmarks, num_categories=3, seed=seed)
    traj = TrajectoryConfig(num_frames=num_frames, keyframe_stride=stride)
    return make_dataset(world, traj, NoiseConfig.noiseless(**noise_kw))


def ground_truth_graph(ds, trajectory=None) -> PoseFeatureGraph:
    """Graph at the true landmarks with the true (one-hot) associations."""
    g = graph_from_dataset(ds, trajectory if trajectory is not None else ds.trajectory)
    g.landmark_nodes = [l.as_landmark(ds.prototypes) for l in ds.landmarks]
    ids = tuple(l.id for l in g.landmark_nodes)
    for k in ds.keyframes:
        if not k.detections:
            continue
        w = np.zeros((len(k.detections), len(ids)))
        for i, d in enumerate(k.detections):
            w[i, ids.index(d.landmark_id)] = 1.0
        g.weight_matrices[k.frame] = WeightMatrix(k.frame, w, ids)
    return g


def perturb_trajectory(poses, rng, max_norm=0.05):
    """Right-perturb every pose but the first by a random twist of norm <= max_norm."""
    out = [poses[0]]
    for x in poses[1:]:
        xi = rng.normal(size=6)
        xi *= rng.uniform(0, max_norm) / np.linalg.norm(xi)
        out.append(se3_compose(x, se3_exp(xi)))
    return out


def random_graph(rng, n_poses=4, n_landmarks=3, dim=3, use_weights=True):
    """Small random graph with soft weights, for cost and Jacobian checks."""
    poses = [se3_exp(np.concatenate([rng.normal(size=3) * 0.4, rng.normal(size=3) * 2])) for _ in range(n_poses)]
    lms = [
        Landmark(j, rng.normal(size=3) * 3, EulerAngle(*rng.uniform(-1, 1, 3)), rng.normal(size=dim), rng.normal(size=dim))
        for j in range(n_landmarks)
    ]
    odo = [
        OdometryEdge(t, t + 1, se3_exp(rng.normal(size=6) * 0.3), rng.uniform(0.05, 0.5, 6))
        for t in range(n_poses - 1)
    ]
    edges, wms = [], {}
    for f in range(1, n_poses):
        k = int(rng.integers(1, n_landmarks + 1))
        dets = []
        for _ in range(k):
            sv = TrigOrientation.from_vector(rng.normal(size=6) * 0.6)
            feat = EncodedFeature(rng.normal(size=dim), rng.normal(size=dim), 0.5, sv)
            dets.append(Detection(f, rng.normal(size=3) * 2, feat, rng.uniform(0.2, 1.0)))
        edges += [(f, d) for d in dets]
        w = rng.dirichlet(np.ones(n_landmarks), size=k) if use_weights else np.eye(n_landmarks)[:k]
        wms[f] = WeightMatrix(f, w, tuple(range(n_landmarks)))
    return PoseFeatureGraph(poses, lms, odo, edges, wms)

