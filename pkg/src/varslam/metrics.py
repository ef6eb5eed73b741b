"""Trajectory error metrics (ATE / RPE)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Se3Pose, se3_compose, se3_inverse


class LengthMismatch(ValueError):
    pass


@dataclass
class MetricReport:
    ate_rmse: float
    rpe_rmse: float
    ate_errors: np.ndarray
    rpe_errors: np.ndarray


def rigid_alignment(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation and translation (no scale) taking ``src`` points onto ``dst``."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s)
    u, _, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    r = u @ s @ vt
    return r, mu_d - r @ mu_s


def _positions(poses) -> np.ndarray:
    return np.array([p.translation for p in poses], dtype=float).reshape(-1, 3)


def ate_errors(estimated: list[Se3Pose], ground_truth: list[Se3Pose]) -> np.ndarray:
    if len(estimated) != len(ground_truth):
        raise LengthMismatch(f"{len(estimated)} estimated vs {len(ground_truth)} ground-truth poses")
    if not estimated:
        raise LengthMismatch("trajectories are empty")
    est, gt = _positions(estimated), _positions(ground_truth)
    r, t = rigid_alignment(est, gt)
    return np.linalg.norm(est @ r.T + t - gt, axis=1)


def ate(estimated: list[Se3Pose], ground_truth: list[Se3Pose]) -> float:
    """Translational RMSE after rigid alignment of the estimate onto ground truth."""
    e = ate_errors(estimated, ground_truth)
    return float(np.sqrt(np.mean(e**2)))


def rpe_errors(estimated: list[Se3Pose], ground_truth: list[Se3Pose], delta_frames: int = 1) -> np.ndarray:
    if len(estimated) != len(ground_truth):
        raise LengthMismatch(f"{len(estimated)} estimated vs {len(ground_truth)} ground-truth poses")
    if delta_frames < 1 or len(estimated) <= delta_frames:
        raise LengthMismatch(f"need more than {delta_frames} poses for this frame gap")
    out = []
    for i in range(len(estimated) - delta_frames):
        j = i + delta_frames
        est_rel = se3_compose(se3_inverse(estimated[i]), estimated[j])
        gt_rel = se3_compose(se3_inverse(ground_truth[i]), ground_truth[j])
        out.append(np.linalg.norm(se3_compose(se3_inverse(gt_rel), est_rel).translation))
    return np.array(out)


def rpe(estimated: list[Se3Pose], ground_truth: list[Se3Pose], delta_frames: int = 1) -> float:
    e = rpe_errors(estimated, ground_truth, delta_frames)
    return float(np.sqrt(np.mean(e**2)))


def evaluate(estimated, ground_truth, delta_frames: int = 1) -> MetricReport:
    a = ate_errors(estimated, ground_truth)
    r = rpe_errors(estimated, ground_truth, delta_frames)
    return MetricReport(float(np.sqrt(np.mean(a**2))), float(np.sqrt(np.mean(r**2))), a, r)
