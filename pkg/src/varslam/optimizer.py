"""M-steps and the outer EM loop.

Pose step: Levenberg-Marquardt over robot poses and landmark poses on the
weighted objective

    1/2 sum_odom |r_odom|^2 + 1/2 sum_{t,k,j} w_kj^t (|r_trans|^2 + |r_orient|^2)

with the first robot pose held fixed. Jacobians are central differences
taken per edge side, so each of the 24 stencil evaluations covers every
edge at once.

Feature step: each landmark's shape feature becomes the weight-normalised
mean of the encodings associated with it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
from scipy.stats import chi2

from .association import (
    MAX_EXACT_DETECTIONS,
    MAX_EXACT_LANDMARKS,
    Detection,
    Landmark,
    WeightMatrix,
    exact_is_feasible,
    exact_weights_from_loglik,
    exact_weights_with_null,
    factored_weights_from_loglik,
    log_likelihood_matrix,
    prune_weights,
)
from .generative import DEFAULT_VARIANCE_FLOOR
from .geometry import (
    GeometryError,
    Se3Pose,
    hat,
    attenuation,
    euler_array_to_rotation,
    interleave,
    rotation_to_euler,
    rotation_to_euler_array,
    se3_exp_arrays,
    se3_log_arrays,
    so3_exp,
    trig_decode,
    trig_prior,
)
from .simulator import Dataset, OdometryEdge, integrate_odometry

log = logging.getLogger(__name__)

# two-sided 4-sigma tail mass of a standard normal
FOUR_SIGMA_TAIL = 6.334248366623996e-05
MAX_DAMPING = 1e8


class SingularNormalEquations(RuntimeError):
    pass


@dataclass
class SolverConfig:
    max_gn_iters: int = 50
    max_em_iters: int = 10
    lm_damping_init: float = 1e-4
    cost_tolerance: float = 1e-6
    delta_prune: float = 1e-3
    sigma_v: float = 0.05
    # Spawn a landmark when a detection's best normalised log-likelihood
    # (-1/2 Mahalanobis^2) falls below this. None: the 4-sigma chi-square
    # gate for the detection's total residual dimension.
    spawn_threshold: float | None = None
    variance_floor: float = DEFAULT_VARIANCE_FLOOR
    assoc: str = "exact"
    use_orientation: bool = True
    jacobian_step: float = 1e-6

    def __post_init__(self):
        if self.max_gn_iters < 1 or self.max_em_iters < 1:
            raise ValueError("iteration limits must be positive")
        if self.lm_damping_init <= 0 or self.cost_tolerance <= 0 or self.variance_floor <= 0:
            raise ValueError("damping, tolerance and variance floor must be positive")
        if not 0.0 <= self.delta_prune < 1.0:
            raise ValueError("delta_prune must lie in [0, 1)")
        if self.sigma_v < 0:
            raise ValueError("sigma_v must be non-negative")
        if self.assoc not in ("exact", "factored"):
            raise ValueError("assoc must be 'exact' or 'factored'")

    def gate(self, dim_c: int, dim_i: int) -> float:
        if self.spawn_threshold is not None:
            return self.spawn_threshold
        dof = 3 + (6 if self.use_orientation else 0) + dim_c + dim_i
        return -0.5 * float(chi2.isf(FOUR_SIGMA_TAIL, dof))


@dataclass
class PoseFeatureGraph:
    robot_nodes: list[Se3Pose]
    landmark_nodes: list[Landmark]
    odometry_edges: list[OdometryEdge]
    detection_edges: list[tuple[int, Detection]]
    # keyed by keyframe (frame index); rows follow detection order, columns
    # follow landmark_nodes
    weight_matrices: dict[int, WeightMatrix] = field(default_factory=dict)

    def keyframes(self) -> list[int]:
        return sorted({f for f, _ in self.detection_edges})

    def detections_at(self, frame: int) -> list[Detection]:
        return [d for f, d in self.detection_edges if f == frame]

    def copy(self) -> "PoseFeatureGraph":
        return PoseFeatureGraph(
            list(self.robot_nodes),
            list(self.landmark_nodes),
            list(self.odometry_edges),
            list(self.detection_edges),
            dict(self.weight_matrices),
        )


@dataclass
class Solution:
    trajectory: list[Se3Pose]
    landmarks: list[Landmark]
    final_weights: dict[int, WeightMatrix]
    cost_history: list[float]
    lm_cost_histories: list[list[float]] = field(default_factory=list)
    landmark_categories: list[int] = field(default_factory=list)
    closed_loop: bool = False


# ---------------------------------------------------------------------------
# Single-edge residuals
# ---------------------------------------------------------------------------


def translation_residual(x: Se3Pose, t_j, s_t, sigma_t: float) -> np.ndarray:
    return (x.rotation.T @ (np.asarray(t_j, dtype=float) - x.translation) - np.asarray(s_t, dtype=float)) / sigma_t


def orientation_residual(
    x: Se3Pose,
    v_j,
    mu_sv,
    sigma_v: float,
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
    variance: np.ndarray | None = None,
) -> np.ndarray:
    """Whitened trig residual of an encoding against landmark orientation ``v_j``.

    ``v_j`` is an EulerAngle or a rotation matrix. ``variance`` overrides the
    analytic variance (the optimizer freezes it during a pose step).
    """
    r_l = v_j if isinstance(v_j, np.ndarray) and v_j.shape == (3, 3) else euler_array_to_rotation(v_j.as_array())
    rel = rotation_to_euler_array(x.rotation.T @ r_l)
    mean, var = trig_prior(rel, sigma_v, variance_floor)
    if variance is not None:
        var = np.asarray(variance, dtype=float)
    vec = mu_sv.as_vector() if hasattr(mu_sv, "as_vector") else np.asarray(mu_sv, dtype=float)
    return (vec - mean) / np.sqrt(var)


def odometry_residual(x_t: Se3Pose, x_next: Se3Pose, z_rel: Se3Pose, sigma6) -> np.ndarray:
    zr = z_rel.rotation.T
    r = zr @ x_t.rotation.T @ x_next.rotation
    t = zr @ (x_t.rotation.T @ (x_next.translation - x_t.translation) - z_rel.translation)
    return se3_log_arrays(r, t) / np.asarray(sigma6, dtype=float)


# ---------------------------------------------------------------------------
# Batched problem
# ---------------------------------------------------------------------------


@dataclass
class _State:
    rot: np.ndarray  # (N, 3, 3) robot rotations
    trans: np.ndarray  # (N, 3)
    lrot: np.ndarray  # (M, 3, 3) landmark rotations
    lpos: np.ndarray  # (M, 3)

    @classmethod
    def from_graph(cls, g: PoseFeatureGraph) -> "_State":
        m = len(g.landmark_nodes)
        return cls(
            np.stack([x.rotation for x in g.robot_nodes]),
            np.stack([x.translation for x in g.robot_nodes]),
            np.stack([l.rotation for l in g.landmark_nodes]) if m else np.zeros((0, 3, 3)),
            np.stack([l.position for l in g.landmark_nodes]) if m else np.zeros((0, 3)),
        )

    def write_back(self, g: PoseFeatureGraph) -> PoseFeatureGraph:
        out = g.copy()
        out.robot_nodes = [Se3Pose(_orthonormalize(r), t) for r, t in zip(self.rot, self.trans)]
        out.landmark_nodes = [
            replace(l, position=p, orientation=rotation_to_euler(_orthonormalize(r)))
            for l, r, p in zip(g.landmark_nodes, self.lrot, self.lpos)
        ]
        return out


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


@dataclass
class _Edges:
    """Odometry and weighted detection edges in array form."""

    odo_src: np.ndarray
    odo_dst: np.ndarray
    z_rot_t: np.ndarray  # transpose of measured relative rotation
    z_trans: np.ndarray
    odo_sigma: np.ndarray
    det_frame: np.ndarray
    det_lm: np.ndarray
    sqrt_w: np.ndarray
    coord: np.ndarray
    sigma_t: np.ndarray
    mu_sv: np.ndarray
    std_v: np.ndarray  # frozen orientation deviations
    use_orientation: bool
    sigma_v: float

    @property
    def det_dim(self) -> int:
        return 9 if self.use_orientation else 3


def _build_edges(g: PoseFeatureGraph, state: _State, cfg: SolverConfig) -> _Edges:
    odo = g.odometry_edges
    frames, lms, ws, coords, sig_t, svs = [], [], [], [], [], []
    for f in g.keyframes():
        wm = g.weight_matrices.get(f)
        if wm is None:
            continue
        dets = g.detections_at(f)
        for k, d in enumerate(dets):
            for j in np.flatnonzero(wm.weights[k] > 0.0):
                frames.append(f)
                lms.append(int(j))
                ws.append(wm.weights[k, j])
                coords.append(d.coord)
                sig_t.append(d.sigma_t)
                svs.append(d.feature.mu_sv.as_vector())
    det_frame = np.array(frames, dtype=int)
    det_lm = np.array(lms, dtype=int)
    if len(frames):
        rel = rotation_to_euler_array(np.swapaxes(state.rot[det_frame], -1, -2) @ state.lrot[det_lm])
        _, var = trig_prior(rel, cfg.sigma_v, cfg.variance_floor)
    else:
        var = np.zeros((0, 6))
    return _Edges(
        odo_src=np.array([e.source for e in odo], dtype=int),
        odo_dst=np.array([e.target for e in odo], dtype=int),
        z_rot_t=np.stack([e.measurement.rotation.T for e in odo]) if odo else np.zeros((0, 3, 3)),
        z_trans=np.stack([e.measurement.translation for e in odo]) if odo else np.zeros((0, 3)),
        odo_sigma=np.stack([e.sigma for e in odo]) if odo else np.zeros((0, 6)),
        det_frame=det_frame,
        det_lm=det_lm,
        sqrt_w=np.sqrt(np.array(ws, dtype=float)),
        coord=np.array(coords, dtype=float).reshape(-1, 3),
        sigma_t=np.array(sig_t, dtype=float),
        mu_sv=np.array(svs, dtype=float).reshape(-1, 6),
        std_v=np.sqrt(var),
        use_orientation=cfg.use_orientation,
        sigma_v=cfg.sigma_v,
    )


def _odo_res(ra, ta, rb, tb, e: _Edges) -> np.ndarray:
    rat = np.swapaxes(ra, -1, -2)
    r = e.z_rot_t @ rat @ rb
    t = np.einsum("nij,nj->ni", e.z_rot_t, np.einsum("nij,nj->ni", rat, tb - ta) - e.z_trans)
    return se3_log_arrays(r, t) / e.odo_sigma


def _det_res(rx, tx, rl, pl, e: _Edges) -> np.ndarray:
    rxt = np.swapaxes(rx, -1, -2)
    res = (np.einsum("nij,nj->ni", rxt, pl - tx) - e.coord) / e.sigma_t[:, None]
    if e.use_orientation:
        rel = rotation_to_euler_array(rxt @ rl)
        a = attenuation(e.sigma_v)
        mean = interleave(a * np.cos(rel), a * np.sin(rel))
        res = np.concatenate([res, (e.mu_sv - mean) / e.std_v], axis=1)
    return res * e.sqrt_w[:, None]


def _residuals(s: _State, e: _Edges) -> np.ndarray:
    parts = []
    if len(e.odo_src):
        parts.append(_odo_res(s.rot[e.odo_src], s.trans[e.odo_src], s.rot[e.odo_dst], s.trans[e.odo_dst], e).ravel())
    if len(e.det_frame):
        parts.append(_det_res(s.rot[e.det_frame], s.trans[e.det_frame], s.lrot[e.det_lm], s.lpos[e.det_lm], e).ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def _perturb_pose(r, t, d: int, h: float):
    if d < 3:
        w = np.zeros(3)
        w[d] = h
        return r @ so3_exp(w), t
    return r, t + h * r[..., :, d - 3]


def _perturb_landmark(r, p, d: int, h: float):
    if d < 3:
        p = p.copy()
        p[..., d] += h
        return r, p
    w = np.zeros(3)
    w[d - 3] = h
    return r @ so3_exp(w), p


@dataclass
class _Layout:
    """Column offsets of the free variables."""

    robot_col: np.ndarray  # (N,), -1 for the anchor
    lm_col: np.ndarray  # (M,), -1 for landmarks without edges
    lm_dim: int
    size: int


def _layout(n_robot: int, n_lm: int, e: _Edges) -> _Layout:
    robot_col = np.full(n_robot, -1, dtype=int)
    robot_col[1:] = 6 * np.arange(n_robot - 1)
    lm_dim = 6 if e.use_orientation else 3
    active = np.zeros(n_lm, dtype=bool)
    active[e.det_lm] = True
    lm_col = np.full(n_lm, -1, dtype=int)
    base = 6 * (n_robot - 1)
    lm_col[active] = base + lm_dim * np.arange(int(active.sum()))
    return _Layout(robot_col, lm_col, lm_dim, base + lm_dim * int(active.sum()))


def _scatter(jac, row0: int, res_dim: int, cols: np.ndarray, block: np.ndarray):
    """Write per-edge derivative blocks (E, res_dim, nv) into the dense Jacobian."""
    nv = block.shape[2]
    ok = cols >= 0
    if not np.any(ok):
        return
    idx = np.flatnonzero(ok)
    rows = row0 + idx[:, None] * res_dim + np.arange(res_dim)[None, :]
    cc = cols[idx][:, None] + np.arange(nv)[None, :]
    jac[rows[:, :, None], cc[:, None, :]] = block[idx]


def _jacobian(s: _State, e: _Edges, lay: _Layout, h: float) -> np.ndarray:
    n_odo = len(e.odo_src)
    n_det = len(e.det_frame)
    n_res = 6 * n_odo + e.det_dim * n_det
    jac = np.zeros((n_res, lay.size))

    if n_odo:
        ra, ta = s.rot[e.odo_src], s.trans[e.odo_src]
        rb, tb = s.rot[e.odo_dst], s.trans[e.odo_dst]
        da = np.empty((n_odo, 6, 6))
        db = np.empty((n_odo, 6, 6))
        for d in range(6):
            rp, tp = _perturb_pose(ra, ta, d, h)
            rm, tm = _perturb_pose(ra, ta, d, -h)
            da[:, :, d] = (_odo_res(rp, tp, rb, tb, e) - _odo_res(rm, tm, rb, tb, e)) / (2 * h)
            rp, tp = _perturb_pose(rb, tb, d, h)
            rm, tm = _perturb_pose(rb, tb, d, -h)
            db[:, :, d] = (_odo_res(ra, ta, rp, tp, e) - _odo_res(ra, ta, rm, tm, e)) / (2 * h)
        _scatter(jac, 0, 6, lay.robot_col[e.odo_src], da)
        _scatter(jac, 0, 6, lay.robot_col[e.odo_dst], db)

    if n_det:
        rx, tx = s.rot[e.det_frame], s.trans[e.det_frame]
        rl, pl = s.lrot[e.det_lm], s.lpos[e.det_lm]
        dim = e.det_dim
        dx = np.empty((n_det, dim, 6))
        dl = np.empty((n_det, dim, lay.lm_dim))
        for d in range(6):
            rp, tp = _perturb_pose(rx, tx, d, h)
            rm, tm = _perturb_pose(rx, tx, d, -h)
            dx[:, :, d] = (_det_res(rp, tp, rl, pl, e) - _det_res(rm, tm, rl, pl, e)) / (2 * h)
        for d in range(lay.lm_dim):
            rp, pp = _perturb_landmark(rl, pl, d, h)
            rm, pm = _perturb_landmark(rl, pl, d, -h)
            dl[:, :, d] = (_det_res(rx, tx, rp, pp, e) - _det_res(rx, tx, rm, pm, e)) / (2 * h)
        row0 = 6 * n_odo
        _scatter(jac, row0, dim, lay.robot_col[e.det_frame], dx)
        _scatter(jac, row0, dim, lay.lm_col[e.det_lm], dl)
    return jac


def _retract(s: _State, delta: np.ndarray, lay: _Layout) -> _State:
    rot, trans = s.rot.copy(), s.trans.copy()
    free = lay.robot_col >= 0
    xi = delta[lay.robot_col[free][:, None] + np.arange(6)]
    dr, dt = se3_exp_arrays(xi)
    trans[free] = trans[free] + np.einsum("nij,nj->ni", rot[free], dt)
    rot[free] = rot[free] @ dr
    lrot, lpos = s.lrot.copy(), s.lpos.copy()
    act = lay.lm_col >= 0
    if np.any(act):
        dl = delta[lay.lm_col[act][:, None] + np.arange(lay.lm_dim)]
        lpos[act] += dl[:, :3]
        if lay.lm_dim == 6:
            lrot[act] = lrot[act] @ so3_exp(dl[:, 3:])
    return _State(rot, trans, lrot, lpos)


def build_jacobian(g: PoseFeatureGraph, cfg: SolverConfig, step: float | None = None):
    """Dense Jacobian and residual vector at the current graph state."""
    s = _State.from_graph(g)
    e = _build_edges(g, s, cfg)
    lay = _layout(len(g.robot_nodes), len(g.landmark_nodes), e)
    return _jacobian(s, e, lay, cfg.jacobian_step if step is None else step), _residuals(s, e)


def total_cost(g: PoseFeatureGraph, cfg: SolverConfig) -> float:
    s = _State.from_graph(g)
    r = _residuals(s, _build_edges(g, s, cfg))
    return 0.5 * float(r @ r)


def optimize_poses(g: PoseFeatureGraph, cfg: SolverConfig) -> tuple[PoseFeatureGraph, list[float]]:
    """Levenberg-Marquardt on robot and landmark poses; weights and variances frozen.

    Returns the updated graph and the cost after every accepted step (the
    first entry is the starting cost).
    """
    s = _State.from_graph(g)
    e = _build_edges(g, s, cfg)
    lay = _layout(len(g.robot_nodes), len(g.landmark_nodes), e)
    r = _residuals(s, e)
    cost = 0.5 * float(r @ r)
    history = [cost]
    if lay.size == 0:
        return g.copy(), history
    lam = cfg.lm_damping_init
    jac = _jacobian(s, e, lay, cfg.jacobian_step)
    for _ in range(cfg.max_gn_iters):
        hess = jac.T @ jac
        grad = jac.T @ r
        scale = np.maximum(np.diag(hess), 1e-12)
        accepted = False
        while lam <= MAX_DAMPING:
            try:
                c_and_l = scipy.linalg.cho_factor(hess + lam * np.diag(scale))
                step = -scipy.linalg.cho_solve(c_and_l, grad)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = _retract(s, step, lay)
            try:
                r_new = _residuals(trial, e)
            except GeometryError:
                lam *= 10.0
                continue
            new_cost = 0.5 * float(r_new @ r_new)
            if new_cost < cost:
                # the next linearization must also be evaluable (gimbal margin)
                try:
                    jac_new = _jacobian(trial, e, lay, cfg.jacobian_step)
                except GeometryError:
                    lam *= 10.0
                    continue
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            if not np.all(np.isfinite(grad)):
                raise SingularNormalEquations("non-finite gradient")
            if np.linalg.matrix_rank(hess + MAX_DAMPING * np.diag(scale)) < lay.size:
                raise SingularNormalEquations("normal equations rank-deficient at maximum damping")
            break
        decrease = cost - new_cost
        s, r, cost, jac = trial, r_new, new_cost, jac_new
        history.append(cost)
        lam = max(lam / 10.0, 1e-12)
        if decrease <= cfg.cost_tolerance * cost or cost < 1e-20:
            break
    return s.write_back(g), history


# ---------------------------------------------------------------------------
# Features, weights, spawning
# ---------------------------------------------------------------------------


def update_features(g: PoseFeatureGraph) -> tuple[PoseFeatureGraph, list[int]]:
    """Weighted-mean shape feature per landmark; returns ids left unchanged."""
    m = len(g.landmark_nodes)
    if m == 0:
        return g.copy(), []
    dim_c = g.landmark_nodes[0].feature_c.shape[0]
    acc = np.zeros((m, dim_c + g.landmark_nodes[0].feature_i.shape[0]))
    wsum = np.zeros(m)
    for f in g.keyframes():
        wm = g.weight_matrices.get(f)
        if wm is None:
            continue
        feats = np.stack([d.feature.shape_feature for d in g.detections_at(f)])
        w = wm.weights[:, :m]
        acc[: w.shape[1]] += w.T @ feats
        wsum[: w.shape[1]] += w.sum(axis=0)
    out = g.copy()
    skipped = []
    new_nodes = []
    for j, l in enumerate(g.landmark_nodes):
        if wsum[j] > 0:
            mu = acc[j] / wsum[j]
            new_nodes.append(replace(l, feature_c=mu[:dim_c], feature_i=mu[dim_c:]))
        else:
            skipped.append(l.id)
            new_nodes.append(l)
    out.landmark_nodes = new_nodes
    return out, skipped


def _keyframe_loglik(g, frame, cfg, normalized=False, landmarks=None, uncertainty=None):
    landmarks = g.landmark_nodes if landmarks is None else landmarks
    pos_cov, rot_var = uncertainty if uncertainty is not None else (None, None)
    return log_likelihood_matrix(
        g.detections_at(frame),
        landmarks,
        g.robot_nodes[frame],
        cfg.sigma_v,
        cfg.variance_floor,
        cfg.use_orientation,
        normalized=normalized,
        position_cov=pos_cov,
        orientation_var=rot_var,
    )


def association_uncertainty(g: PoseFeatureGraph, cfg: SolverConfig, frame: int) -> tuple[np.ndarray, np.ndarray]:
    """Predicted-observation uncertainty of every landmark seen from ``frame``.

    Inverts the Gauss-Newton normal equations at the current state and maps
    the joint covariance of pose ``frame`` and landmark ``j`` through the
    observation model. Returns the robot-frame position covariance (M, 3, 3)
    and the largest eigenvalue of the relative-rotation covariance (M,).
    Landmarks without edges get no extra uncertainty beyond the pose's.
    """
    m = len(g.landmark_nodes)
    pos_cov = np.zeros((m, 3, 3))
    rot_var = np.zeros(m)
    s = _State.from_graph(g)
    e = _build_edges(g, s, cfg)
    lay = _layout(len(g.robot_nodes), m, e)
    if lay.size == 0 or m == 0:
        return pos_cov, rot_var
    jac = _jacobian(s, e, lay, cfg.jacobian_step)
    hess = jac.T @ jac
    hess[np.diag_indices_from(hess)] += 1e-9 * np.maximum(np.diag(hess), 1e-12)
    try:
        cov = scipy.linalg.cho_solve(scipy.linalg.cho_factor(hess), np.eye(lay.size))
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(hess)

    rx, tx = s.rot[frame], s.trans[frame]
    xc = lay.robot_col[frame]
    for j in range(m):
        coord = rx.T @ (s.lpos[j] - tx)
        r_rel = rx.T @ s.lrot[j]
        cols, g_pos, g_rot = [], [], []
        if xc >= 0:
            # right perturbation of the pose: c -> exp(-w)(c - rho)
            cols.append(xc + np.arange(6))
            g_pos.append(np.hstack([hat(coord), -np.eye(3)]))
            g_rot.append(np.hstack([-np.eye(3), np.zeros((3, 3))]))
        lc = lay.lm_col[j]
        if lc >= 0:
            cols.append(lc + np.arange(lay.lm_dim))
            gp = np.zeros((3, lay.lm_dim))
            gp[:, :3] = rx.T
            gr = np.zeros((3, lay.lm_dim))
            if lay.lm_dim == 6:
                gr[:, 3:] = r_rel
            g_pos.append(gp)
            g_rot.append(gr)
        if not cols:
            continue
        idx = np.concatenate(cols)
        sub = cov[np.ix_(idx, idx)]
        gp, gr = np.hstack(g_pos), np.hstack(g_rot)
        pos_cov[j] = gp @ sub @ gp.T
        rot_var[j] = float(np.linalg.eigvalsh(gr @ sub @ gr.T)[-1])
    pos_cov = 0.5 * (pos_cov + np.swapaxes(pos_cov, -1, -2))
    return pos_cov, np.maximum(rot_var, 0.0)


def _weights_from_loglik(ll: np.ndarray, cfg: SolverConfig) -> np.ndarray:
    k, m = ll.shape
    if cfg.assoc == "exact" and exact_is_feasible(k, m):
        return exact_weights_from_loglik(ll)
    return factored_weights_from_loglik(ll)


def _weights_with_null(ll: np.ndarray, null_ll: np.ndarray, cfg: SolverConfig) -> tuple[np.ndarray, np.ndarray]:
    k, m = ll.shape
    if cfg.assoc == "exact" and k <= MAX_EXACT_DETECTIONS and m <= MAX_EXACT_LANDMARKS:
        return exact_weights_with_null(ll, null_ll)
    w = factored_weights_from_loglik(np.column_stack([ll, null_ll]))
    return w[:, :m], w[:, m]


def compute_weights(g: PoseFeatureGraph, cfg: SolverConfig) -> dict[int, WeightMatrix]:
    """E-step for every keyframe, pruned at ``cfg.delta_prune``."""
    ids = tuple(l.id for l in g.landmark_nodes)
    out = {}
    for f in g.keyframes():
        ll = _keyframe_loglik(g, f, cfg)
        if ll.shape[1] == 0:
            continue
        w = WeightMatrix(f, _weights_from_loglik(ll, cfg), ids)
        out[f] = prune_weights(w, cfg.delta_prune)
    return out


def _pad_weights(wm: dict[int, WeightMatrix], m: int, ids) -> dict[int, WeightMatrix]:
    out = {}
    for f, w in wm.items():
        pad = m - w.weights.shape[1]
        mat = np.pad(w.weights, ((0, 0), (0, pad))) if pad > 0 else w.weights
        out[f] = WeightMatrix(w.keyframe_id, mat, tuple(ids), w.unassigned)
    return out


def spawn_landmarks(
    g: PoseFeatureGraph,
    cfg: SolverConfig,
    frames: list[int] | None = None,
    uncertainty: dict[int, tuple[np.ndarray, np.ndarray]] | None = None,
) -> tuple[PoseFeatureGraph, list[int]]:
    """Create landmarks for detections no existing landmark explains.

    Keyframes (all, or just ``frames``) are visited in order, so a landmark
    spawned at one keyframe can absorb detections at the next. ``uncertainty``
    optionally maps a keyframe to :func:`association_uncertainty` output for
    the landmarks that existed before it.
    """
    uncertainty = uncertainty or {}
    out = g.copy()
    landmarks = list(g.landmark_nodes)
    spawned = []
    next_id = max((l.id for l in landmarks), default=-1) + 1
    for f in (g.keyframes() if frames is None else frames):
        dets = g.detections_at(f)
        if not dets:
            continue
        gate = np.array([cfg.gate(d.feature.mu_sc.shape[0], d.feature.mu_si.shape[0]) for d in dets])
        if landmarks:
            unc = uncertainty.get(f)
            if unc is not None:
                n_known = unc[1].shape[0]
                pad = len(landmarks) - n_known
                unc = (np.pad(unc[0], ((0, pad), (0, 0), (0, 0))), np.pad(unc[1], (0, pad)))
            quad = _keyframe_loglik(out, f, cfg, normalized=True, landmarks=landmarks, uncertainty=unc)
            # "no landmark" competes in the same assignment, scored at the gate
            w, w_new = _weights_with_null(quad, gate, cfg)
            spawn = w_new >= w.max(axis=1)
        else:
            spawn = np.ones(len(dets), dtype=bool)
        x = g.robot_nodes[f]
        for d, new_lm in zip(dets, spawn):
            if not new_lm:
                continue
            r_rel = euler_array_to_rotation(trig_decode(d.feature.mu_sv).as_array())
            landmarks.append(
                Landmark(
                    id=next_id,
                    position=x.transform(d.coord),
                    orientation=rotation_to_euler(x.rotation @ r_rel),
                    feature_c=d.feature.mu_sc,
                    feature_i=d.feature.mu_si,
                )
            )
            spawned.append(next_id)
            next_id += 1
    out.landmark_nodes = landmarks
    out.weight_matrices = _pad_weights(g.weight_matrices, len(landmarks), [l.id for l in landmarks])
    return out, spawned


# ---------------------------------------------------------------------------
# EM
# ---------------------------------------------------------------------------


def graph_from_dataset(dataset: Dataset, initial_trajectory: list[Se3Pose] | None = None) -> PoseFeatureGraph:
    init = initial_trajectory if initial_trajectory is not None else integrate_odometry(dataset.start_pose, dataset.odometry)
    if len(init) != len(dataset.trajectory):
        raise ValueError("initial trajectory length does not match the dataset")
    edges = [(k.frame, d) for k in dataset.keyframes for d in k.detections]
    return PoseFeatureGraph(list(init), [], list(dataset.odometry), edges, {})


def _prefix(g: PoseFeatureGraph, last: int) -> PoseFeatureGraph:
    """Subgraph over frames ``0..last`` with the detections of earlier keyframes."""
    return PoseFeatureGraph(
        g.robot_nodes[: last + 1],
        list(g.landmark_nodes),
        [e for e in g.odometry_edges if e.target <= last],
        [(f, d) for f, d in g.detection_edges if f < last],
        {f: w for f, w in g.weight_matrices.items() if f < last},
    )


def initialize(dataset: Dataset, cfg: SolverConfig, initial_trajectory: list[Se3Pose] | None = None) -> PoseFeatureGraph:
    """Incremental pass: keyframes are added in order.

    Before keyframe ``f`` is associated, the prefix graph up to ``f`` is
    optimised so that pose ``f`` is predicted from already-refined poses.
    Its detections are then weighted against the current landmarks using
    the innovation covariance, which includes the drift accumulated since
    the landmarks were last seen, and unexplained ones spawn new landmarks.
    """
    g = graph_from_dataset(dataset, initial_trajectory)
    for f in g.keyframes():
        unc = None
        if g.weight_matrices:
            sub, _ = optimize_poses(_prefix(g, f), cfg)
            g.robot_nodes[: f + 1] = sub.robot_nodes
            g.landmark_nodes = sub.landmark_nodes
            unc = association_uncertainty(sub, cfg, f)
        g, spawned = spawn_landmarks(g, cfg, frames=[f], uncertainty=None if unc is None else {f: unc})
        if unc is not None:
            k = len(spawned)
            unc = (np.pad(unc[0], ((0, k), (0, 0), (0, 0))), np.pad(unc[1], (0, k)))
        ll = _keyframe_loglik(g, f, cfg, uncertainty=unc)
        ids = tuple(l.id for l in g.landmark_nodes)
        g.weight_matrices[f] = prune_weights(WeightMatrix(f, _weights_from_loglik(ll, cfg), ids), cfg.delta_prune)
    return g


def run_em(dataset: Dataset, cfg: SolverConfig, initial_trajectory: list[Se3Pose] | None = None) -> Solution:
    """Alternate association weights, pose optimisation, feature update and spawning.

    An EM iteration whose final cost exceeds the previous one is discarded
    and the loop stops, so ``cost_history`` is non-increasing.
    """
    g = initialize(dataset, cfg, initial_trajectory)
    log.info("initialised with %d landmarks", len(g.landmark_nodes))
    history: list[float] = []
    lm_histories: list[list[float]] = []
    for it in range(cfg.max_em_iters):
        cand = g.copy()
        cand.weight_matrices = compute_weights(cand, cfg)
        cand, lm_hist = optimize_poses(cand, cfg)
        cand, _ = update_features(cand)
        cand, spawned = spawn_landmarks(cand, cfg)
        cost = total_cost(cand, cfg)
        log.info("EM %d: cost %.6g (%d LM steps, %d spawned)", it, cost, len(lm_hist) - 1, len(spawned))
        if history and cost > history[-1]:
            log.info("EM %d rejected: cost increased", it)
            break
        g = cand
        history.append(cost)
        lm_histories.append(lm_hist)
        if len(history) >= 2 and history[-2] - cost <= cfg.cost_tolerance * max(history[-2], 1.0):
            break
    categories = [dataset.prototypes.nearest_category(l.feature_c) for l in g.landmark_nodes]
    return Solution(
        trajectory=list(g.robot_nodes),
        landmarks=list(g.landmark_nodes),
        final_weights=dict(g.weight_matrices),
        cost_history=history,
        lm_cost_histories=lm_histories,
        landmark_categories=categories,
        closed_loop=is_closed_loop(g.robot_nodes),
    )


def is_closed_loop(poses: list[Se3Pose]) -> bool:
    """True when the path ends within 1.5 typical steps of where it started."""
    if len(poses) < 4:
        return False
    pts = np.stack([x.translation for x in poses])
    step = float(np.median(np.linalg.norm(np.diff(pts, axis=0), axis=1)))
    return bool(np.linalg.norm(pts[-1] - pts[0]) <= 1.5 * step)
