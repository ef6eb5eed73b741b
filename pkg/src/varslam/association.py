"""Probabilistic data association (E-step).

The weight ``w[i, j]`` is the posterior probability that detection ``i`` of a
keyframe belongs to landmark ``j``, marginalised over every one-to-one
assignment of the keyframe's detections to landmarks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .generative import (
    DEFAULT_VARIANCE_FLOOR,
    LOG_2PI,
    EncodedFeature,
    feature_logpdf,
    gaussian_log_density,
)
from .geometry import EulerAngle, Se3Pose, euler_to_rotation, rotation_to_euler_array, trig_prior

MAX_EXACT_DETECTIONS = 8
# The subset recursion stores 2**M log-values per detection.
MAX_EXACT_LANDMARKS = 16


class AssociationError(ValueError):
    pass


class InvalidHypothesis(AssociationError):
    pass


class TooManyDetections(AssociationError):
    pass


@dataclass(frozen=True, eq=False)
class Detection:
    keyframe_id: int
    coord: np.ndarray
    feature: EncodedFeature
    sigma_t: float
    # generating landmark; evaluation only, never read by the solver
    landmark_id: int | None = None

    def __post_init__(self):
        c = np.asarray(self.coord, dtype=float).reshape(3).copy()
        if not np.all(np.isfinite(c)):
            raise ValueError("detection coordinate must be finite")
        if not self.sigma_t > 0:
            raise ValueError("sigma_t must be positive")
        c.setflags(write=False)
        object.__setattr__(self, "coord", c)
        object.__setattr__(self, "sigma_t", float(self.sigma_t))


@dataclass(frozen=True, eq=False)
class Landmark:
    id: int
    position: np.ndarray
    orientation: EulerAngle
    feature_c: np.ndarray
    feature_i: np.ndarray

    def __post_init__(self):
        for name in ("position", "feature_c", "feature_i"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(-1).copy()
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        if self.position.shape != (3,):
            raise ValueError("landmark position must be a 3-vector")

    @property
    def rotation(self) -> np.ndarray:
        return euler_to_rotation(self.orientation)


@dataclass(frozen=True)
class AssociationHypothesis:
    """``pairs[k] = (detection_index, landmark_index)``."""

    pairs: tuple[tuple[int, int], ...]


@dataclass(eq=False)
class WeightMatrix:
    keyframe_id: int
    weights: np.ndarray
    landmark_ids: tuple[int, ...] = ()
    # rows whose every entry fell below the pruning threshold
    unassigned: tuple[int, ...] = field(default=())

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape


# ---------------------------------------------------------------------------
# Likelihoods
# ---------------------------------------------------------------------------


def detection_log_likelihood(
    d: Detection,
    x: Se3Pose,
    l: Landmark,
    sigma_v: float,
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
    use_orientation: bool = True,
) -> float:
    """log p(coord | x, t) + log p(mu_sv | x, v) + log p(mu_s | landmark feature)."""
    rt = x.rotation.T
    expected = rt @ (l.position - x.translation)
    ll = gaussian_log_density(d.coord, expected, d.sigma_t**2)
    if use_orientation:
        rel = rotation_to_euler_array(rt @ l.rotation)
        mean, var = trig_prior(rel, sigma_v, variance_floor)
        ll += gaussian_log_density(d.feature.mu_sv.as_vector(), mean, var)
    ll += feature_logpdf(d.feature, l.feature_c, l.feature_i)
    return ll


def log_likelihood_matrix(
    detections: list[Detection],
    landmarks: list[Landmark],
    x: Se3Pose,
    sigma_v: float,
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
    use_orientation: bool = True,
    landmark_rotations: np.ndarray | None = None,
    normalized: bool = False,
    position_cov: np.ndarray | None = None,
    orientation_var: np.ndarray | None = None,
) -> np.ndarray:
    """K x M matrix of :func:`detection_log_likelihood`, vectorised over landmarks.

    With ``normalized`` the log-normaliser constants are dropped, leaving
    ``-1/2`` times the squared Mahalanobis distance.

    ``position_cov`` (M, 3, 3) and ``orientation_var`` (M,) add state
    uncertainty to the measurement noise: the coordinate term then uses the
    innovation covariance ``sigma_t^2 I + position_cov[j]`` and every trig
    component gets ``orientation_var[j]`` extra variance.
    """
    c = 0.0 if normalized else 1.0
    k, m = len(detections), len(landmarks)
    if k == 0 or m == 0:
        return np.zeros((k, m))
    rt = x.rotation.T
    pos = np.stack([l.position for l in landmarks])
    fc = np.stack([l.feature_c for l in landmarks])
    fi = np.stack([l.feature_i for l in landmarks])
    expected = (pos - x.translation) @ rt.T  # (M, 3)
    coords = np.stack([d.coord for d in detections])  # (K, 3)
    var_t = np.array([d.sigma_t**2 for d in detections])[:, None]
    diff = coords[:, None, :] - expected[None, :, :]
    if position_cov is None:
        ll = -0.5 * (np.sum(diff**2, axis=-1) / var_t + c * 3.0 * (LOG_2PI + np.log(var_t)))
    else:
        cov = np.asarray(position_cov, dtype=float)[None] + var_t[:, :, None, None] * np.eye(3)
        chol = np.linalg.cholesky(cov)  # (K, M, 3, 3)
        z = np.linalg.solve(chol, diff[..., None])[..., 0]
        logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
        ll = -0.5 * (np.sum(z**2, axis=-1) + c * (3.0 * LOG_2PI + logdet))

    if use_orientation:
        if landmark_rotations is None:
            landmark_rotations = np.stack([l.rotation for l in landmarks])
        rel = rotation_to_euler_array(rt[None] @ landmark_rotations)
        mean, var = trig_prior(rel, sigma_v, variance_floor)  # (M, 6)
        if orientation_var is not None:
            var = var + np.asarray(orientation_var, dtype=float)[:, None]
        sv = np.stack([d.feature.mu_sv.as_vector() for d in detections])
        dv = sv[:, None, :] - mean[None, :, :]
        ll += -0.5 * np.sum(c * (LOG_2PI + np.log(var)[None]) + dv**2 / var[None], axis=-1)

    sc = np.stack([d.feature.mu_sc for d in detections])
    si = np.stack([d.feature.mu_si for d in detections])
    dc = sc[:, None, :] - fc[None]
    di = si[:, None, :] - fi[None]
    dim = fc.shape[1] + fi.shape[1]
    ll += -0.5 * (np.sum(dc**2, axis=-1) + np.sum(di**2, axis=-1) + c * dim * LOG_2PI)
    return ll


def assignment_log_likelihood(
    h: AssociationHypothesis,
    detections: list[Detection],
    landmarks: list[Landmark],
    x: Se3Pose,
    sigma_v: float,
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
    use_orientation: bool = True,
) -> float:
    det_idx = [a for a, _ in h.pairs]
    lm_idx = [b for _, b in h.pairs]
    if sorted(det_idx) != list(range(len(detections))):
        raise InvalidHypothesis("hypothesis must cover every detection exactly once")
    if len(set(lm_idx)) != len(lm_idx):
        raise InvalidHypothesis("hypothesis assigns two detections to one landmark")
    if any(not 0 <= b < len(landmarks) for b in lm_idx):
        raise InvalidHypothesis("landmark index out of range")
    return sum(
        detection_log_likelihood(detections[a], x, landmarks[b], sigma_v, variance_floor, use_orientation)
        for a, b in h.pairs
    )


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------


def exact_weights_from_loglik(ll: np.ndarray) -> np.ndarray:
    """Marginal assignment probabilities over all injective detection->landmark maps.

    Sums over landmark subsets instead of listing hypotheses: ``fwd[k][S]`` is
    the log-mass of assigning detections ``0..k-1`` to exactly the landmarks
    in bitmask ``S``; ``bwd[k][S]`` is the log-mass of assigning detections
    ``k..K-1`` to landmarks outside ``S``.
    """
    ll = np.asarray(ll, dtype=float)
    k_det, m = ll.shape
    if k_det == 0:
        return np.zeros((0, m))
    if k_det > MAX_EXACT_DETECTIONS:
        raise TooManyDetections(f"{k_det} detections exceed the exact limit of {MAX_EXACT_DETECTIONS}")
    if k_det > m:
        raise AssociationError(f"no one-to-one assignment of {k_det} detections to {m} landmarks")
    if k_det == 1:
        # a single detection has no coupling; this is the softmax itself
        return factored_weights_from_loglik(ll)
    return _subset_dp(ll, None)[0]


def exact_weights_with_null(ll: np.ndarray, null_ll) -> tuple[np.ndarray, np.ndarray]:
    """Exact weights when detection ``i`` may also match no landmark, with log-mass ``null_ll[i]``.

    Unmatched detections do not use up a landmark, so any number of
    detections is feasible. Returns ``(w, w_null)``; each row of ``w`` plus
    its ``w_null`` entry sums to 1.
    """
    ll = np.asarray(ll, dtype=float)
    null_ll = np.asarray(null_ll, dtype=float)
    k_det, m = ll.shape
    if null_ll.shape != (k_det,):
        raise ValueError("need one null log-likelihood per detection")
    if k_det == 0:
        return np.zeros((0, m)), np.zeros(0)
    if k_det > MAX_EXACT_DETECTIONS:
        raise TooManyDetections(f"{k_det} detections exceed the exact limit of {MAX_EXACT_DETECTIONS}")
    return _subset_dp(ll, null_ll)


def _subset_dp(ll: np.ndarray, null_ll: np.ndarray | None) -> tuple[np.ndarray, np.ndarray | None]:
    k_det, m = ll.shape
    if m > MAX_EXACT_LANDMARKS:
        raise AssociationError(f"{m} landmarks exceed the exact limit of {MAX_EXACT_LANDMARKS}")
    # row shifts cancel: every hypothesis uses each row once
    if null_ll is None:
        shift = ll.max(axis=1)
    else:
        shift = np.maximum(ll.max(axis=1, initial=-np.inf), null_ll)
        null_ll = null_ll - shift
    ll = ll - shift[:, None]

    n_states = 1 << m
    states = np.arange(n_states)
    free = [(states & (1 << j)) == 0 for j in range(m)]
    fwd = np.full((k_det + 1, n_states), -np.inf)
    fwd[0, 0] = 0.0
    for k in range(k_det):
        nxt = fwd[k + 1]
        if null_ll is not None:
            nxt[:] = fwd[k] + null_ll[k]
        for j in range(m):
            src = states[free[j]]
            dst = src | (1 << j)
            nxt[dst] = np.logaddexp(nxt[dst], fwd[k, src] + ll[k, j])

    bwd = np.full((k_det + 1, n_states), -np.inf)
    bwd[k_det, :] = 0.0
    for k in range(k_det - 1, -1, -1):
        acc = np.full(n_states, -np.inf) if null_ll is None else null_ll[k] + bwd[k + 1]
        for j in range(m):
            src = states[free[j]]
            acc[src] = np.logaddexp(acc[src], ll[k, j] + bwd[k + 1, src | (1 << j)])
        bwd[k] = acc

    log_z = bwd[0, 0]
    w = np.zeros((k_det, m))
    for i in range(k_det):
        for j in range(m):
            src = states[free[j]]
            terms = fwd[i, src] + ll[i, j] + bwd[i + 1, src | (1 << j)]
            w[i, j] = np.exp(logsumexp(terms) - log_z)
    if null_ll is None:
        return w, None
    w_null = np.array([np.exp(logsumexp(fwd[i] + null_ll[i] + bwd[i + 1]) - log_z) for i in range(k_det)])
    return w, w_null


def factored_weights_from_loglik(ll: np.ndarray) -> np.ndarray:
    """Per-detection softmax; ignores the one-to-one coupling."""
    ll = np.asarray(ll, dtype=float)
    if ll.shape[0] == 0:
        return np.zeros(ll.shape)
    if ll.shape[1] == 0:
        raise AssociationError("factored weights need at least one landmark")
    return np.exp(ll - logsumexp(ll, axis=1, keepdims=True))


def exact_is_feasible(num_detections: int, num_landmarks: int) -> bool:
    return (
        num_detections <= MAX_EXACT_DETECTIONS
        and num_detections <= num_landmarks <= MAX_EXACT_LANDMARKS
    )


def em_weights_exact(
    detections, landmarks, x, sigma_v, variance_floor=DEFAULT_VARIANCE_FLOOR, use_orientation=True
) -> WeightMatrix:
    if len(detections) > MAX_EXACT_DETECTIONS:
        raise TooManyDetections(f"{len(detections)} detections; use em_weights_factored")
    ll = log_likelihood_matrix(detections, landmarks, x, sigma_v, variance_floor, use_orientation)
    return WeightMatrix(_keyframe_of(detections), exact_weights_from_loglik(ll), tuple(l.id for l in landmarks))


def em_weights_factored(
    detections, landmarks, x, sigma_v, variance_floor=DEFAULT_VARIANCE_FLOOR, use_orientation=True
) -> WeightMatrix:
    ll = log_likelihood_matrix(detections, landmarks, x, sigma_v, variance_floor, use_orientation)
    return WeightMatrix(_keyframe_of(detections), factored_weights_from_loglik(ll), tuple(l.id for l in landmarks))


def _keyframe_of(detections) -> int:
    return detections[0].keyframe_id if detections else -1


def prune_weights(w: WeightMatrix, delta: float) -> WeightMatrix:
    """Zero entries below ``delta`` and renormalise the surviving rows."""
    if not 0.0 <= delta < 1.0:
        raise ValueError("delta must lie in [0, 1)")
    out = np.where(w.weights < delta, 0.0, w.weights)
    sums = out.sum(axis=1)
    dead = tuple(int(i) for i in np.flatnonzero(sums <= 0.0))
    live = sums > 0.0
    out[live] = out[live] / sums[live, None]
    return WeightMatrix(w.keyframe_id, out, w.landmark_ids, dead)
