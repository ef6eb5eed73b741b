"""Gaussian object observation model.

Latent features split into a category block, an instance block and an
orientation block. Label priors are unit-covariance Gaussians centred on a
per-label prototype; the orientation prior uses the analytic moments of
attenuated cos/sin (see :func:`varslam.geometry.orientation_prior_moments`).
The encoder network is replaced by :func:`emulate_encoding`, which samples
encodings straight from these priors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import EulerAngle, TrigOrientation, trig_prior

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_VARIANCE_FLOOR = 1e-4
PROB_CLAMP = 1e-7
# Smallest shape deviation stored on an encoding; keeps the KL finite when
# the emulator runs noise-free.
MIN_DEVIATION = 1e-6


class DimensionMismatch(ValueError):
    pass


class ResolutionMismatch(ValueError):
    pass


class SeparationInfeasible(RuntimeError):
    pass


def _vec(x, name: str) -> np.ndarray:
    a = np.atleast_1d(np.asarray(x, dtype=float))
    if a.ndim != 1:
        raise DimensionMismatch(f"{name} must be a vector, got shape {a.shape}")
    return a


@dataclass(frozen=True, eq=False)
class LabelPrototype:
    category_id: int
    instance_id: int
    mu_c: np.ndarray
    mu_i: np.ndarray

    def __post_init__(self):
        for name in ("mu_c", "mu_i"):
            v = _vec(getattr(self, name), name).copy()
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite")
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def label(self) -> tuple[int, int]:
        return (self.category_id, self.instance_id)


@dataclass(frozen=True)
class PrototypeTable:
    dim_c: int
    dim_i: int
    entries: tuple[LabelPrototype, ...]

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        if self.dim_c < 1 or self.dim_i < 1:
            raise ValueError("feature dimensions must be positive")
        if not entries:
            raise ValueError("prototype table is empty")
        seen = set()
        for p in entries:
            if p.label in seen:
                raise ValueError(f"duplicate label {p.label}")
            seen.add(p.label)
            if p.mu_c.shape != (self.dim_c,) or p.mu_i.shape != (self.dim_i,):
                raise DimensionMismatch(f"prototype {p.label} does not match table dimensions")

    def lookup(self, category_id: int, instance_id: int) -> LabelPrototype:
        for p in self.entries:
            if p.label == (category_id, instance_id):
                return p
        raise KeyError((category_id, instance_id))

    @property
    def labels(self) -> list[tuple[int, int]]:
        return [p.label for p in self.entries]

    def nearest_category(self, feature_c) -> int:
        feature_c = np.asarray(feature_c, dtype=float)
        d = [np.sum((p.mu_c - feature_c) ** 2) for p in self.entries]
        return self.entries[int(np.argmin(d))].category_id


@dataclass(frozen=True, eq=False)
class EncodedFeature:
    """Variational-likelihood parameters for one detection."""

    mu_sc: np.ndarray
    mu_si: np.ndarray
    sigma_s: float
    mu_sv: TrigOrientation
    sigma_sv: np.ndarray = field(default_factory=lambda: np.full(6, 0.01))

    def __post_init__(self):
        mu_sc = _vec(self.mu_sc, "mu_sc").copy()
        mu_si = _vec(self.mu_si, "mu_si").copy()
        sigma_sv = np.asarray(self.sigma_sv, dtype=float).reshape(6).copy()
        if not self.sigma_s > 0 or np.any(sigma_sv <= 0):
            raise ValueError("feature deviations must be positive")
        for a in (mu_sc, mu_si, sigma_sv):
            a.setflags(write=False)
        object.__setattr__(self, "mu_sc", mu_sc)
        object.__setattr__(self, "mu_si", mu_si)
        object.__setattr__(self, "sigma_s", float(self.sigma_s))
        object.__setattr__(self, "sigma_sv", sigma_sv)

    @property
    def shape_feature(self) -> np.ndarray:
        return np.concatenate([self.mu_sc, self.mu_si])


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    occupancy: np.ndarray

    def __post_init__(self):
        occ = np.asarray(self.occupancy, dtype=float)
        if occ.ndim != 3:
            raise ValueError("voxel grid must be 3-dimensional")
        if np.any(occ < 0) or np.any(occ > 1):
            raise ValueError("voxel values must lie in [0, 1]")
        object.__setattr__(self, "occupancy", occ)

    @property
    def resolution(self) -> tuple[int, int, int]:
        return self.occupancy.shape


def _diag(var, shape, name: str) -> np.ndarray:
    """Scalar variances broadcast to ``shape``; vectors pass through."""
    v = _vec(var, name)
    return np.broadcast_to(v, shape) if v.size == 1 else v


def gaussian_log_density(x, mean, variance_diag) -> float:
    x = _vec(x, "x")
    mean = _vec(mean, "mean")
    var = _diag(variance_diag, mean.shape, "variance_diag")
    if x.shape != mean.shape or var.shape != mean.shape:
        raise DimensionMismatch(f"shapes {x.shape}, {mean.shape}, {var.shape} differ")
    if np.any(var <= 0):
        raise ValueError("variances must be positive")
    d = x - mean
    return float(-0.5 * np.sum(LOG_2PI + np.log(var) + d * d / var))


def feature_prior_logpdf(f: EncodedFeature, p: LabelPrototype) -> float:
    """log p(mu_s | label) with unit-covariance block priors."""
    return feature_logpdf(f, p.mu_c, p.mu_i)


def feature_logpdf(f: EncodedFeature, mu_c, mu_i) -> float:
    return gaussian_log_density(f.mu_sc, mu_c, 1.0) + gaussian_log_density(f.mu_si, mu_i, 1.0)


def kl_diag_gaussians(q_mean, q_var, p_mean, p_var) -> float:
    """KL(q || p) for diagonal Gaussians."""
    q_mean = _vec(q_mean, "q_mean")
    p_mean = _vec(p_mean, "p_mean")
    q_var = _diag(q_var, q_mean.shape, "q_var")
    p_var = _diag(p_var, p_mean.shape, "p_var")
    if not (q_mean.shape == p_mean.shape == q_var.shape == p_var.shape):
        raise DimensionMismatch("KL arguments differ in dimension")
    if np.any(q_var <= 0) or np.any(p_var <= 0):
        raise ValueError("variances must be positive")
    d = q_mean - p_mean
    kl = 0.5 * np.sum(np.log(p_var / q_var) + (q_var + d * d) / p_var - 1.0)
    return float(max(kl, 0.0))


def kl_blocks(
    f: EncodedFeature,
    p: LabelPrototype,
    v: EulerAngle,
    sigma_v: float,
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
) -> tuple[float, float, float]:
    """Per-block KL of the encoding against its category, instance and orientation priors."""
    s2 = f.sigma_s**2
    kl_c = kl_diag_gaussians(f.mu_sc, s2, p.mu_c, 1.0)
    kl_i = kl_diag_gaussians(f.mu_si, s2, p.mu_i, 1.0)
    mean, var = trig_prior(v.as_array(), sigma_v, variance_floor)
    kl_v = kl_diag_gaussians(f.mu_sv.as_vector(), f.sigma_sv**2, mean, var)
    return kl_c, kl_i, kl_v


def elbo(kl_total: float, recon_loglik: float) -> float:
    return recon_loglik - kl_total


def recon_loss(pred, target, gamma: float = 0.7) -> float:
    """Weighted voxel cross-entropy; gamma > 0.5 punishes missed occupied cells harder."""
    p = pred.occupancy if isinstance(pred, VoxelGrid) else np.asarray(pred, dtype=float)
    t = target.occupancy if isinstance(target, VoxelGrid) else np.asarray(target, dtype=float)
    if p.shape != t.shape:
        raise ResolutionMismatch(f"prediction {p.shape} vs target {t.shape}")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(np.sum(-gamma * t * np.log(p) - (1.0 - gamma) * (1.0 - t) * np.log1p(-p)))


def emulate_encoding(
    p: LabelPrototype,
    v_rel: EulerAngle,
    sigma_enc: float,
    sigma_v: float,
    rng: np.random.Generator,
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
) -> EncodedFeature:
    """Draw an encoder output for an object with label ``p`` seen at ``v_rel``.

    The orientation block is sampled with the analytic (unfloored) trig
    variance, so the noise-free limit reproduces the exact encoding. The
    reported deviations are floored.
    """
    if sigma_enc < 0:
        raise ValueError("sigma_enc must be non-negative")
    mu_sc = p.mu_c + sigma_enc * rng.standard_normal(p.mu_c.shape)
    mu_si = p.mu_i + sigma_enc * rng.standard_normal(p.mu_i.shape)
    mean, var = trig_prior(v_rel.as_array(), sigma_v, 0.0)
    mu_sv = mean + np.sqrt(var) * rng.standard_normal(6)
    return EncodedFeature(
        mu_sc=mu_sc,
        mu_si=mu_si,
        sigma_s=max(sigma_enc, MIN_DEVIATION),
        mu_sv=TrigOrientation.from_vector(mu_sv),
        sigma_sv=np.sqrt(np.maximum(var, variance_floor)),
    )


def _separated_draws(count, dim, separation, scale, rng, attempts):
    out: list[np.ndarray] = []
    while len(out) < count:
        if attempts[0] <= 0:
            raise SeparationInfeasible(
                f"could not place {count} means {separation} apart in {dim} dimensions"
            )
        attempts[0] -= 1
        cand = scale * rng.standard_normal(dim)
        if all(np.linalg.norm(cand - m) >= separation for m in out):
            out.append(cand)
    return out


def sample_prototypes(
    num_categories: int,
    instances_per_category: int,
    dim_c: int,
    dim_i: int,
    separation: float,
    rng: np.random.Generator,
    max_attempts: int = 10_000,
) -> PrototypeTable:
    """Random prototype table with pairwise-separated category/instance means."""
    if num_categories < 1 or instances_per_category < 1 or dim_c < 1 or dim_i < 1:
        raise ValueError("counts and dimensions must be >= 1")
    if separation <= 0:
        raise ValueError("separation must be positive")
    attempts = [max_attempts]
    scale = separation
    cats = _separated_draws(num_categories, dim_c, separation, scale, rng, attempts)
    entries = []
    for c, mu_c in enumerate(cats):
        insts = _separated_draws(instances_per_category, dim_i, separation, scale, rng, attempts)
        entries.extend(LabelPrototype(c, i, mu_c, mu_i) for i, mu_i in enumerate(insts))
    return PrototypeTable(dim_c, dim_i, tuple(entries))
