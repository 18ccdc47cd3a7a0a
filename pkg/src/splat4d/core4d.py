"""
Spacetime Gaussian primitive and its closed-form math.

A primitive lives in (x, y, z, t). Its covariance is assembled from a 4D
rotation, given as a pair of isoclinic quaternions, and a diagonal scale.
Conditioning on a timestamp gives an ordinary 3D Gaussian (moving mean,
fixed shape) together with a scalar temporal weight.

Quaternions are stored as (w, x, y, z). A 4D point (x, y, z, t) is
identified with the quaternion t + x i + y j + z k, so the time axis is the
real part; ``build_rotation(q, conj(q))`` is then the ordinary 3D rotation
of ``q`` with t fixed.

Every batched function accepts arrays with a leading Gaussian axis and has
a matching ``*_backward`` used by the rasterizer's gradient pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .errors import DegenerateTemporalError, InvalidParameterError

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)
SH_COLOR_OFFSET = 0.5
TEMPORAL_VARIANCE_FLOOR = 1e-12

# permutation from (w, x, y, z) quaternion slots to (x, y, z, t) point slots
_PERM = np.array([1, 2, 3, 0])


def _left_basis() -> np.ndarray:
    # matrix of p -> q p in (w, x, y, z) order, split per component of q
    E = np.zeros((4, 4, 4))
    for k, qk in enumerate(np.eye(4)):
        a, b, c, d = qk
        m = np.array([
            [a, -b, -c, -d],
            [b, a, -d, c],
            [c, d, a, -b],
            [d, -c, b, a],
        ])
        E[k] = m[np.ix_(_PERM, _PERM)]
    return E


def _right_basis() -> np.ndarray:
    # matrix of p -> p q in (w, x, y, z) order
    E = np.zeros((4, 4, 4))
    for k, qk in enumerate(np.eye(4)):
        a, b, c, d = qk
        m = np.array([
            [a, -b, -c, -d],
            [b, a, d, -c],
            [c, -d, a, b],
            [d, c, -b, a],
        ])
        E[k] = m[np.ix_(_PERM, _PERM)]
    return E


LEFT_BASIS = _left_basis()
RIGHT_BASIS = _right_basis()


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_from_count(count: int) -> int:
    for degree in range(4):
        if sh_coeff_count(degree) == count:
            return degree
    raise InvalidParameterError(
        f"{count} SH coefficients does not match any degree in 0..3"
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_multiply(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Hamilton product of (w, x, y, z) quaternions, broadcasting."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    a1, b1, c1, d1 = np.moveaxis(p, -1, 0)
    a2, b2, c2, d2 = np.moveaxis(q, -1, 0)
    return np.stack([
        a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2,
        a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2,
        a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2,
        a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2,
    ], axis=-1)


def quat_to_rotmat3(q: np.ndarray) -> np.ndarray:
    """Standard 3x3 rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = normalize_quaternion(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def normalize_quaternion(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0) or not np.all(np.isfinite(norm)):
        raise InvalidParameterError("quaternion has zero or non-finite norm")
    return q / norm


def quat_left_matrix(q: np.ndarray) -> np.ndarray:
    """4x4 matrix of left multiplication by ``q``, acting on (x, y, z, t)."""
    return np.einsum("...k,kij->...ij", np.asarray(q, dtype=np.float64), LEFT_BASIS)


def quat_right_matrix(q: np.ndarray) -> np.ndarray:
    """4x4 matrix of right multiplication by ``q``, acting on (x, y, z, t)."""
    return np.einsum("...k,kij->...ij", np.asarray(q, dtype=np.float64), RIGHT_BASIS)


def build_rotation(rot_left: np.ndarray, rot_right: np.ndarray) -> np.ndarray:
    """Compose a 4D rotation from a left and a right isoclinic quaternion.

    Both inputs are normalized first; zero quaternions are rejected.
    Broadcasts over leading axes.
    """
    ql = normalize_quaternion(rot_left)
    qr = normalize_quaternion(rot_right)
    return quat_left_matrix(ql) @ quat_right_matrix(qr)


# ---------------------------------------------------------------------------
# Primitive types
# ---------------------------------------------------------------------------


@dataclass
class Gaussian4D:
    """One spacetime Gaussian.

    Attributes:
        mu: (4,) mean in (x, y, z, t); t is normalized to [0, 1].
        log_scale: (4,) natural log of the per-axis scale.
        rot_left: (4,) left isoclinic quaternion (w, x, y, z).
        rot_right: (4,) right isoclinic quaternion (w, x, y, z).
        opacity_logit: opacity before the sigmoid.
        sh_coeffs: ((L+1)^2, 3) spherical harmonic coefficients per RGB channel.
    """

    mu: np.ndarray
    log_scale: np.ndarray = field(default_factory=lambda: np.zeros(4))
    rot_left: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    rot_right: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    opacity_logit: float = 0.0
    sh_coeffs: np.ndarray = field(default_factory=lambda: np.zeros((1, 3)))

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(4)
        self.rot_left = np.asarray(self.rot_left, dtype=np.float64).reshape(4)
        self.rot_right = np.asarray(self.rot_right, dtype=np.float64).reshape(4)
        self.opacity_logit = float(self.opacity_logit)
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=np.float64).reshape(-1, 3)
        sh_degree_from_count(self.sh_coeffs.shape[0])

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def sh_degree(self) -> int:
        return sh_degree_from_count(self.sh_coeffs.shape[0])


@dataclass
class Covariance4:
    """Full 4x4 spacetime covariance with named blocks."""

    sigma: np.ndarray

    @property
    def xx(self) -> np.ndarray:
        return self.sigma[:3, :3]

    @property
    def xt(self) -> np.ndarray:
        return self.sigma[:3, 3]

    @property
    def tt(self) -> float:
        return float(self.sigma[3, 3])


@dataclass
class Conditional3D:
    mean: np.ndarray
    cov: np.ndarray
    temporal_weight: float


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split form keeps exp from overflowing for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else out[()]


def logit(p: float) -> float:
    return float(np.log(p) - np.log1p(-p))


def build_covariance(g: Gaussian4D) -> Covariance4:
    R = build_rotation(g.rot_left, g.rot_right)
    M = R * np.exp(g.log_scale)[None, :]
    sigma = M @ M.T
    return Covariance4(sigma=0.5 * (sigma + sigma.T))


def condition_on_time(cov: Covariance4, mu: np.ndarray, t: float) -> Conditional3D:
    """Condition a spacetime Gaussian on time ``t``.

    Returns the 3D conditional (Schur complement) and the temporal marginal
    evaluated at ``t``, unnormalized so that it peaks at 1 when ``t == mu_t``.
    """
    mu = np.asarray(mu, dtype=np.float64)
    s_tt = cov.tt
    if s_tt < TEMPORAL_VARIANCE_FLOOR:
        raise DegenerateTemporalError(f"temporal variance {s_tt:.3e} is below 1e-12")
    dt = t - mu[3]
    gain = cov.xt / s_tt
    mean = mu[:3] + gain * dt
    cond = cov.xx - np.outer(cov.xt, cov.xt) / s_tt
    return Conditional3D(
        mean=mean,
        cov=0.5 * (cond + cond.T),
        temporal_weight=float(np.exp(-0.5 * dt * dt / s_tt)),
    )


def eval_density(g: Gaussian4D, p: np.ndarray) -> float:
    sigma = build_covariance(g).sigma
    d = np.asarray(p, dtype=np.float64) - g.mu
    return float(np.exp(-0.5 * d @ np.linalg.solve(sigma, d)))


# ---------------------------------------------------------------------------
# Spherical harmonics
# ---------------------------------------------------------------------------


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis up to ``degree`` at unit directions, shape (..., (L+1)^2)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full_like(x, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(out, axis=-1)


def sh_basis_jacobian(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Partial derivatives of each basis polynomial, shape (..., K, 3).

    Derivatives are taken in ambient coordinates; callers chain through the
    direction normalization themselves.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        c = np.full_like(x, SH_C1)
        rows += [(zero, -c, zero), (zero, zero, c), (-c, zero, zero)]
    if degree >= 2:
        rows += [
            (SH_C2[0] * y, SH_C2[0] * x, zero),
            (zero, SH_C2[1] * z, SH_C2[1] * y),
            (-2 * SH_C2[2] * x, -2 * SH_C2[2] * y, 4 * SH_C2[2] * z),
            (SH_C2[3] * z, zero, SH_C2[3] * x),
            (2 * SH_C2[4] * x, -2 * SH_C2[4] * y, zero),
        ]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (6 * SH_C3[0] * x * y, SH_C3[0] * (3 * xx - 3 * yy), zero),
            (SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y),
            (-2 * SH_C3[2] * x * y, SH_C3[2] * (4 * zz - xx - 3 * yy), 8 * SH_C3[2] * y * z),
            (-6 * SH_C3[3] * x * z, -6 * SH_C3[3] * y * z, SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)),
            (SH_C3[4] * (4 * zz - 3 * xx - yy), -2 * SH_C3[4] * x * y, 8 * SH_C3[4] * x * z),
            (2 * SH_C3[5] * x * z, -2 * SH_C3[5] * y * z, SH_C3[5] * (xx - yy)),
            (SH_C3[6] * (3 * xx - 3 * yy), -6 * SH_C3[6] * x * y, zero),
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def eval_sh_color(sh_coeffs: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """RGB color seen along ``view_dir``: SH dot product + 0.5, clamped at 0."""
    coeffs = np.asarray(sh_coeffs, dtype=np.float64).reshape(-1, 3)
    degree = sh_degree_from_count(coeffs.shape[0])
    basis = sh_basis(np.asarray(view_dir, dtype=np.float64), degree)
    return np.maximum(basis @ coeffs + SH_COLOR_OFFSET, 0.0)


# ---------------------------------------------------------------------------
# Batched scene container
# ---------------------------------------------------------------------------

PARAM_NAMES = ("mu", "log_scale", "rot_left", "rot_right", "opacity_logit", "sh_coeffs")


@dataclass
class GaussianScene:
    """Struct-of-arrays view of many :class:`Gaussian4D` primitives.

    Array shapes: ``mu``, ``log_scale``, ``rot_left``, ``rot_right`` are
    (N, 4); ``opacity_logit`` is (N,); ``sh_coeffs`` is (N, K, 3).
    """

    mu: np.ndarray
    log_scale: np.ndarray
    rot_left: np.ndarray
    rot_right: np.ndarray
    opacity_logit: np.ndarray
    sh_coeffs: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1, 4)
        n = self.mu.shape[0]
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(n, 4)
        self.rot_left = np.asarray(self.rot_left, dtype=np.float64).reshape(n, 4)
        self.rot_right = np.asarray(self.rot_right, dtype=np.float64).reshape(n, 4)
        self.opacity_logit = np.asarray(self.opacity_logit, dtype=np.float64).reshape(n)
        sh = np.asarray(self.sh_coeffs, dtype=np.float64)
        self.sh_coeffs = sh if sh.ndim == 3 else sh.reshape(n, -1, 3)
        if self.sh_coeffs.shape[0] != n or self.sh_coeffs.shape[2] != 3:
            raise InvalidParameterError(f"sh_coeffs shape {self.sh_coeffs.shape} for {n} Gaussians")
        sh_degree_from_count(self.sh_coeffs.shape[1])

    @classmethod
    def empty(cls, sh_degree: int = 0) -> "GaussianScene":
        k = sh_coeff_count(sh_degree)
        return cls(np.zeros((0, 4)), np.zeros((0, 4)), np.zeros((0, 4)),
                   np.zeros((0, 4)), np.zeros(0), np.zeros((0, k, 3)))

    @classmethod
    def from_gaussians(cls, gaussians, sh_degree: int | None = None) -> "GaussianScene":
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty(sh_degree or 0)
        return cls(
            mu=np.stack([g.mu for g in gaussians]),
            log_scale=np.stack([g.log_scale for g in gaussians]),
            rot_left=np.stack([g.rot_left for g in gaussians]),
            rot_right=np.stack([g.rot_right for g in gaussians]),
            opacity_logit=np.array([g.opacity_logit for g in gaussians]),
            sh_coeffs=np.stack([g.sh_coeffs for g in gaussians]),
        )

    @classmethod
    def coerce(cls, scene) -> "GaussianScene":
        if isinstance(scene, cls):
            return scene
        return cls.from_gaussians(scene)

    def __len__(self) -> int:
        return self.mu.shape[0]

    def __getitem__(self, i: int) -> Gaussian4D:
        return Gaussian4D(self.mu[i], self.log_scale[i], self.rot_left[i],
                          self.rot_right[i], self.opacity_logit[i], self.sh_coeffs[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def sh_degree(self) -> int:
        return sh_degree_from_count(self.sh_coeffs.shape[1])

    def params(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "GaussianScene":
        return GaussianScene(**{k: v.copy() for k, v in self.params().items()})

    def select(self, mask) -> "GaussianScene":
        return GaussianScene(**{k: v[mask] for k, v in self.params().items()})

    def concat(self, other: "GaussianScene") -> "GaussianScene":
        return GaussianScene(**{k: np.concatenate([v, getattr(other, k)])
                                for k, v in self.params().items()})


# ---------------------------------------------------------------------------
# Batched forward / backward used by the rasterizer
# ---------------------------------------------------------------------------


@dataclass
class CovarianceCache:
    ql: np.ndarray
    qr: np.ndarray
    ql_norm: np.ndarray
    qr_norm: np.ndarray
    left: np.ndarray
    right: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    factor: np.ndarray


def covariance_batch(log_scale, rot_left, rot_right):
    """Sigma = R S S^T R^T for N Gaussians; returns (sigma, cache)."""
    ql_norm = np.linalg.norm(rot_left, axis=-1)
    qr_norm = np.linalg.norm(rot_right, axis=-1)
    if np.any(ql_norm == 0) or np.any(qr_norm == 0):
        raise InvalidParameterError("zero-norm rotation quaternion in scene")
    ql = rot_left / ql_norm[:, None]
    qr = rot_right / qr_norm[:, None]
    left = quat_left_matrix(ql)
    right = quat_right_matrix(qr)
    rotation = left @ right
    scale = np.exp(log_scale)
    factor = rotation * scale[:, None, :]
    sigma = factor @ np.swapaxes(factor, 1, 2)
    cache = CovarianceCache(ql, qr, ql_norm, qr_norm, left, right, rotation, scale, factor)
    return sigma, cache


def _normalize_backward(q_hat, norm, grad):
    return (grad - q_hat * np.sum(q_hat * grad, axis=-1, keepdims=True)) / norm[:, None]


def covariance_batch_backward(cache: CovarianceCache, g_sigma: np.ndarray):
    """Pull a symmetric d/dSigma back to (d log_scale, d rot_left, d rot_right)."""
    g_factor = 2.0 * g_sigma @ cache.factor
    g_rot = g_factor * cache.scale[:, None, :]
    g_scale = np.sum(g_factor * cache.rotation, axis=1)
    g_log_scale = g_scale * cache.scale
    g_left = g_rot @ np.swapaxes(cache.right, 1, 2)
    g_right = np.swapaxes(cache.left, 1, 2) @ g_rot
    g_ql = np.einsum("nij,kij->nk", g_left, LEFT_BASIS)
    g_qr = np.einsum("nij,kij->nk", g_right, RIGHT_BASIS)
    return (
        g_log_scale,
        _normalize_backward(cache.ql, cache.ql_norm, g_ql),
        _normalize_backward(cache.qr, cache.qr_norm, g_qr),
    )


@dataclass
class ConditionCache:
    s_xt: np.ndarray
    s_tt: np.ndarray
    dt: np.ndarray
    gain: np.ndarray
    weight: np.ndarray


def condition_batch(sigma, mu, t):
    """Vectorized :func:`condition_on_time`.

    Returns (mean3 (N,3), cov3 (N,3,3), temporal_weight (N,), cache). No
    floor check here; callers validate the temporal variance.
    """
    s_xx = sigma[:, :3, :3]
    s_xt = sigma[:, :3, 3]
    s_tt = sigma[:, 3, 3]
    dt = t - mu[:, 3]
    gain = s_xt / s_tt[:, None]
    mean3 = mu[:, :3] + gain * dt[:, None]
    cov3 = s_xx - s_xt[:, :, None] * gain[:, None, :]
    weight = np.exp(-0.5 * dt * dt / s_tt)
    return mean3, cov3, weight, ConditionCache(s_xt, s_tt, dt, gain, weight)


def condition_batch_backward(cache: ConditionCache, g_mean3, g_cov3, g_weight):
    """Returns (d mu (N,4), d sigma (N,4,4), symmetric)."""
    s_xt, s_tt, dt, gain, w = cache.s_xt, cache.s_tt, cache.dt, cache.gain, cache.weight
    n = s_tt.shape[0]
    g_mu = np.zeros((n, 4))
    g_mu[:, :3] = g_mean3

    g_xt = g_mean3 * (dt / s_tt)[:, None]
    g_tt = -np.sum(g_mean3 * s_xt, axis=1) * dt / s_tt**2
    g_dt = np.sum(g_mean3 * gain, axis=1)

    gc = 0.5 * (g_cov3 + np.swapaxes(g_cov3, 1, 2))
    g_xt -= 2.0 * np.einsum("nij,nj->ni", gc, s_xt) / s_tt[:, None]
    g_tt += np.einsum("ni,nij,nj->n", s_xt, gc, s_xt) / s_tt**2

    g_dt += g_weight * (-w * dt / s_tt)
    g_tt += g_weight * w * 0.5 * dt * dt / s_tt**2
    g_mu[:, 3] = -g_dt

    g_sigma = np.zeros((n, 4, 4))
    g_sigma[:, :3, :3] = gc
    g_sigma[:, :3, 3] = 0.5 * g_xt
    g_sigma[:, 3, :3] = 0.5 * g_xt
    g_sigma[:, 3, 3] = g_tt
    return g_mu, g_sigma


def sh_color_batch(sh_coeffs, dirs_unnormalized):
    """Clamped SH color per Gaussian; returns (color (N,3), cache tuple)."""
    length = np.linalg.norm(dirs_unnormalized, axis=-1)
    dirs = dirs_unnormalized / length[:, None]
    degree = sh_degree_from_count(sh_coeffs.shape[1])
    basis = sh_basis(dirs, degree)
    raw = np.einsum("nk,nkc->nc", basis, sh_coeffs) + SH_COLOR_OFFSET
    return np.maximum(raw, 0.0), (dirs, length, basis, raw > 0.0, degree)


def sh_color_batch_backward(cache, sh_coeffs, g_color):
    """Returns (d sh_coeffs, d of the unnormalized direction vector)."""
    dirs, length, basis, positive, degree = cache
    g_raw = g_color * positive
    g_coeffs = basis[:, :, None] * g_raw[:, None, :]
    if degree == 0:
        return g_coeffs, np.zeros_like(dirs)
    jac = sh_basis_jacobian(dirs, degree)
    g_basis = np.einsum("nkc,nc->nk", sh_coeffs, g_raw)
    g_dir = np.einsum("nk,nkj->nj", g_basis, jac)
    g_vec = (g_dir - dirs * np.sum(dirs * g_dir, axis=1, keepdims=True)) / length[:, None]
    return g_coeffs, g_vec
