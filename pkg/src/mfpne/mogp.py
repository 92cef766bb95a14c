"""Multi-fidelity Gaussian process surrogate over (action profile, fidelity) pairs.

Each player gets an independent model of its utility stack u^(1..M). The stack
follows an auto-regressive cascade downward from the top fidelity,

    u^(m)(x) = rho_m * u^(m+1)(x) + sqrt(1 - rho_m^2) * q_m(x),

with u^(M) ~ GP(0, exp(-h ||x-x'||^2)) and independent residual processes
q_m ~ GP(0, exp(-zeta_m ||x-x'||^2)). Unrolling the recursion gives a single
closed-form covariance over mixed-fidelity inputs, which is what this module
computes: with A_m = prod(rho_m..rho_{M-1}) and
c_{l,m} = prod(rho_m..rho_{l-1}) * sqrt(1 - rho_l^2),

    cov(u^(m)(x), u^(m')(x')) = A_m A_m' k_top(x, x')
        + sum_{l >= max(m, m')} c_{l,m} c_{l,m'} k_l(x, x').

All fidelities have unit prior variance (the cascade telescopes), which keeps
posterior variances directly comparable across fidelity levels.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

__all__ = [
    "KernelParams",
    "ObservationRecord",
    "MogpModel",
    "MogpNumericsError",
    "kernel_eval",
    "kernel_matrix",
    "posterior",
    "posterior_batch",
    "append_observation",
    "mutual_information_single",
    "mutual_information_sequence",
]

BASE_JITTER = 1e-10
MAX_JITTER = 1e-6


class MogpNumericsError(RuntimeError):
    """Gram factorization failed after jitter escalation.

    Carries the diagonal regularization reached and a condition-number
    diagnostic of the offending matrix.
    """

    def __init__(self, message: str, condition: float | None = None):
        super().__init__(message)
        self.condition = condition


@dataclass(frozen=True)
class KernelParams:
    """Hyperparameters of the fidelity-cascade kernel.

    h       : RBF coefficient of the top-fidelity kernel (>0).
    zeta    : RBF coefficients of the M-1 residual kernels (>0 each).
    rho     : M-1 cascade correlation coefficients, each in (0, 1).
    num_fidelities : M >= 1.
    """

    h: float
    zeta: tuple[float, ...]
    rho: tuple[float, ...]
    num_fidelities: int

    def __post_init__(self):
        m = self.num_fidelities
        if m < 1:
            raise ValueError(f"need at least one fidelity, got {m}")
        if len(self.zeta) != m - 1 or len(self.rho) != m - 1:
            raise ValueError(
                f"zeta/rho must have length M-1={m - 1}, "
                f"got {len(self.zeta)}/{len(self.rho)}"
            )
        if self.h <= 0 or any(z <= 0 for z in self.zeta):
            raise ValueError("RBF coefficients must be positive")
        if any(not 0.0 < r < 1.0 for r in self.rho):
            raise ValueError("cascade correlations must lie in (0, 1)")

    @property
    def M(self) -> int:
        return self.num_fidelities

    def amplitude_table(self) -> tuple[np.ndarray, np.ndarray]:
        """Unrolled cascade coefficients.

        Returns (A, C): A[m] is the top-fidelity amplitude for fidelity m and
        C[l, m] the residual-l amplitude (zero when m > l). Index 0 is unused
        so fidelities can be used directly.
        """
        m_count = self.num_fidelities
        amp = np.zeros(m_count + 1)
        amp[m_count] = 1.0
        for m in range(m_count - 1, 0, -1):
            amp[m] = self.rho[m - 1] * amp[m + 1]
        resid = np.zeros((m_count, m_count + 1))
        for l in range(1, m_count):
            s_l = np.sqrt(1.0 - self.rho[l - 1] ** 2)
            for m in range(1, l + 1):
                run = 1.0
                for i in range(m, l):
                    run *= self.rho[i - 1]
                resid[l, m] = run * s_l
        return amp, resid


@dataclass(frozen=True)
class ObservationRecord:
    """One noisy utility observation: profile coordinates, fidelity, value."""

    x: tuple[float, ...]
    m: int
    y: float


def _check_fidelity(params: KernelParams, m: int) -> None:
    if not 1 <= m <= params.num_fidelities:
        raise ValueError(f"fidelity {m} outside ladder 1..{params.num_fidelities}")


def _sqdist(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Pairwise squared euclidean distances between row sets."""
    d = x1[:, None, :] - x2[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def kernel_matrix(
    params: KernelParams,
    x1: np.ndarray,
    m1: np.ndarray,
    x2: np.ndarray,
    m2: np.ndarray,
) -> np.ndarray:
    """Cross-covariance matrix between two batches of (profile, fidelity) points.

    x1: (n1, d), m1: (n1,) int fidelities; likewise x2/m2. Exact unrolled-cascade
    covariance; symmetric in the two argument batches.
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    x2 = np.atleast_2d(np.asarray(x2, dtype=float))
    m1 = np.asarray(m1, dtype=int)
    m2 = np.asarray(m2, dtype=int)
    for m in np.unique(np.concatenate([m1, m2])):
        _check_fidelity(params, int(m))
    amp, resid = params.amplitude_table()
    sq = _sqdist(x1, x2)
    out = np.outer(amp[m1], amp[m2]) * np.exp(-params.h * sq)
    for l in range(1, params.num_fidelities):
        w1 = resid[l, m1]
        w2 = resid[l, m2]
        if np.any(w1) and np.any(w2):
            out += np.outer(w1, w2) * np.exp(-params.zeta[l - 1] * sq)
    return out


def kernel_eval(
    params: KernelParams,
    x: np.ndarray,
    m: int,
    x2: np.ndarray,
    m2: int,
) -> float:
    """Scalar covariance cov(u^(m)(x), u^(m2)(x2)) under the cascade prior."""
    _check_fidelity(params, m)
    _check_fidelity(params, m2)
    a = np.atleast_2d(np.asarray(x, dtype=float))
    b = np.atleast_2d(np.asarray(x2, dtype=float))
    return float(kernel_matrix(params, a, np.array([m]), b, np.array([m2]))[0, 0])


def _cholesky_with_escalation(mat: np.ndarray, what: str) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of mat + jitter*I, escalating jitter x10 on failure."""
    jitter = BASE_JITTER
    while jitter <= MAX_JITTER:
        try:
            lower = np.linalg.cholesky(mat + jitter * np.eye(mat.shape[0]))
            return lower, jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    cond = float(np.linalg.cond(mat)) if mat.size else float("nan")
    raise MogpNumericsError(
        f"{what} not positive definite after jitter escalation to {MAX_JITTER:g} "
        f"(condition number {cond:.3e})",
        condition=cond,
    )


@dataclass(frozen=True)
class MogpModel:
    """One player's surrogate state: kernel, noise, data, cached factorization.

    Treat instances as immutable; append_observation returns a new model. The
    cached factor is the lower Cholesky of K + (sigma2 + jitter) I over the
    training rows.
    """

    params: KernelParams
    sigma2: float
    train_x: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))
    train_m: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    train_y: np.ndarray = field(default_factory=lambda: np.zeros(0))
    chol: np.ndarray | None = None
    jitter: float = BASE_JITTER

    def __post_init__(self):
        if self.sigma2 <= 0:
            raise ValueError("observation noise variance must be positive")

    @property
    def num_observations(self) -> int:
        return len(self.train_y)

    @property
    def data(self) -> list[ObservationRecord]:
        return [
            ObservationRecord(tuple(x), int(m), float(y))
            for x, m, y in zip(self.train_x, self.train_m, self.train_y)
        ]


def empty_model(params: KernelParams, sigma2: float, dim: int) -> MogpModel:
    return MogpModel(
        params=params,
        sigma2=sigma2,
        train_x=np.zeros((0, dim)),
        train_m=np.zeros(0, dtype=int),
        train_y=np.zeros(0),
    )


def build_model(
    params: KernelParams,
    sigma2: float,
    train_x: np.ndarray,
    train_m: np.ndarray,
    train_y: np.ndarray,
) -> MogpModel:
    """Model from a batch of observations, factorizing the regularized Gram."""
    train_x = np.atleast_2d(np.asarray(train_x, dtype=float))
    train_m = np.asarray(train_m, dtype=int)
    train_y = np.asarray(train_y, dtype=float)
    if len(train_y) == 0:
        return empty_model(params, sigma2, train_x.shape[1] if train_x.size else 1)
    gram = kernel_matrix(params, train_x, train_m, train_x, train_m)
    gram[np.diag_indices_from(gram)] += sigma2
    chol, jitter = _cholesky_with_escalation(gram, "regularized Gram matrix")
    return MogpModel(
        params=params,
        sigma2=sigma2,
        train_x=train_x,
        train_m=train_m,
        train_y=train_y,
        chol=chol,
        jitter=jitter,
    )


def append_observation(model: MogpModel, rec: ObservationRecord) -> MogpModel:
    """Model with one more observation.

    Extends the cached Cholesky factor by one row when numerically safe,
    falling back to a full refactorization (with jitter escalation) otherwise;
    both paths agree with batch construction to well below 1e-10.
    """
    _check_fidelity(model.params, rec.m)
    x = np.asarray(rec.x, dtype=float)[None, :]
    if model.num_observations and x.shape[1] != model.train_x.shape[1]:
        raise ValueError("profile dimension mismatch")
    new_x = np.vstack([model.train_x, x]) if model.num_observations else x
    new_m = np.concatenate([model.train_m, [rec.m]])
    new_y = np.concatenate([model.train_y, [rec.y]])
    t = model.num_observations
    if t and model.chol is not None:
        kvec = kernel_matrix(
            model.params, model.train_x, model.train_m, x, np.array([rec.m])
        )[:, 0]
        w = scipy.linalg.solve_triangular(model.chol, kvec, lower=True)
        s2 = 1.0 + model.sigma2 + model.jitter - float(w @ w)
        if s2 > 1e-12:
            chol = np.zeros((t + 1, t + 1))
            chol[:t, :t] = model.chol
            chol[t, :t] = w
            chol[t, t] = np.sqrt(s2)
            return replace(
                model, train_x=new_x, train_m=new_m, train_y=new_y, chol=chol
            )
    return build_model(model.params, model.sigma2, new_x, new_m, new_y)


def posterior_batch(
    model: MogpModel, x: np.ndarray, m: np.ndarray | int
) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance at a batch of (profile, fidelity) queries.

    Empty data gives the zero-mean unit-variance prior. Variances are clipped
    at zero against roundoff; the cascade guarantees they never exceed the
    unit prior variance.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    mvec = np.full(x.shape[0], m, dtype=int) if np.isscalar(m) else np.asarray(m, int)
    for lev in np.unique(mvec):
        _check_fidelity(model.params, int(lev))
    if model.num_observations == 0:
        return np.zeros(x.shape[0]), np.ones(x.shape[0])
    kstar = kernel_matrix(model.params, model.train_x, model.train_m, x, mvec)
    v = scipy.linalg.solve_triangular(model.chol, kstar, lower=True)
    u = scipy.linalg.solve_triangular(model.chol, model.train_y, lower=True)
    mean = v.T @ u
    var = 1.0 - np.einsum("ij,ij->j", v, v)
    return mean, np.maximum(var, 0.0)


def posterior(model: MogpModel, x: np.ndarray, m: int) -> tuple[float, float]:
    """Posterior mean and variance at one (profile, fidelity) query."""
    mean, var = posterior_batch(model, np.atleast_2d(np.asarray(x, float)), m)
    return float(mean[0]), float(var[0])


def mutual_information_single(model: MogpModel, x: np.ndarray, m: int) -> float:
    """Information (nats) one noisy query at (x, m) carries about its latent.

    Equals 0.5 * ln(1 + posterior_variance / sigma2).
    """
    _, var = posterior(model, x, m)
    return 0.5 * float(np.log1p(var / model.sigma2))


def mutual_information_sequence(
    model0: MogpModel,
    seq: list[tuple[np.ndarray, int]],
) -> float:
    """Joint information (nats) a query sequence carries about the true utilities.

    seq lists (profile, fidelity) pairs. Computes the mutual information between
    the noisy observation vector at the listed fidelities and the top-fidelity
    utility values at the listed profiles, conditioned on model0's data:

        I = 0.5 * [logdet(K_obs + s2 I) - logdet(K_obs - C K_uu^-1 C^T + s2 I)]

    with K_obs / K_uu / C the posterior (co)variances of the queried latents and
    of the top-fidelity values, all conditioned on model0's observations.
    """
    if not seq:
        raise ValueError("query sequence must be nonempty")
    params = model0.params
    top = params.num_fidelities
    qx = np.vstack([np.atleast_1d(np.asarray(x, dtype=float)) for x, _ in seq])
    qm = np.array([m for _, m in seq], dtype=int)
    for m in np.unique(qm):
        _check_fidelity(params, int(m))
    s = len(seq)
    all_x = np.vstack([qx, qx])
    all_m = np.concatenate([qm, np.full(s, top, dtype=int)])
    joint = kernel_matrix(params, all_x, all_m, all_x, all_m)
    if model0.num_observations:
        kstar = kernel_matrix(params, model0.train_x, model0.train_m, all_x, all_m)
        v = scipy.linalg.solve_triangular(model0.chol, kstar, lower=True)
        joint = joint - v.T @ v
    k_obs = joint[:s, :s]
    k_uu = joint[s:, s:]
    cross = joint[:s, s:]
    lu, _ = _cholesky_with_escalation(k_uu, "top-fidelity block in joint information")
    w = scipy.linalg.solve_triangular(lu, cross.T, lower=True)
    cond = k_obs - w.T @ w
    noise = model0.sigma2 * np.eye(s)
    sign_a, logdet_a = np.linalg.slogdet(k_obs + noise)
    sign_b, logdet_b = np.linalg.slogdet(cond + noise)
    if sign_a <= 0 or sign_b <= 0:
        raise MogpNumericsError("joint-information determinant lost positivity")
    return max(0.5 * float(logdet_a - logdet_b), 0.0)
