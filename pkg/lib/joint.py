"""
Joint mediator models — correlated (latent) normal errors across mediator equations.

Families:
  continuous    2-3 linear equations, Sigma = residual covariance (denominator n)
  probit        2 mediators: bivariate probit; 3 mediators: trivariate probit
  mixed         one binary + one continuous mediator, f(M_cont) * P(M_bin | M_cont)
  independent   univariate fits with diagonal Sigma (the independent-mediators baseline)

Every family is estimated on an unconstrained scale: rho = tanh(eta), sigma = exp(tau),
and 3x3 correlation matrices through canonical partial correlations. Objectives are
per-observation mean log-likelihoods; fits scale the gradient tolerance by 1/n
so the summed score stays within FIT_TOL.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from lib.data import Dataset, MediatorKind, VariableRoles
from lib.errors import ConvergenceError, DesignError, ModelFitError, NumericalError, SeparationError, ValidationError
from lib.numerics import (
    RngLike,
    as_generator,
    bvn_cdf,
    bvn_pdf,
    chol_lower,
    correlation_of,
    log_norm_cdf,
    maximize,
    norm_cdf,
    norm_pdf,
    tvn_cdf,
)
from lib.regression import (
    SEPARATION_CAP,
    DesignSpec,
    Rows,
    UnivariateMediatorFit,
    check_rank,
    columns_of,
    fit_ols,
    fit_probit,
    normal_loglik,
    probit_loglik,
)

log = logging.getLogger("decomp.joint")

NATURAL = "natural"
BOUNDARY_RHO = 0.99
ETA_MAX = 7.0          # |tanh(7)| = 0.99999834, keeps bvn_cdf inside its domain
SIGMA_FLOOR = 1e-8
FIT_TOL = 1e-6         # max-norm of the summed score
TVN_PANELS = 8

FAMILIES = ("continuous", "probit", "mixed", "independent")

Assignment = Union[int, str]


# ── Mediator specs ───────────────────────────────────────────

@dataclass(frozen=True)
class JointMediatorSpec:
    """Mediators in order, the group column, confounders and one design per equation."""

    mediators: Tuple[Tuple[str, MediatorKind], ...]
    group: str
    confounders: Tuple[str, ...] = ()
    designs: Tuple[DesignSpec, ...] = ()
    within_group: bool = False

    def __post_init__(self):
        meds = tuple((name, MediatorKind.parse(kind)) for name, kind in self.mediators)
        object.__setattr__(self, "mediators", meds)
        object.__setattr__(self, "confounders", tuple(self.confounders))
        if not 2 <= len(meds) <= 3:
            raise DesignError(f"Joint mediator models take 2 or 3 mediators, got {len(meds)}")
        kinds = {k for _, k in meds}
        if len(kinds) > 1 and len(meds) != 2:
            raise DesignError("Mixed binary/continuous joint models are supported for exactly 2 mediators")

        regressors = [] if self.within_group else [(self.group,)]
        designs = tuple(self.designs) or tuple(
            DesignSpec(((), *regressors, *[(c,) for c in self.confounders])) for _ in meds
        )
        if len(designs) != len(meds):
            raise DesignError(f"{len(meds)} mediator equations but {len(designs)} designs")
        names = {name for name, _ in meds}
        for (name, _), design in zip(meds, designs):
            if not self.within_group and (self.group,) not in design.terms:
                raise DesignError(f"Design for '{name}' must contain the group main effect '{self.group}'")
            used = names.intersection(design.columns)
            if used:
                raise DesignError(f"Design for '{name}' references mediator columns {sorted(used)}")
        object.__setattr__(self, "designs", designs)

    @classmethod
    def from_roles(cls, roles: VariableRoles) -> "JointMediatorSpec":
        return cls(mediators=roles.mediators, group=roles.group, confounders=roles.confounders)

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self.mediators]

    @property
    def kinds(self) -> List[MediatorKind]:
        return [kind for _, kind in self.mediators]

    @property
    def k(self) -> int:
        return len(self.mediators)

    @property
    def family(self) -> str:
        kinds = set(self.kinds)
        if kinds == {MediatorKind.CONTINUOUS}:
            return "continuous"
        if kinds == {MediatorKind.BINARY}:
            return "probit"
        return "mixed"

    def without_group(self) -> "JointMediatorSpec":
        """Same equations with the group term dropped (for fits within one group)."""
        stripped = tuple(DesignSpec(tuple(t for t in d.terms if self.group not in t)) for d in self.designs)
        return JointMediatorSpec(self.mediators, self.group, self.confounders, stripped, within_group=True)


# ── Fit ──────────────────────────────────────────────────────

@dataclass
class JointMediatorFit:
    spec: JointMediatorSpec
    family: str
    coef: Tuple[np.ndarray, ...]
    Sigma: np.ndarray
    loglik: float
    converged: bool
    boundary: bool = False
    iterations: int = 0
    message: str = ""
    marginals: List[UnivariateMediatorFit] = field(default_factory=list, repr=False)

    @property
    def kinds(self) -> List[MediatorKind]:
        return self.spec.kinds

    @property
    def correlation(self) -> np.ndarray:
        return correlation_of(self.Sigma)

    def correlations(self) -> Dict[str, float]:
        """Residual correlations keyed 'M1~M2'."""
        R = self.correlation
        names = self.spec.names
        return {
            f"{names[i]}~{names[j]}": float(R[i, j])
            for i in range(len(names)) for j in range(i + 1, len(names))
        }

    def linear_predictors(self, rows: Rows, assignment: Optional[Sequence[Assignment]] = None) -> np.ndarray:
        """n x K linear predictors with each equation's group term set by `assignment`."""
        cols = columns_of(rows)
        assignment = _check_assignment(assignment, self.spec.k)
        out = []
        for j, (design, coef) in enumerate(zip(self.spec.designs, self.coef)):
            a = assignment[j]
            overrides = {} if a == NATURAL else {self.spec.group: np.asarray(float(a))}
            out.append(design.matrix(cols, overrides) @ coef)
        return np.column_stack(out)

    def decorrelated(self) -> "JointMediatorFit":
        """Copy with the off-diagonal entries of Sigma set to zero."""
        return JointMediatorFit(
            spec=self.spec, family=self.family, coef=self.coef,
            Sigma=np.diag(np.diag(self.Sigma)), loglik=float("nan"),
            converged=self.converged, boundary=self.boundary, message="decorrelated",
        )

    def summary(self) -> Dict:
        return {
            "family": self.family,
            "mediators": self.spec.names,
            "kinds": [k.value for k in self.kinds],
            "coef": {
                name: dict(zip(d.names, c.tolist()))
                for name, d, c in zip(self.spec.names, self.spec.designs, self.coef)
            },
            "Sigma": self.Sigma.tolist(),
            "correlations": self.correlations(),
            "loglik": self.loglik,
            "converged": self.converged,
            "boundary": self.boundary,
        }


def _check_assignment(assignment: Optional[Sequence[Assignment]], k: int) -> Tuple[Assignment, ...]:
    if assignment is None or assignment == NATURAL:
        return (NATURAL,) * k
    assignment = tuple(assignment)
    if len(assignment) != k:
        raise ValidationError(f"Assignment has {len(assignment)} entries for {k} mediators")
    for a in assignment:
        if a != NATURAL and a not in (0, 1):
            raise ValidationError(f"Assignment entries must be 0, 1 or '{NATURAL}', got {a!r}")
    return assignment


# ── Shared helpers ───────────────────────────────────────────

def _equations(rows: Rows, spec: JointMediatorSpec) -> Tuple[List[np.ndarray], np.ndarray]:
    cols = columns_of(rows)
    Xs = []
    for design in spec.designs:
        X = design.matrix(cols)
        check_rank(X, design)
        Xs.append(X)
    missing = [m for m in spec.names if m not in cols]
    if missing:
        raise ValidationError(f"Rows are missing mediator columns: {missing}")
    M = np.column_stack([np.asarray(cols[m], dtype=np.float64) for m in spec.names])
    return Xs, M


def _offsets(Xs: Sequence[np.ndarray]) -> List[slice]:
    out, start = [], 0
    for X in Xs:
        out.append(slice(start, start + X.shape[1]))
        start += X.shape[1]
    return out


def _rho(eta: float) -> float:
    return math.tanh(min(max(eta, -ETA_MAX), ETA_MAX))


def _drho(eta: float) -> float:
    if abs(eta) >= ETA_MAX:
        return 0.0
    r = math.tanh(eta)
    return 1.0 - r * r


def _check_coefficients(coef: Sequence[np.ndarray], names: Sequence[str], family: str) -> None:
    for name, c in zip(names, coef):
        if np.max(np.abs(c)) > SEPARATION_CAP:
            raise SeparationError(
                f"{family} model: coefficients for '{name}' exceeded {SEPARATION_CAP:g} (perfect separation)"
            )


def _finish(result, label: str, strict: bool, boundary: bool) -> None:
    if result.converged or boundary:
        return
    msg = f"{label} did not converge after {result.iterations} iterations ({result.message})"
    if strict:
        raise ConvergenceError(msg)
    log.warning(msg)


def _fit_tol(n: int) -> float:
    """Gradient tolerance on the mean objective that bounds the summed score by FIT_TOL."""
    return FIT_TOL / max(n, 1)


def _boundary_warning(label: str, rhos: Sequence[float]) -> bool:
    worst = max(abs(r) for r in rhos)
    if worst > BOUNDARY_RHO:
        log.warning(f"{label}: residual correlation at the boundary (|rho| = {worst:.6f})")
        return True
    return False


# ── Continuous family ────────────────────────────────────────

def continuous_loglik(coef: Sequence[np.ndarray], Sigma: np.ndarray, Xs: Sequence[np.ndarray], M: np.ndarray) -> float:
    """Multivariate normal log-likelihood of the residual vectors."""
    L = chol_lower(Sigma)
    resid = np.column_stack([M[:, j] - X @ c for j, (X, c) in enumerate(zip(Xs, coef))])
    z = np.linalg.solve(L, resid.T)
    n, k = resid.shape
    logdet = 2.0 * float(np.log(np.diag(L)).sum())
    return float(-0.5 * (n * k * math.log(2.0 * math.pi) + n * logdet + (z * z).sum()))


def fit_joint_continuous(data: Rows, spec: JointMediatorSpec) -> JointMediatorFit:
    """Equation-wise least squares (the joint MLE when all regressors are shared)."""
    if spec.family != "continuous":
        raise DesignError(f"fit_joint_continuous needs continuous mediators, got {[k.value for k in spec.kinds]}")
    Xs, M = _equations(data, spec)
    coef, resid = [], []
    for j, X in enumerate(Xs):
        c, *_ = np.linalg.lstsq(X, M[:, j], rcond=None)
        coef.append(c)
        resid.append(M[:, j] - X @ c)
    R = np.column_stack(resid)
    Sigma = R.T @ R / R.shape[0]
    Sigma = (Sigma + Sigma.T) / 2.0
    try:
        chol_lower(Sigma)
    except NumericalError as e:
        raise NumericalError(f"Residual covariance of {spec.names} is singular (collinear mediators?): {e}")

    ll = continuous_loglik(coef, Sigma, Xs, M)
    fit = JointMediatorFit(spec=spec, family="continuous", coef=tuple(coef), Sigma=Sigma,
                           loglik=ll, converged=True, message="closed form")
    fit.boundary = _boundary_warning("continuous joint model", fit.correlations().values())
    log.info(f"Continuous joint model: loglik={ll:.4f} rho={fit.correlations()}")
    return fit


# ── Bivariate probit ─────────────────────────────────────────

def bivariate_probit_cells(xb1, xb2, rho: float) -> np.ndarray:
    """n x 4 cell probabilities in order (0,0), (0,1), (1,0), (1,1)."""
    xb1, xb2 = np.asarray(xb1, dtype=np.float64), np.asarray(xb2, dtype=np.float64)
    return np.column_stack([
        bvn_cdf(-xb1, -xb2, rho),
        bvn_cdf(-xb1, xb2, -rho),
        bvn_cdf(xb1, -xb2, -rho),
        bvn_cdf(xb1, xb2, rho),
    ])


class BivariateProbitObjective:
    """Mean log-likelihood and analytic gradient over theta = (gamma_1, gamma_2, eta)."""

    def __init__(self, Xs: Sequence[np.ndarray], M: np.ndarray):
        self.Xs = list(Xs)
        self.q = 2.0 * M - 1.0
        self.blocks = _offsets(self.Xs)
        self.p = self.blocks[-1].stop + 1

    def unpack(self, theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float]:
        return theta[self.blocks[0]], theta[self.blocks[1]], float(theta[-1])

    def _parts(self, theta):
        g1, g2, eta = self.unpack(theta)
        rho = _rho(eta)
        w1 = self.q[:, 0] * (self.Xs[0] @ g1)
        w2 = self.q[:, 1] * (self.Xs[1] @ g2)
        rs = self.q[:, 0] * self.q[:, 1] * rho
        P = np.maximum(bvn_cdf(w1, w2, rs), 1e-300)
        return w1, w2, rs, rho, eta, P

    def __call__(self, theta: np.ndarray) -> float:
        *_, P = self._parts(np.asarray(theta, dtype=np.float64))
        return float(np.log(P).mean())

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        w1, w2, rs, rho, eta, P = self._parts(np.asarray(theta, dtype=np.float64))
        s = np.sqrt(1.0 - rs * rs)
        d1 = norm_pdf(w1) * norm_cdf((w2 - rs * w1) / s)
        d2 = norm_pdf(w2) * norm_cdf((w1 - rs * w2) / s)
        n = w1.size
        g = np.empty(self.p)
        g[self.blocks[0]] = self.Xs[0].T @ (self.q[:, 0] * d1 / P) / n
        g[self.blocks[1]] = self.Xs[1].T @ (self.q[:, 1] * d2 / P) / n
        drho = float((self.q[:, 0] * self.q[:, 1] * bvn_pdf(w1, w2, rs) / P).sum()) / n
        g[-1] = drho * _drho(eta)
        return g


def fit_bivariate_probit(data: Rows, spec: JointMediatorSpec, strict: bool = True) -> JointMediatorFit:
    if spec.family != "probit" or spec.k != 2:
        raise DesignError("fit_bivariate_probit needs exactly two binary mediators")
    Xs, M = _equations(data, spec)
    cols = columns_of(data)
    starts = [fit_probit(cols, name, d) for name, d in zip(spec.names, spec.designs)]

    obj = BivariateProbitObjective(Xs, M)
    theta0 = np.concatenate([starts[0].coef, starts[1].coef, [0.0]])
    res = maximize(obj, theta0, grad=obj.gradient, tol=_fit_tol(M.shape[0]))

    g1, g2, eta = obj.unpack(res.x)
    _check_coefficients((g1, g2), spec.names, "bivariate probit")
    rho = _rho(eta)
    boundary = _boundary_warning("bivariate probit", [rho])
    _finish(res, "Bivariate probit", strict, boundary)

    n = M.shape[0]
    fit = JointMediatorFit(
        spec=spec, family="probit", coef=(g1.copy(), g2.copy()),
        Sigma=np.array([[1.0, rho], [rho, 1.0]]), loglik=res.value * n,
        converged=res.converged, boundary=boundary, iterations=res.iterations,
        message=res.message, marginals=starts,
    )
    log.info(f"Bivariate probit: loglik={fit.loglik:.4f} rho={rho:.4f} ({res.message})")
    return fit


# ── Trivariate probit ────────────────────────────────────────

def partial_to_correlation(z: Sequence[float]) -> np.ndarray:
    """3x3 correlation matrix from unconstrained (z12, z13, z23|1) via tanh partial correlations."""
    c12, c13, c23 = (_rho(float(v)) for v in z)
    L = np.array([
        [1.0, 0.0, 0.0],
        [c12, math.sqrt(1.0 - c12 * c12), 0.0],
        [c13, c23 * math.sqrt(1.0 - c13 * c13), math.sqrt((1.0 - c13 * c13) * (1.0 - c23 * c23))],
    ])
    R = L @ L.T
    np.fill_diagonal(R, 1.0)
    return R


def correlation_to_partial(R: np.ndarray) -> np.ndarray:
    r12, r13, r23 = R[0, 1], R[0, 2], R[1, 2]
    c23 = (r23 - r12 * r13) / math.sqrt((1.0 - r12 * r12) * (1.0 - r13 * r13))
    return np.arctanh(np.clip([r12, r13, c23], -math.tanh(ETA_MAX), math.tanh(ETA_MAX)))


CORR_PAIRS = ((0, 1), (0, 2), (1, 2))


class TrivariateProbitObjective:
    """Mean log-likelihood and analytic gradient over theta = (gamma_1, gamma_2, gamma_3, z12, z13, z23|1).

    With signed arguments w_j = q_j x_j'gamma_j and signed correlations r_ij:
      dP/dw_i  = phi(w_i) * Phi2 of the other two given Z_i = w_i
      dP/dr_ij = phi2(w_i, w_j; r_ij) * Phi of the third given Z_i = w_i, Z_j = w_j
    """

    def __init__(self, Xs: Sequence[np.ndarray], M: np.ndarray, panels: int = TVN_PANELS):
        self.Xs = list(Xs)
        self.q = 2.0 * M - 1.0
        self.blocks = _offsets(self.Xs)
        self.p = self.blocks[-1].stop + 3
        self.panels = panels
        bits = (M > 0.5).astype(int)
        pattern = bits[:, 0] * 4 + bits[:, 1] * 2 + bits[:, 2]
        self.groups = [(pattern == code, self.q[np.argmax(pattern == code)]) for code in np.unique(pattern)]

    def unpack(self, theta: np.ndarray):
        return [theta[b] for b in self.blocks], theta[-3:]

    def _signed(self, theta: np.ndarray):
        coefs, z = self.unpack(np.asarray(theta, dtype=np.float64))
        W = np.column_stack([self.q[:, j] * (X @ c) for j, (X, c) in enumerate(zip(self.Xs, coefs))])
        return z, partial_to_correlation(z), W

    def probabilities(self, theta: np.ndarray) -> np.ndarray:
        _, R, W = self._signed(theta)
        P = np.empty(W.shape[0])
        for rows, signs in self.groups:
            Rs = R * np.outer(signs, signs)
            P[rows] = tvn_cdf(W[rows, 0], W[rows, 1], W[rows, 2], Rs, fixed_panels=self.panels)
        return P

    def __call__(self, theta: np.ndarray) -> float:
        return float(np.log(np.maximum(self.probabilities(theta), 1e-300)).mean())

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        z, R, W = self._signed(theta)
        P = np.maximum(self.probabilities(theta), 1e-300)
        n = W.shape[0]
        dW = np.empty_like(W)
        dR = np.zeros(3)
        for rows, signs in self.groups:
            Rs = R * np.outer(signs, signs)
            w, p_rows = W[rows], P[rows]
            for i in range(3):
                j, k = (m for m in range(3) if m != i)
                sij = math.sqrt(1.0 - Rs[i, j] ** 2)
                sik = math.sqrt(1.0 - Rs[i, k] ** 2)
                partial = (Rs[j, k] - Rs[i, j] * Rs[i, k]) / (sij * sik)
                dW[rows, i] = norm_pdf(w[:, i]) * bvn_cdf(
                    (w[:, j] - Rs[i, j] * w[:, i]) / sij, (w[:, k] - Rs[i, k] * w[:, i]) / sik, partial
                )
            for slot, (i, j) in enumerate(CORR_PAIRS):
                k = 3 - i - j
                r = np.array([Rs[i, k], Rs[j, k]])
                b = np.linalg.solve(np.array([[1.0, Rs[i, j]], [Rs[i, j], 1.0]]), r)
                sd = math.sqrt(1.0 - float(b @ r))
                cond = norm_cdf((w[:, k] - b[0] * w[:, i] - b[1] * w[:, j]) / sd)
                dP = bvn_pdf(w[:, i], w[:, j], Rs[i, j]) * cond
                dR[slot] += signs[i] * signs[j] * float((dP / p_rows).sum())

        g = np.empty(self.p)
        for j, (X, block) in enumerate(zip(self.Xs, self.blocks)):
            g[block] = X.T @ (self.q[:, j] * dW[:, j] / P) / n
        dR /= n

        # R12 = c12, R13 = c13, R23 = c12 c13 + c23 s12 s13
        c12, c13, c23 = (_rho(float(v)) for v in z)
        s12, s13 = math.sqrt(1.0 - c12 * c12), math.sqrt(1.0 - c13 * c13)
        dc = np.array([
            dR[0] + dR[2] * (c13 - c12 * c23 * s13 / s12),
            dR[1] + dR[2] * (c12 - c13 * c23 * s12 / s13),
            dR[2] * s12 * s13,
        ])
        g[-3:] = dc * np.array([_drho(float(v)) for v in z])
        return g



def fit_trivariate_probit(data: Rows, spec: JointMediatorSpec, strict: bool = True) -> JointMediatorFit:
    """The rectangle probability uses a fixed panel rule so the likelihood is smooth in theta."""
    if spec.family != "probit" or spec.k != 3:
        raise DesignError("fit_trivariate_probit needs exactly three binary mediators")
    Xs, M = _equations(data, spec)
    cols = columns_of(data)
    starts = [fit_probit(cols, name, d) for name, d in zip(spec.names, spec.designs)]

    obj = TrivariateProbitObjective(Xs, M)
    theta0 = np.concatenate([s.coef for s in starts] + [np.zeros(3)])
    res = maximize(obj, theta0, grad=obj.gradient, tol=_fit_tol(M.shape[0]))

    coefs, z = obj.unpack(res.x)
    _check_coefficients(coefs, spec.names, "trivariate probit")
    R = partial_to_correlation(z)
    boundary = _boundary_warning("trivariate probit", [R[0, 1], R[0, 2], R[1, 2]])
    _finish(res, "Trivariate probit", strict, boundary)

    fit = JointMediatorFit(
        spec=spec, family="probit", coef=tuple(c.copy() for c in coefs), Sigma=R,
        loglik=res.value * M.shape[0], converged=res.converged, boundary=boundary,
        iterations=res.iterations, message=res.message, marginals=starts,
    )
    log.info(f"Trivariate probit: loglik={fit.loglik:.4f} rho={fit.correlations()} ({res.message})")
    return fit


# ── Mixed binary / continuous ────────────────────────────────

class MixedObjective:
    """Mean log-likelihood over theta = (alpha, gamma, tau, eta), sigma = exp(tau), rho = tanh(eta).

    alpha belongs to the binary equation, gamma to the continuous one. The
    density factors as N(M_c; LP_c, sigma^2) * P(M_b | M_c) with conditional
    probit index t = (LP_b + (rho / sigma) e) / sqrt(1 - rho^2), e = M_c - LP_c.
    """

    def __init__(self, Xb: np.ndarray, yb: np.ndarray, Xc: np.ndarray, yc: np.ndarray):
        self.Xb, self.Xc = Xb, Xc
        self.q = 2.0 * yb - 1.0
        self.yc = yc
        self.pb, self.pc = Xb.shape[1], Xc.shape[1]
        self.p = self.pb + self.pc + 2

    def unpack(self, theta: np.ndarray):
        alpha = theta[: self.pb]
        gamma = theta[self.pb: self.pb + self.pc]
        return alpha, gamma, float(theta[-2]), float(theta[-1])

    def pack(self, alpha, gamma, sigma: float, rho: float) -> np.ndarray:
        return np.concatenate([alpha, gamma, [math.log(sigma), math.atanh(rho)]])

    def _parts(self, theta):
        alpha, gamma, tau, eta = self.unpack(np.asarray(theta, dtype=np.float64))
        sigma, rho = math.exp(tau), _rho(eta)
        s = math.sqrt(1.0 - rho * rho)
        lp1 = self.Xb @ alpha
        e = self.yc - self.Xc @ gamma
        t = (lp1 + rho * e / sigma) / s
        return sigma, rho, s, eta, e, t

    def __call__(self, theta: np.ndarray) -> float:
        sigma, rho, s, eta, e, t = self._parts(theta)
        ll = log_norm_cdf(self.q * t) - math.log(sigma) - 0.5 * math.log(2.0 * math.pi) - e * e / (2.0 * sigma * sigma)
        return float(ll.mean())

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        sigma, rho, s, eta, e, t = self._parts(theta)
        n = e.size
        lam = self.q * np.exp(-0.5 * t * t - 0.5 * math.log(2.0 * math.pi) - log_norm_cdf(self.q * t))
        g = np.empty(self.p)
        g[: self.pb] = self.Xb.T @ (lam / s) / n
        g[self.pb: self.pb + self.pc] = self.Xc.T @ (-lam * (rho / sigma) / s + e / (sigma * sigma)) / n
        g[-2] = float((-lam * rho * e / (sigma * s) - 1.0 + e * e / (sigma * sigma)).sum()) / n
        dt_drho = (e / sigma) / s + t * rho / (s * s)
        g[-1] = float((lam * dt_drho).sum()) / n * _drho(eta)
        return g


def fit_mixed(data: Rows, spec: JointMediatorSpec, strict: bool = True) -> JointMediatorFit:
    if spec.family != "mixed":
        raise DesignError("fit_mixed needs one binary and one continuous mediator")
    Xs, M = _equations(data, spec)
    cols = columns_of(data)
    b = spec.kinds.index(MediatorKind.BINARY)
    c = 1 - b
    names = spec.names

    start_b = fit_probit(cols, names[b], spec.designs[b])
    start_c = fit_ols(cols, names[c], spec.designs[c])
    resid = M[:, c] - Xs[c] @ start_c.coef
    sigma0 = math.sqrt(float(resid @ resid) / resid.size)
    if sigma0 < SIGMA_FLOOR:
        raise NumericalError(f"Residual scale of '{names[c]}' collapsed to zero")

    obj = MixedObjective(Xs[b], M[:, b], Xs[c], M[:, c])
    theta0 = obj.pack(start_b.coef, start_c.coef, sigma0, 0.0)
    res = maximize(obj, theta0, grad=obj.gradient, tol=_fit_tol(M.shape[0]))

    alpha, gamma, tau, eta = obj.unpack(res.x)
    _check_coefficients((alpha,), (names[b],), "mixed")
    sigma, rho = math.exp(tau), _rho(eta)
    if not np.isfinite(sigma) or sigma < SIGMA_FLOOR:
        raise NumericalError(f"Mixed model: residual scale of '{names[c]}' collapsed (sigma = {sigma:.3g})")
    boundary = _boundary_warning("mixed model", [rho])
    _finish(res, "Mixed joint model", strict, boundary)

    Sigma = np.empty((2, 2))
    Sigma[b, b] = 1.0
    Sigma[c, c] = sigma * sigma
    Sigma[b, c] = Sigma[c, b] = rho * sigma
    coef = [None, None]
    coef[b], coef[c] = alpha.copy(), gamma.copy()
    fit = JointMediatorFit(
        spec=spec, family="mixed", coef=tuple(coef), Sigma=Sigma,
        loglik=res.value * M.shape[0], converged=res.converged, boundary=boundary,
        iterations=res.iterations, message=res.message, marginals=[start_b, start_c],
    )
    log.info(f"Mixed joint model: loglik={fit.loglik:.4f} sigma={sigma:.4f} rho={rho:.4f} ({res.message})")
    return fit


# ── Independent baseline ─────────────────────────────────────

def independent_from_marginals(spec: JointMediatorSpec, marginals: Sequence[UnivariateMediatorFit]) -> JointMediatorFit:
    """Wrap univariate fits as a JointMediatorFit with diagonal Sigma."""
    if len(marginals) != spec.k:
        raise ValidationError(f"Expected {spec.k} univariate fits, got {len(marginals)}")
    variances = []
    for (name, kind), m in zip(spec.mediators, marginals):
        if m.name != name or m.kind is not kind:
            raise ValidationError(f"Univariate fit for '{m.name}' ({m.kind.value}) does not match mediator '{name}'")
        variances.append(1.0 if kind is MediatorKind.BINARY else float(m.sigma) ** 2)
    return JointMediatorFit(
        spec=spec, family="independent", coef=tuple(m.coef.copy() for m in marginals),
        Sigma=np.diag(variances), loglik=float(sum(m.loglik for m in marginals)),
        converged=all(m.converged for m in marginals), message="univariate fits",
        marginals=list(marginals),
    )


def fit_independent(data: Rows, spec: JointMediatorSpec) -> JointMediatorFit:
    """One OLS or probit model per mediator; continuous sigma uses denominator n - p."""
    cols = columns_of(data)
    marginals = []
    for (name, kind), design in zip(spec.mediators, spec.designs):
        if kind is MediatorKind.BINARY:
            marginals.append(fit_probit(cols, name, design))
        else:
            marginals.append(fit_ols(cols, name, design))
    return independent_from_marginals(spec, marginals)


def independence_loglik(data: Rows, spec: JointMediatorSpec, fit: JointMediatorFit) -> float:
    """Joint log-likelihood at the fit's coefficients with all correlations set to zero
    (continuous variances kept at their MLE given those coefficients)."""
    Xs, M = _equations(data, spec)
    total = 0.0
    for j, (kind, X, c) in enumerate(zip(spec.kinds, Xs, fit.coef)):
        if kind is MediatorKind.BINARY:
            total += probit_loglik(c, X, M[:, j])
        else:
            r = M[:, j] - X @ c
            total += normal_loglik(c, math.sqrt(float(r @ r) / r.size), X, M[:, j])
    return total


# ── Dispatch ─────────────────────────────────────────────────

def fit_joint(data: Rows, spec: JointMediatorSpec, family: Optional[str] = None) -> JointMediatorFit:
    """Fit the joint model for the spec's mediator kinds, or the independent baseline."""
    family = family or spec.family
    if family not in FAMILIES:
        raise DesignError(f"Unknown mediator model family '{family}'")
    if family == "independent":
        return fit_independent(data, spec)
    if family != spec.family:
        raise DesignError(f"Family '{family}' does not match mediator kinds {[k.value for k in spec.kinds]}")
    if family == "continuous":
        return fit_joint_continuous(data, spec)
    if family == "mixed":
        return fit_mixed(data, spec)
    if spec.k == 2:
        return fit_bivariate_probit(data, spec)
    return fit_trivariate_probit(data, spec)


# ── Simulation ───────────────────────────────────────────────

def mediator_draws(
    fit: JointMediatorFit,
    rows: Rows,
    assignment: Optional[Sequence[Assignment]],
    z: np.ndarray,
) -> np.ndarray:
    """Mediators under `assignment` from a given n x K standard-normal block `z`.

    Errors are z @ L.T with L the Cholesky factor of Sigma; binary mediators
    are I(latent > 0). The same `z` under different assignments gives common
    random numbers across interventions.
    """
    if not fit.converged and not fit.boundary:
        raise ModelFitError(f"Cannot simulate from an unconverged {fit.family} fit")
    lp = fit.linear_predictors(rows, assignment)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != lp.shape:
        raise ValidationError(f"Error block has shape {z.shape}, expected {lp.shape}")
    latent = lp + z @ chol_lower(fit.Sigma).T
    for j, kind in enumerate(fit.kinds):
        if kind is MediatorKind.BINARY:
            latent[:, j] = (latent[:, j] > 0.0).astype(np.float64)
    return latent


def simulate_mediators(
    fit: JointMediatorFit,
    rows: Rows,
    assignment: Optional[Sequence[Assignment]],
    rng: RngLike,
) -> np.ndarray:
    """One joint draw of all mediators per row, shape (n, K)."""
    assignment = _check_assignment(assignment, fit.spec.k)
    n = fit.spec.designs[0].matrix(rows).shape[0]
    z = as_generator(rng).standard_normal((n, fit.spec.k))
    return mediator_draws(fit, rows, assignment, z)


# ── Diagnostics ──────────────────────────────────────────────

def covariance_equality_check(data: Dataset, spec: JointMediatorSpec) -> Dict:
    """Fit the joint model separately within A=0 and A=1 and compare the Sigma estimates."""
    cols = columns_of(data)
    a = np.asarray(cols[spec.group])
    inner = spec.without_group()
    sigmas, rhos = {}, {}
    for g in (0, 1):
        mask = a == g
        subset = {name: np.asarray(values)[mask] for name, values in cols.items()}
        try:
            fit = fit_joint(subset, inner)
        except (ModelFitError, DesignError, ValidationError) as e:
            raise type(e)(f"group {spec.group}={g}: {e.message}")
        sigmas[g] = fit.Sigma
        rhos[g] = fit.correlations()
        log.info(f"Group {g}: n={int(mask.sum())} Sigma={np.round(fit.Sigma, 4).tolist()}")

    diff = sigmas[1] - sigmas[0]
    return {
        "sigma": {g: s.tolist() for g, s in sigmas.items()},
        "correlations": rhos,
        "difference": diff.tolist(),
        "max_abs_difference": float(np.max(np.abs(diff))),
    }
