"""
Univariate model fitting.

- fit_logistic: outcome model logit P(Y=1) = x'beta, Newton/IRLS with step halving.
- fit_ols: linear mediator model (independent-mediators baseline).
- fit_probit: probit mediator model P(M=1) = Phi(x'gamma), Newton with the
  observed information.

Design matrices are built from a DesignSpec: an ordered tuple of terms, where a
term is a tuple of column names: () is the intercept, ("A",) a main effect and
("M1", "M2") the exact product of two stored columns (no centering).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import special

from lib.data import Dataset, MediatorKind, VariableRoles
from lib.errors import ConvergenceError, DesignError, SeparationError, ValidationError
from lib.numerics import log_norm_cdf, norm_cdf

log = logging.getLogger("decomp.regression")

SEPARATION_CAP = 30.0
SCORE_TOL = 1e-6
MAX_NEWTON_ITER = 100
SEPARATION_FIT_TOL = 1e-4

Term = Tuple[str, ...]
Rows = Union[Dataset, pd.DataFrame, Mapping[str, np.ndarray]]


# ── Design ───────────────────────────────────────────────────

@dataclass(frozen=True)
class DesignSpec:
    terms: Tuple[Term, ...]

    def __post_init__(self):
        terms = tuple(tuple(t) for t in self.terms)
        object.__setattr__(self, "terms", terms)
        for t in terms:
            if len(t) > 2:
                raise DesignError(f"Terms are intercept, main effect or a product of two columns: {t}")
        keys = [self._key(t) for t in terms]
        if len(set(keys)) != len(keys):
            raise DesignError(f"Design terms must be distinct: {self.names}")

    @staticmethod
    def _key(term: Term) -> Tuple[str, ...]:
        return tuple(sorted(term))

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(":".join(t) if t else "(intercept)" for t in self.terms)

    @property
    def columns(self) -> Tuple[str, ...]:
        seen = []
        for t in self.terms:
            for c in t:
                if c not in seen:
                    seen.append(c)
        return tuple(seen)

    @property
    def p(self) -> int:
        return len(self.terms)

    def index_of(self, term: Sequence[str]) -> int:
        key = self._key(tuple(term))
        for i, t in enumerate(self.terms):
            if self._key(t) == key:
                return i
        raise DesignError(f"Term {tuple(term)} not in design {self.names}")

    def matrix(self, rows: Rows, overrides: Optional[Mapping[str, np.ndarray]] = None) -> np.ndarray:
        """n x p design matrix. `overrides` replaces stored columns (e.g. a counterfactual group value)."""
        cols = columns_of(rows)
        overrides = overrides or {}
        missing = [c for c in self.columns if c not in cols and c not in overrides]
        if missing:
            raise ValidationError(f"Rows are missing design columns: {missing}")
        n = _row_count(cols, overrides)

        def get(name: str) -> np.ndarray:
            values = overrides[name] if name in overrides else cols[name]
            return np.broadcast_to(np.asarray(values, dtype=np.float64), (n,))

        X = np.empty((n, self.p))
        for j, t in enumerate(self.terms):
            if not t:
                X[:, j] = 1.0
            elif len(t) == 1:
                X[:, j] = get(t[0])
            else:
                X[:, j] = get(t[0]) * get(t[1])
        return X

    @classmethod
    def outcome(cls, roles: VariableRoles, interaction: bool = True) -> "DesignSpec":
        """beta0 + beta1 A + sum beta_j M_j [+ pairwise M_j M_k] + beta' C."""
        meds = roles.mediator_names
        terms = [(), (roles.group,), *[(m,) for m in meds]]
        if interaction:
            terms += [(meds[i], meds[j]) for i in range(len(meds)) for j in range(i + 1, len(meds))]
        terms += [(c,) for c in roles.confounders]
        return cls(tuple(terms))

    @classmethod
    def mediator(cls, roles: VariableRoles) -> "DesignSpec":
        """Intercept + group + confounders."""
        return cls(((), (roles.group,), *[(c,) for c in roles.confounders]))


def columns_of(rows: Rows) -> Mapping[str, np.ndarray]:
    if isinstance(rows, Dataset):
        return rows.columns
    if isinstance(rows, pd.DataFrame):
        return {c: rows[c].to_numpy(dtype=np.float64) for c in rows.columns}
    return rows


def _row_count(cols: Mapping[str, np.ndarray], overrides: Mapping[str, np.ndarray]) -> int:
    for source in (cols, overrides):
        for values in source.values():
            arr = np.asarray(values)
            if arr.ndim == 1:
                return arr.shape[0]
    raise ValidationError("Cannot infer the number of rows")


def check_rank(X: np.ndarray, spec: DesignSpec) -> None:
    n, p = X.shape
    if n < p:
        raise DesignError(f"Design has {p} terms but only {n} rows")
    rank = np.linalg.matrix_rank(X)
    if rank < p:
        raise DesignError(f"Design matrix is rank deficient (rank {rank} < {p}): {spec.names}")


# ── Fitted models ────────────────────────────────────────────

@dataclass
class OutcomeFit:
    spec: DesignSpec
    beta: np.ndarray
    loglik: float
    converged: bool
    iterations: int = 0
    score_norm: float = 0.0
    history: list = field(default_factory=list, repr=False)

    def coef(self) -> Dict[str, float]:
        return dict(zip(self.spec.names, self.beta.tolist()))


@dataclass
class UnivariateMediatorFit:
    name: str
    kind: MediatorKind
    spec: DesignSpec
    coef: np.ndarray
    sigma: Optional[float] = None
    loglik: float = float("nan")
    converged: bool = True

    def linear_predictor(self, rows: Rows, overrides: Optional[Mapping[str, np.ndarray]] = None) -> np.ndarray:
        return self.spec.matrix(rows, overrides) @ self.coef


# ── Newton driver for binary GLMs ────────────────────────────

def _logit_terms(eta: np.ndarray, y: np.ndarray):
    ll = y * eta - np.logaddexp(0.0, eta)
    mu = special.expit(eta)
    return ll, y - mu, mu * (1.0 - mu)


def _probit_terms(eta: np.ndarray, y: np.ndarray):
    q = 2.0 * y - 1.0
    ll = log_norm_cdf(q * eta)
    lam = q * np.exp(-0.5 * eta * eta - 0.5 * np.log(2.0 * np.pi) - ll)
    return ll, lam, lam * (lam + eta)


def _newton_binary(
    X: np.ndarray,
    y: np.ndarray,
    terms: Callable[[np.ndarray, np.ndarray], tuple],
    inverse_link: Callable[[np.ndarray], np.ndarray],
    label: str,
    start: Optional[np.ndarray] = None,
    tol: float = SCORE_TOL,
    max_iter: int = MAX_NEWTON_ITER,
):
    """Returns (beta, loglik, converged, iterations, score_norm, history).

    Converged means the summed score max-norm is <= tol. Each accepted step
    does not decrease the log-likelihood (step halving).
    """
    p = X.shape[1]
    beta = np.zeros(p) if start is None else np.asarray(start, dtype=np.float64).copy()
    ll_i, d1, d2 = terms(X @ beta, y)
    ll = float(ll_i.sum())
    history = [ll]

    for it in range(max_iter + 1):
        score = X.T @ d1
        score_norm = float(np.max(np.abs(score)))
        if score_norm <= tol:
            if np.max(np.abs(y - inverse_link(X @ beta))) < SEPARATION_FIT_TOL:
                raise SeparationError(f"{label}: fitted probabilities reproduce every response (perfect separation)")
            return beta, ll, True, it, score_norm, history
        if it == max_iter:
            break

        info = X.T @ (X * d2[:, None])
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise SeparationError(f"{label}: information matrix singular (perfect separation?)")
        if not np.all(np.isfinite(step)):
            raise SeparationError(f"{label}: non-finite Newton step (perfect separation?)")

        t = 1.0
        while True:
            cand = beta + t * step
            ll_i_c, d1_c, d2_c = terms(X @ cand, y)
            ll_c = float(ll_i_c.sum())
            if np.isfinite(ll_c) and ll_c >= ll - 1e-12 * abs(ll):
                break
            t /= 2.0
            if t < 1e-10:
                return beta, ll, False, it, score_norm, history
        beta, ll, d1, d2 = cand, ll_c, d1_c, d2_c
        history.append(ll)

        if np.max(np.abs(beta)) > SEPARATION_CAP:
            raise SeparationError(
                f"{label}: coefficient magnitude exceeded {SEPARATION_CAP:g} (perfect separation)"
            )

    return beta, ll, False, max_iter, score_norm, history


def _target(rows: Rows, name: str) -> np.ndarray:
    cols = columns_of(rows)
    if name not in cols:
        raise ValidationError(f"Rows are missing column '{name}'")
    return np.asarray(cols[name], dtype=np.float64)


def _binary_target(values: np.ndarray, label: str) -> np.ndarray:
    if not np.all((values == 0.0) | (values == 1.0)):
        raise ValidationError(f"{label} must be coded 0/1")
    return values


# ── Public fitting API ───────────────────────────────────────

def fit_logistic(data: Dataset, spec: DesignSpec, strict: bool = True) -> OutcomeFit:
    """Maximum-likelihood logistic regression of the outcome on `spec`."""
    y = _binary_target(data.outcome, f"Outcome '{data.roles.outcome}'")
    X = spec.matrix(data)
    check_rank(X, spec)
    beta, ll, converged, iters, score_norm, history = _newton_binary(X, y, _logit_terms, special.expit, "logistic outcome model")
    if not converged:
        msg = f"Logistic outcome model did not converge in {iters} iterations (score {score_norm:.3g})"
        if strict:
            raise ConvergenceError(msg)
        log.warning(msg)
    log.debug(f"fit_logistic: loglik={ll:.6f} iterations={iters}")
    return OutcomeFit(spec=spec, beta=beta, loglik=ll, converged=converged,
                      iterations=iters, score_norm=score_norm, history=history)


def fit_ols(data: Rows, target: str, spec: DesignSpec) -> UnivariateMediatorFit:
    """Least squares; sigma is the residual SD with denominator n - p."""
    y = _target(data, target)
    X = spec.matrix(data)
    check_rank(X, spec)
    n, p = X.shape
    if n - p <= 0:
        raise DesignError(f"OLS for '{target}' has no residual degrees of freedom (n={n}, p={p})")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    rss = float(resid @ resid)
    sigma = float(np.sqrt(rss / (n - p)))
    s2_mle = rss / n
    ll = -0.5 * n * (np.log(2.0 * np.pi * s2_mle) + 1.0) if s2_mle > 0 else float("inf")
    return UnivariateMediatorFit(name=target, kind=MediatorKind.CONTINUOUS, spec=spec,
                                 coef=coef, sigma=sigma, loglik=float(ll))


def fit_probit(data: Rows, target: str, spec: DesignSpec, strict: bool = True) -> UnivariateMediatorFit:
    """Probit MLE, latent error SD fixed at 1."""
    y = _binary_target(_target(data, target), f"Mediator '{target}'")
    X = spec.matrix(data)
    check_rank(X, spec)
    coef, ll, converged, iters, score_norm, _ = _newton_binary(X, y, _probit_terms, norm_cdf, f"probit model for '{target}'")
    if not converged:
        msg = f"Probit model for '{target}' did not converge in {iters} iterations (score {score_norm:.3g})"
        if strict:
            raise ConvergenceError(msg)
        log.warning(msg)
    return UnivariateMediatorFit(name=target, kind=MediatorKind.BINARY, spec=spec,
                                 coef=coef, sigma=None, loglik=ll, converged=converged)


def predict_response(fit: OutcomeFit, rows: Rows, overrides: Optional[Mapping[str, np.ndarray]] = None) -> np.ndarray:
    """inverse-logit(x'beta) per row."""
    return special.expit(fit.spec.matrix(rows, overrides) @ fit.beta)


def probit_loglik(coef: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    return float(log_norm_cdf((2.0 * y - 1.0) * (X @ coef)).sum())


def normal_loglik(coef: np.ndarray, sigma: float, X: np.ndarray, y: np.ndarray) -> float:
    resid = y - X @ coef
    return float((-0.5 * np.log(2.0 * np.pi * sigma * sigma) - resid * resid / (2.0 * sigma * sigma)).sum())


def logistic_score(fit_or_beta, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    beta = fit_or_beta.beta if isinstance(fit_or_beta, OutcomeFit) else np.asarray(fit_or_beta)
    return X.T @ (y - special.expit(X @ beta))


def logistic_loglik(beta: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    eta = X @ beta
    return float((y * eta - np.logaddexp(0.0, eta)).sum())


def probit_score(coef: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    _, lam, _ = _probit_terms(X @ coef, y)
    return X.T @ lam
