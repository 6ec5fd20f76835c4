"""
Numerical primitives shared by every model in corrmed.

- RngStream: counter-based random streams (master seed + integer path), hashed
  through numpy's SeedSequence so a work unit's draws never depend on which
  worker ran it or in what order.
- Small-matrix Cholesky with pivot diagnostics, multivariate normal sampling.
- Normal CDF/quantile, bivariate normal CDF (Genz's double-precision version of
  the Drezner-Wesolowsky method, vectorized), a quadrature oracle for it, and a
  trivariate normal rectangle probability built on top of it.
- `maximize`: BFGS with line search (scipy) plus a Newton polish, reporting an
  explicit convergence status.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate, optimize, special

from lib.errors import DomainError, NumericalError

log = logging.getLogger("decomp.numerics")

PD_TOL = 1e-10
TWO_PI = 2.0 * math.pi


# ── Random streams ───────────────────────────────────────────

@dataclass(frozen=True)
class RngStream:
    """Identifies an independent random stream: (master seed, stream path).

    Identical (seed, path) always yields the identical sequence. Children
    extend the path, e.g. `stream.child(REPLICATE, r)`.
    """

    seed: int
    path: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise DomainError(f"Seed must be a 64-bit unsigned integer, got {self.seed}")
        object.__setattr__(self, "path", tuple(int(p) for p in self.path))
        if any(p < 0 for p in self.path):
            raise DomainError(f"Stream path entries must be non-negative: {self.path}")

    def child(self, *ids: int) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(int(i) for i in ids))

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(entropy=self.seed, spawn_key=self.path))


RngLike = Union[RngStream, np.random.Generator]


def as_generator(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    return rng


# ── Covariance matrices ──────────────────────────────────────

def chol_lower(S: np.ndarray, tol: float = PD_TOL) -> np.ndarray:
    """Lower-triangular L with L @ L.T == S.

    Raises NumericalError naming the first pivot that is not positive
    (relative to its diagonal entry) within `tol`.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise NumericalError(f"Covariance matrix must be square, got shape {S.shape}")
    if not np.all(np.isfinite(S)):
        raise NumericalError("Covariance matrix has non-finite entries")
    if not np.allclose(S, S.T, rtol=0.0, atol=1e-12 * max(1.0, float(np.abs(S).max()))):
        raise NumericalError("Covariance matrix is not symmetric")

    dim = S.shape[0]
    L = np.zeros_like(S)
    for j in range(dim):
        pivot = S[j, j] - np.dot(L[j, :j], L[j, :j])
        scale = max(S[j, j], 0.0)
        if S[j, j] <= 0.0 or pivot <= tol * scale:
            raise NumericalError(
                f"Covariance matrix is not positive definite: pivot {j + 1} = {pivot:.3g}"
            )
        L[j, j] = math.sqrt(pivot)
        for i in range(j + 1, dim):
            L[i, j] = (S[i, j] - np.dot(L[i, :j], L[j, :j])) / L[j, j]
    return L


def covariance_from(sigmas: Sequence[float], corr: np.ndarray) -> np.ndarray:
    """Sigma with entries rho_jk * sigma_j * sigma_k."""
    s = np.asarray(sigmas, dtype=np.float64)
    return np.asarray(corr, dtype=np.float64) * np.outer(s, s)


def correlation_of(S: np.ndarray) -> np.ndarray:
    d = np.sqrt(np.diag(S))
    return S / np.outer(d, d)


def mvn_sample(mean: Sequence[float], S: np.ndarray, rng: RngLike, count: int) -> np.ndarray:
    """`count` draws from MVN(mean, S), shape (count, dim).

    Equals mean + Z @ L.T for the stream's standard-normal block Z.
    """
    mean = np.asarray(mean, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if S.shape != (mean.size, mean.size):
        raise DomainError(f"Mean of length {mean.size} does not match covariance {S.shape}")
    L = chol_lower(S)
    if count == 0:
        return np.empty((0, mean.size))
    z = as_generator(rng).standard_normal((count, mean.size))
    return mean + z @ L.T


# ── Univariate normal ────────────────────────────────────────

def norm_cdf(x):
    return special.ndtr(x)


def norm_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-0.5 * x * x) / math.sqrt(TWO_PI)


def log_norm_cdf(x):
    return special.log_ndtr(x)


def norm_quantile(p):
    p = np.asarray(p, dtype=np.float64)
    if np.any(~((p > 0.0) & (p < 1.0))):
        raise DomainError("norm_quantile requires 0 < p < 1")
    out = special.ndtri(p)
    return float(out) if out.ndim == 0 else out


# ── Bivariate normal ─────────────────────────────────────────

# 20-point Gauss-Legendre rule on [-1, 1], positive half (nodes, weights).
_GL_X = np.array([
    0.9931285991850949, 0.9639719272779138, 0.9122344282513259, 0.8391169718222188,
    0.7463319064601508, 0.6360536807265150, 0.5108670019508271, 0.3737060887154196,
    0.2277858511416451, 0.07652652113349733,
])
_GL_W = np.array([
    0.01761400713915212, 0.04060142980038694, 0.06267204833410906, 0.08327674157670475,
    0.1019301198172404, 0.1181945319615184, 0.1316886384491766, 0.1420961093183821,
    0.1491729864726037, 0.1527533871307259,
])


def _bvn_upper(dh: np.ndarray, dk: np.ndarray, r: np.ndarray) -> np.ndarray:
    """P(X > dh, Y > dk) for finite 1-D arrays, |r| < 1."""
    out = np.empty_like(dh)
    hk = dh * dk
    low = np.abs(r) < 0.925

    if low.any():
        h, k, rr, hk_ = dh[low], dk[low], r[low], hk[low]
        hs = (h * h + k * k) / 2.0
        asr = np.arcsin(rr)[:, None]
        total = np.zeros_like(h)
        for nodes in (1.0 - _GL_X, 1.0 + _GL_X):
            sn = np.sin(asr * nodes / 2.0)
            total += (_GL_W * np.exp((sn * hk_[:, None] - hs[:, None]) / (1.0 - sn * sn))).sum(axis=1)
        out[low] = total * asr[:, 0] / (2.0 * TWO_PI) + special.ndtr(-h) * special.ndtr(-k)

    high = ~low
    if high.any():
        h, k, rr, hk_ = dh[high], dk[high].copy(), r[high], hk[high].copy()
        neg = rr < 0
        k[neg] = -k[neg]
        hk_[neg] = -hk_[neg]
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            as_ = (1.0 - rr) * (1.0 + rr)
            a = np.sqrt(as_)
            bs = (h - k) ** 2
            c = (4.0 - hk_) / 8.0
            d = (12.0 - hk_) / 16.0
            asr = -(bs / as_ + hk_) / 2.0
            bvn = np.where(
                asr > -100.0,
                a * np.exp(asr) * (1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0),
                0.0,
            )
            b = np.sqrt(bs)
            tail = np.exp(-hk_ / 2.0) * math.sqrt(TWO_PI) * special.ndtr(-b / a) * b * (
                1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0
            )
            bvn = bvn - np.where(-hk_ < 100.0, tail, 0.0)
            half = (a / 2.0)[:, None]
            for sign in (-1.0, 1.0):
                xs = (half * (sign * _GL_X + 1.0)) ** 2
                rs = np.sqrt(1.0 - xs)
                asr2 = -(bs[:, None] / xs + hk_[:, None]) / 2.0
                sp = 1.0 + c[:, None] * xs * (1.0 + d[:, None] * xs)
                ep = np.exp(-hk_[:, None] * (1.0 - rs) / (2.0 * (1.0 + rs))) / rs
                term = half * _GL_W * np.exp(asr2) * (ep - sp)
                bvn = bvn + np.where(asr2 > -100.0, term, 0.0).sum(axis=1)
            bvn = -bvn / TWO_PI
        pos = rr > 0
        bvn[pos] += special.ndtr(-np.maximum(h[pos], k[pos]))
        bvn[neg] = -bvn[neg] + np.maximum(0.0, special.ndtr(-h[neg]) - special.ndtr(-k[neg]))
        out[high] = bvn

    return np.clip(out, 0.0, 1.0)


def bvn_cdf(h, k, rho):
    """P(Z1 <= h, Z2 <= k) for standard bivariate normal with correlation rho.

    Broadcasts over array arguments. Evaluated at (min(h,k), max(h,k)) so the
    result is exactly symmetric in h and k.
    """
    h, k, rho = np.broadcast_arrays(
        np.asarray(h, dtype=np.float64), np.asarray(k, dtype=np.float64), np.asarray(rho, dtype=np.float64)
    )
    if np.any(~(np.abs(rho) < 1.0)):
        raise DomainError("bvn_cdf requires -1 < rho < 1")

    shape = h.shape
    lo = np.minimum(h, k).ravel()
    hi = np.maximum(h, k).ravel()
    r = rho.ravel()
    out = np.full(lo.shape, np.nan)

    zero = lo == -np.inf
    out[zero] = 0.0
    marginal = ~zero & (hi == np.inf)
    out[marginal] = special.ndtr(lo[marginal])
    finite = np.isfinite(lo) & np.isfinite(hi)
    if finite.any():
        out[finite] = _bvn_upper(-lo[finite], -hi[finite], r[finite])

    out = out.reshape(shape)
    return float(out) if out.ndim == 0 else out


def bvn_pdf(h, k, rho):
    h, k, rho = (np.asarray(v, dtype=np.float64) for v in (h, k, rho))
    one_minus = 1.0 - rho * rho
    q = (h * h - 2.0 * rho * h * k + k * k) / one_minus
    return np.exp(-0.5 * q) / (TWO_PI * np.sqrt(one_minus))


def bvn_cdf_quadrature(h: float, k: float, rho: float) -> float:
    """Reference value: Phi(h)Phi(k) + integral_0^rho phi2(h, k, r) dr, adaptive quad."""
    if not abs(rho) < 1.0:
        raise DomainError("bvn_cdf_quadrature requires -1 < rho < 1")
    base = float(special.ndtr(h) * special.ndtr(k))
    if rho == 0.0:
        return base
    value, _ = integrate.quad(
        lambda r: float(bvn_pdf(h, k, r)), 0.0, rho, epsabs=1e-14, epsrel=1e-12, limit=200
    )
    return base + value


# ── Trivariate normal ────────────────────────────────────────

def _tvn_panels(h1, h2, h3, corr, panels: int) -> np.ndarray:
    """Composite 20-point Gauss-Legendre over u = Phi(z) on [0, Phi(h1)]."""
    r12, r13, r23 = corr[0, 1], corr[0, 2], corr[1, 2]
    s12 = math.sqrt(1.0 - r12 * r12)
    s13 = math.sqrt(1.0 - r13 * r13)
    r23_1 = (r23 - r12 * r13) / (s12 * s13)

    nodes = np.concatenate([-_GL_X[::-1], _GL_X])
    weights = np.concatenate([_GL_W[::-1], _GL_W])
    upper = special.ndtr(h1)
    width = upper / panels
    total = np.zeros_like(h1)
    for p in range(panels):
        left = width * p
        u = left[:, None] + width[:, None] * (nodes + 1.0) / 2.0
        z = special.ndtri(np.clip(u, 1e-300, None))
        inner = bvn_cdf(
            (h2[:, None] - r12 * z) / s12,
            (h3[:, None] - r13 * z) / s13,
            r23_1,
        )
        total += (inner * weights).sum(axis=1) * width / 2.0
    return total


def tvn_cdf(
    h1, h2, h3,
    corr: np.ndarray,
    tol: float = 1e-7,
    max_panels: int = 32,
    fixed_panels: Optional[int] = None,
) -> np.ndarray:
    """P(Z1 <= h1, Z2 <= h2, Z3 <= h3) for a standard trivariate normal.

    Conditions on Z1 and integrates bvn_cdf over u = Phi(z1); panels are
    doubled per element until successive estimates agree within `tol`.
    `fixed_panels` skips the refinement so the result is a smooth function
    of its arguments (needed inside likelihoods that are differenced).
    """
    corr = np.asarray(corr, dtype=np.float64)
    chol_lower(corr)
    h1, h2, h3 = np.broadcast_arrays(*(np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in (h1, h2, h3)))
    h1, h2, h3 = h1.ravel(), h2.ravel(), h3.ravel()

    if fixed_panels is not None:
        return np.clip(_tvn_panels(h1, h2, h3, corr, fixed_panels), 0.0, 1.0)

    est = _tvn_panels(h1, h2, h3, corr, 1)
    todo = np.arange(h1.size)
    panels = 2
    while todo.size and panels <= max_panels:
        finer = _tvn_panels(h1[todo], h2[todo], h3[todo], corr, panels)
        done = np.abs(finer - est[todo]) <= tol
        est[todo] = finer
        todo = todo[~done]
        panels *= 2
    if todo.size:
        log.debug(f"tvn_cdf: {todo.size} points not refined to {tol:g}")
    return np.clip(est, 0.0, 1.0)


# ── Optimization ─────────────────────────────────────────────

@dataclass
class MaxResult:
    x: np.ndarray
    value: float
    converged: bool
    grad_norm: float
    iterations: int
    message: str = ""
    history: list = field(default_factory=list, repr=False)


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central finite differences with step scaled by max(1, |x_i|)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        h = step * max(1.0, abs(x[i]))
        up, dn = x.copy(), x.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (f(up) - f(dn)) / (2.0 * h)
    return g


def check_gradient(
    f: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    step: float = 1e-6,
) -> float:
    """Max relative discrepancy between an analytic gradient and central differences."""
    analytic = np.asarray(grad(x), dtype=np.float64)
    numeric = numerical_gradient(f, x, step)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def _hessian(grad: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    p = x.size
    H = np.empty((p, p))
    for i in range(p):
        h = step * max(1.0, abs(x[i]))
        up, dn = x.copy(), x.copy()
        up[i] += h
        dn[i] -= h
        H[:, i] = (grad(up) - grad(dn)) / (2.0 * h)
    return (H + H.T) / 2.0


def _newton_polish(f, grad, x, tol: float, max_steps: int = 25) -> Tuple[np.ndarray, float, np.ndarray]:
    """Damped Newton ascent from a near-optimal point."""
    fx, g = f(x), grad(x)
    for _ in range(max_steps):
        if np.max(np.abs(g)) <= tol:
            break
        H = _hessian(grad, x)
        try:
            step = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)) or np.dot(step, g) <= 0:
            step = g
        t = 1.0
        while t > 1e-10:
            cand = x + t * step
            fc = f(cand)
            if np.isfinite(fc) and fc >= fx - 1e-14 * max(1.0, abs(fx)):
                break
            t /= 2.0
        else:
            break
        x, fx = cand, fc
        g = grad(x)
    return x, fx, g


def maximize(
    f: Callable[[np.ndarray], float],
    x0: Sequence[float],
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    tol: float = 1e-6,
    max_iter: int = 500,
) -> MaxResult:
    """Maximize a smooth objective.

    Converged means max |gradient| <= tol at the returned point. Hitting the
    iteration cap is reported through `converged=False`, never hidden.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    f0 = f(x0)
    if not np.isfinite(f0):
        raise DomainError(f"Objective is not finite at the starting point ({f0})")

    if grad is None:
        grad = lambda x: numerical_gradient(f, x)  # noqa: E731

    def neg_f(x):
        v = f(x)
        return -v if np.isfinite(v) else np.inf

    def neg_g(x):
        return -np.asarray(grad(x), dtype=np.float64)

    res = optimize.minimize(
        neg_f, x0, jac=neg_g, method="BFGS",
        options={"gtol": tol, "maxiter": max_iter, "norm": np.inf},
    )
    x, value = res.x, -res.fun
    g = np.asarray(grad(x), dtype=np.float64)
    iterations = int(res.nit)

    # line search can lose precision before gtol is reached (status 2)
    if np.max(np.abs(g)) > tol and iterations < max_iter:
        x, value, g = _newton_polish(f, grad, x, tol)

    grad_norm = float(np.max(np.abs(g))) if g.size else 0.0
    converged = bool(np.isfinite(value) and grad_norm <= tol)
    message = "converged" if converged else f"not converged: {res.message} (|grad|={grad_norm:.3g})"
    log.debug(f"maximize: {message} after {iterations} iterations, value={value:.10g}")
    return MaxResult(x=x, value=float(value), converged=converged, grad_norm=grad_norm,
                     iterations=iterations, message=message)
