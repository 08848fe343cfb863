"""Probabilities of concurrency patterns and old-new inversions.

The workload is N independent M/M/1-with-rejection client queues (queue 0 is
the writer) and message delays are exponential with rates ``lam_r`` (reads)
and ``lam_w`` (writes). Everything here is a pure function of ``ModelParams``.

Numerics: the improper integrals in ``j1_integral`` are mapped to finite
ranges with u = exp(-lam_r * s). Evaluated directly on [t', inf), adaptive
quadrature loses about three digits once n >= 12.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from math import comb, exp

import numpy as np
from scipy import integrate, special

__all__ = [
    "ModelParams",
    "QuadratureSpec",
    "QuadratureError",
    "DomainError",
    "beta_fn",
    "binom",
    "p_d",
    "p_cp_given_m",
    "p_cp",
    "p_r_neq_w",
    "j1_integral",
    "p_rprime_neq_w_given",
    "p_rwp_given_m",
    "p_oni",
    "p_rwp_aggregate",
    "t_prime",
    "mean_read_lag",
    "table_row",
    "mc_balls_into_bins",
    "MCEstimate",
]

logger = logging.getLogger(__name__)


class DomainError(ValueError):
    pass


class QuadratureError(ArithmeticError):
    def __init__(self, message: str, achieved: float):
        super().__init__(f"{message} (achieved error estimate {achieved:.3g})")
        self.achieved = achieved


@dataclass(frozen=True)
class ModelParams:
    N: int
    n: int
    lam: float = 10.0
    mu: float = 10.0
    lam_r: float = 20.0
    lam_w: float = 20.0

    def __post_init__(self):
        if self.N < 2:
            raise DomainError("need N >= 2 clients")
        if self.n < 2:
            raise DomainError("need n >= 2 replicas")
        for name in ("lam", "mu", "lam_r", "lam_w"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise DomainError(f"{name} must be a positive finite rate, got {v!r}")

    @property
    def q(self) -> int:
        return self.n // 2 + 1

    @property
    def alpha(self) -> float:
        return self.lam_r / (self.lam_w + self.lam_r)

    @property
    def r(self) -> float:
        return (2 * self.lam + self.mu) ** 2 / (2 * (self.mu + self.lam) ** 2)

    @property
    def s(self) -> float:
        return self.mu / (2 * (self.mu + self.lam))

    @property
    def p0(self) -> float:
        return 0.5 * (1 + (self.lam / (self.mu + self.lam)) ** 2)

    @property
    def t(self) -> float:
        return 1.0 / self.lam

    @property
    def t_prime(self) -> float:
        return t_prime(self.lam, self.mu)


@dataclass(frozen=True)
class QuadratureSpec:
    abs_tol: float = 1e-9
    rel_tol: float = 1e-10
    limit: int = 200  # max subintervals per integral

    def __post_init__(self):
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise DomainError("quadrature tolerances must be positive")
        if self.limit < 1:
            raise DomainError("quadrature limit must be positive")

    def halved(self) -> QuadratureSpec:
        return QuadratureSpec(self.abs_tol / 2, self.rel_tol / 2, self.limit * 2)


def binom(a: int, b: int) -> int:
    """C(a, b), zero outside 0 <= b <= a."""
    if a < 0 or b < 0 or b > a:
        return 0
    return comb(a, b)


def beta_fn(x: float, y: float) -> float:
    if not (x > 0 and y > 0):
        raise DomainError(f"Beta function needs positive arguments, got ({x}, {y})")
    return float(special.beta(x, y))


def p_d(d: int, lam: float, mu: float) -> float:
    """Probability that a reader queue completes exactly d operations inside a write."""
    if d < 0:
        raise DomainError("d must be non-negative")
    if d == 0:
        return 0.5 * (1 + (lam / (mu + lam)) ** 2)
    r = (2 * lam + mu) ** 2 / (2 * (mu + lam) ** 2)
    s = mu / (2 * (mu + lam))
    return r * s**d


def p_cp_given_m(N: int, m: int, lam: float, mu: float) -> float:
    """Probability that the N-1 reader queues finish m reads in total inside a write."""
    if N < 2 or m < 0:
        raise DomainError("need N >= 2 and m >= 0")
    p0 = p_d(0, lam, mu)
    if m == 0:
        return p0 ** (N - 1)
    r = (2 * lam + mu) ** 2 / (2 * (mu + lam) ** 2)
    s = mu / (2 * (mu + lam))
    total = 0.0
    for k in range(N - 1):
        c = binom(N - 1, k) * binom(m - 1, N - k - 2)
        if c:
            total += c * p0**k * r ** (N - k - 1)
    return total * s**m


def p_cp(N: int, lam: float, mu: float, mode: str = "truncated", M: int | None = None) -> float:
    """P(CP). ``closed`` is 1 - p0^(N-1); ``truncated`` sums m = 1..M (default N-1)."""
    if N < 2:
        raise DomainError("need N >= 2")
    if mode == "closed":
        return 1.0 - p_d(0, lam, mu) ** (N - 1)
    if mode != "truncated":
        raise DomainError(f"unknown mode {mode!r}")
    M = N - 1 if M is None else M
    return sum(p_cp_given_m(N, m, lam, mu) for m in range(1, M + 1))


def p_r_neq_w(params: ModelParams) -> float:
    """Probability that a read started t after a write misses it at every replica it hears from."""
    n, q, a = params.n, params.q, params.alpha
    return (
        exp(-q * params.lam_w * params.t)
        * a**q
        * beta_fn(q, a * (n - q) + 1)
        / beta_fn(q, n - q + 1)
    )


def t_prime(lam: float, mu: float) -> float:
    """Expected lag from a completed read's invocation to the next write's invocation."""
    return (2 * lam - mu) / (2 * lam * mu)


def mean_read_lag(lam: float) -> float:
    """Expected time from the witness read's response to the read's invocation."""
    return 1.0 / (2 * lam)


def _quad(f, a, b, spec: QuadratureSpec, scale: float) -> float:
    val, err, *rest = integrate.quad(
        f, a, b, epsabs=spec.abs_tol * scale, epsrel=spec.rel_tol, limit=spec.limit, full_output=1
    )
    if len(rest) > 1 and rest[1]:
        # quad reports problems through a message; only fail if the error is real
        if err > max(spec.abs_tol * scale, spec.rel_tol * abs(val)) * 10:
            raise QuadratureError(f"quadrature did not converge: {rest[1].splitlines()[0]}", err)
    return val


def j1_integral(
    params: ModelParams, quad: QuadratureSpec | None = None, force: bool = False
) -> float:
    """The J1 integral for n > 2: P(r' misses w | r missed w) times B(q, n-q+1).

    Tolerances apply to the normalised probability, not to J1 itself.
    """
    quad = quad or QuadratureSpec()
    n, q = params.n, params.q
    if n <= 2:
        raise DomainError("J1 is only defined for n > 2")
    lr, lw = params.lam_r, params.lam_w
    tp = params.t_prime
    if tp < 0:
        if not force:
            raise DomainError(
                f"t' = {tp:.6g} < 0 (mu > 2*lam); the model assumes t' >= 0. Use force to clamp to 0"
            )
        logger.warning("t' = %.6g clamped to 0", tp)
        tp = 0.0
    scale = beta_fn(q, n - q + 1)
    lwr = lw + lr
    beta = lw / lr

    total = lr * _quad(
        lambda s: exp(-lr * (n - q + 1) * s) * (1 - exp(-lr * s)) ** (q - 1), 0.0, tp, quad, scale
    ) if tp > 0 else 0.0

    # s in [t', inf) mapped to u = exp(-lr s) in (0, u0]
    u0 = exp(-lr * tp)
    ewt = exp(lw * tp)
    c = (1 - u0) / lr + ewt * exp(-lwr * tp) / lwr

    def G(u):
        return c - ewt * u ** (1 + beta) / lwr

    def H(u):
        return (1 - u) / lr

    den = binom(n, n - q)
    for k in range(n - q + 1):
        w1 = binom(q - 1, k - 1) * binom(n - q, n - q - k) / den
        if w1:
            f1 = lambda u, k=k: u**beta * G(u) ** (k - 1) * H(u) ** (q - k) * u ** (n - q)
            total += w1 * lr ** (q - 1) * ewt * _quad(f1, 0.0, u0, quad, scale / (w1 * lr ** (q - 1) * ewt))
        w2 = binom(q - 1, k) * binom(n - q, n - q - k) / den
        if w2:
            f2 = lambda u, k=k: G(u) ** k * H(u) ** (q - 1 - k) * u ** (n - q)
            total += w2 * lr ** (q - 1) * _quad(f2, 0.0, u0, quad, scale / (w2 * lr ** (q - 1)))
    return total


def p_rprime_neq_w_given(
    params: ModelParams, quad: QuadratureSpec | None = None, force: bool = False
) -> float:
    """P(r' misses w | r missed w); exactly 1 for n = 2."""
    if params.n == 2:
        return 1.0
    q = params.q
    p = j1_integral(params, quad, force) / beta_fn(q, params.n - q + 1)
    if not 0.0 <= p <= 1.0:
        logger.warning("P(r' != R(w) | r != R(w)) = %.12g outside [0,1]; clamped", p)
        p = min(1.0, max(0.0, p))
    return p


def p_rwp_given_m(
    params: ModelParams,
    m: int,
    quad: QuadratureSpec | None = None,
    force: bool = False,
    _cache: tuple[float, float] | None = None,
) -> float:
    """Upper bound on P(RWP | m witness reads)."""
    if m < 0:
        raise DomainError("m must be non-negative")
    if m == 0 or params.n == 2:
        return 0.0
    if _cache is None:
        a, b = p_r_neq_w(params), p_rprime_neq_w_given(params, quad, force)
    else:
        a, b = _cache
    return a * (1.0 - b**m)


def _rwp_terms(params, quad, force, M):
    if params.n == 2:
        return [0.0] * M
    cache = (p_r_neq_w(params), p_rprime_neq_w_given(params, quad, force))
    return [p_rwp_given_m(params, m, _cache=cache) for m in range(1, M + 1)]


def p_oni(
    params: ModelParams, quad: QuadratureSpec | None = None, M: int | None = None, force: bool = False
) -> float:
    """Sum over m = 1..M of P(CP, m witnesses) * P(RWP | m)."""
    M = params.N - 1 if M is None else M
    rwp = _rwp_terms(params, quad, force, M)
    return sum(
        p_cp_given_m(params.N, m, params.lam, params.mu) * rwp[m - 1] for m in range(1, M + 1)
    )


def p_rwp_aggregate(
    params: ModelParams, quad: QuadratureSpec | None = None, M: int | None = None, force: bool = False
) -> float:
    """Sum over m = 1..M of P(RWP | m)."""
    M = params.N - 1 if M is None else M
    return sum(_rwp_terms(params, quad, force, M))


def table_row(
    params: ModelParams, quad: QuadratureSpec | None = None, force: bool = False
) -> dict[str, float]:
    """Every model quantity for one (N, n) point."""
    M = params.N - 1
    pr = p_r_neq_w(params)
    pp = p_rprime_neq_w_given(params, quad, force)
    rwp = [0.0 if params.n == 2 else pr * (1 - pp**m) for m in range(1, M + 1)]
    cp = [p_cp_given_m(params.N, m, params.lam, params.mu) for m in range(1, M + 1)]
    return {
        "N": params.N,
        "n": params.n,
        "lam": params.lam,
        "mu": params.mu,
        "lam_r": params.lam_r,
        "lam_w": params.lam_w,
        "p_r_neq_w": pr,
        "one_minus_p_rprime_neq_w": 0.0 if params.n == 2 else 1.0 - pp,
        "p_cp": sum(cp),
        "p_cp_closed": p_cp(params.N, params.lam, params.mu, "closed"),
        "p_rwp_given_cp": sum(rwp),
        "p_oni": sum(a * b for a, b in zip(cp, rwp)),
    }


# --------------------------------------------------------------------------
# Monte-Carlo oracle for the balls-into-bins models


@dataclass(frozen=True)
class MCEstimate:
    p: float
    stderr: float
    samples: int

    def agrees(self, value: float, k: float = 3.0) -> bool:
        # a zero stderr (p in {0,1}) only agrees with the exact value
        return abs(self.p - value) <= k * self.stderr + 1e-15


def mc_balls_into_bins(
    params: ModelParams,
    role: str,
    samples: int = 10**6,
    seed: int = 0,
    deterministic: bool = False,
    chunk: int = 200_000,
) -> MCEstimate:
    """Simulate the timed balls-into-bins experiments directly.

    ``r_vs_w``: w sends to all n bins at time 0 with Exp(lam_w) delays, r
    sends at t = 1/lam with Exp(lam_r) delays. The event is that at each of
    the q bins r reaches first, r's ball beats w's.

    ``rprime_vs_w``: r' sends at time 0 with Exp(lam_r) delays; w sends at t'
    to n - q bins picked uniformly, Exp(lam_w) delays (its other q balls are
    known to be late). The event is that r' beats w at each of the q bins r'
    reaches first.

    With ``deterministic`` every delay equals its mean.
    """
    if role not in ("r_vs_w", "rprime_vs_w"):
        raise DomainError(f"unknown role {role!r}")
    if samples < 1:
        raise DomainError("samples must be positive")
    n, q = params.n, params.q
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < samples:
        k = min(chunk, samples - done)
        if role == "r_vs_w":
            t = params.t
            if deterministic:
                d_r = np.full((k, n), 1 / params.lam_r)
                d_w = np.full((k, n), 1 / params.lam_w)
            else:
                d_r = rng.exponential(1 / params.lam_r, (k, n))
                d_w = rng.exponential(1 / params.lam_w, (k, n))
            first = np.argpartition(d_r, q - 1, axis=1)[:, :q]
            ok = np.take_along_axis(d_w, first, 1) > t + np.take_along_axis(d_r, first, 1)
            hits += int(ok.all(axis=1).sum())
        else:
            tp = max(params.t_prime, 0.0)
            if deterministic:
                d_rp = np.full((k, n), 1 / params.lam_r)
                d_w = np.full((k, n), 1 / params.lam_w)
                perm = np.tile(np.arange(n), (k, 1))
            else:
                d_rp = rng.exponential(1 / params.lam_r, (k, n))
                d_w = rng.exponential(1 / params.lam_w, (k, n))
                perm = np.argsort(rng.random((k, n)), axis=1)
            sent = np.zeros((k, n), dtype=bool)
            np.put_along_axis(sent, perm[:, : n - q], True, 1)
            arrive_w = np.where(sent, tp + d_w, np.inf)
            first = np.argpartition(d_rp, q - 1, axis=1)[:, :q]
            ok = np.take_along_axis(arrive_w, first, 1) > np.take_along_axis(d_rp, first, 1)
            hits += int(ok.all(axis=1).sum())
        done += k
    p = hits / samples
    return MCEstimate(p, math.sqrt(p * (1 - p) / samples), samples)
