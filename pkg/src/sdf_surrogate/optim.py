"""Adam and L-BFGS (two-loop recursion, strong Wolfe line search)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray, lr) -> np.ndarray:
    """One bias-corrected Adam update. ``lr`` may be a scalar or per-entry array.

    Mutates ``state`` and returns the new parameter vector.
    """
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {params.shape}")
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad))
        raise NonFiniteGradient(
            f"non-finite gradient at step {state.t + 1}: {len(bad)} entries, first index {bad[0]}"
        )
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# L-BFGS


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    n_iter: int
    n_eval: int
    history: list[float] = field(default_factory=list)
    message: str = ""


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimiser of the cubic interpolating (a, fa, ga), (b, fb, gb); None if undefined."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(disc)
    denom = gb - ga + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (gb + d2 - d1) / denom


class _LineFunction:
    def __init__(self, fun: Objective, x: np.ndarray, d: np.ndarray):
        self.fun, self.x, self.d = fun, x, d
        self.n_eval = 0
        self.cache: dict[float, tuple[float, np.ndarray]] = {}

    def __call__(self, alpha: float) -> tuple[float, float]:
        if alpha not in self.cache:
            f, g = self.fun(self.x + alpha * self.d)
            self.n_eval += 1
            f = float(f)
            if not np.isfinite(f) or not np.all(np.isfinite(g)):
                f = np.inf
            self.cache[alpha] = (f, np.asarray(g, dtype=float))
        f, g = self.cache[alpha]
        return f, float(g @ self.d) if np.isfinite(f) else np.nan


def strong_wolfe(
    phi: _LineFunction,
    f0: float,
    dphi0: float,
    alpha1: float = 1.0,
    c1: float = 1e-4,
    c2: float = 0.9,
    max_iter: int = 25,
    alpha_max: float = 1e10,
) -> float | None:
    """Step length satisfying the strong Wolfe conditions, or None."""

    def zoom(lo, flo, dlo, hi, fhi, dhi):
        for _ in range(max_iter):
            trial = None
            if np.isfinite(fhi) and np.isfinite(dhi):
                trial = _cubic_min(lo, flo, dlo, hi, fhi, dhi)
            left, right = min(lo, hi), max(lo, hi)
            span = right - left
            if trial is None or not (left + 0.1 * span <= trial <= right - 0.1 * span):
                trial = 0.5 * (lo + hi)
            f, dphi = phi(trial)
            if f > f0 + c1 * trial * dphi0 or f >= flo:
                hi, fhi, dhi = trial, f, dphi
            else:
                if abs(dphi) <= -c2 * dphi0:
                    return trial
                if dphi * (hi - lo) >= 0:
                    hi, fhi, dhi = lo, flo, dlo
                lo, flo, dlo = trial, f, dphi
            if abs(hi - lo) < 1e-16 * max(1.0, abs(lo)):
                break
        return None

    prev, fprev, dprev = 0.0, f0, dphi0
    alpha = alpha1
    for i in range(max_iter):
        f, dphi = phi(alpha)
        if f > f0 + c1 * alpha * dphi0 or (i > 0 and f >= fprev):
            return zoom(prev, fprev, dprev, alpha, f, dphi)
        if abs(dphi) <= -c2 * dphi0:
            return alpha
        if dphi >= 0:
            return zoom(alpha, f, dphi, prev, fprev, dprev)
        prev, fprev, dprev = alpha, f, dphi
        alpha = min(2.0 * alpha, alpha_max)
    return None


def _backtrack(phi: _LineFunction, f0: float, dphi0: float, alpha: float, c1: float = 1e-4):
    for _ in range(60):
        f, _ = phi(alpha)
        if f <= f0 + c1 * alpha * dphi0:
            return alpha
        alpha *= 0.5
    return None


def lbfgs_minimize(
    fun: Objective,
    x0: np.ndarray,
    memory: int = 10,
    tol: float = 1e-8,
    max_iter: int = 2000,
    c1: float = 1e-4,
    c2: float = 0.9,
    callback: Callable[[int, float], None] | None = None,
) -> LbfgsResult:
    """Minimise ``fun`` (returning value and gradient) from ``x0``.

    Stops when two consecutive iterates differ in objective by less than
    ``tol``, when the gradient vanishes, or after ``max_iter`` iterations.
    The lowest objective seen is returned.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    f = float(f)
    n_eval = 1
    if not np.isfinite(f):
        raise FloatingPointError("objective is not finite at the starting point")
    best_x, best_f = x.copy(), f
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    rho_hist: list[float] = []
    history = [f]
    message = "iteration cap reached"
    it = 0
    for it in range(1, max_iter + 1):
        if not np.any(g):
            message = "zero gradient"
            it -= 1
            break
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if s_hist:
            q *= (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        d = -q
        dphi0 = float(g @ d)
        if not (dphi0 < 0 and np.isfinite(dphi0)):
            s_hist.clear(), y_hist.clear(), rho_hist.clear()
            d = -g
            dphi0 = float(g @ d)
        alpha1 = 1.0 if s_hist else min(1.0, 1.0 / max(np.abs(g).sum(), 1e-300))
        phi = _LineFunction(fun, x, d)
        step = strong_wolfe(phi, f, dphi0, alpha1, c1, c2)
        if step is None:
            log.debug("line search failed at iteration %d; steepest-descent fallback", it)
            s_hist.clear(), y_hist.clear(), rho_hist.clear()
            d = -g
            phi = _LineFunction(fun, x, d)
            step = _backtrack(phi, f, float(g @ d), min(1.0, 1.0 / max(np.linalg.norm(g), 1e-300)))
            if step is None:
                n_eval += phi.n_eval
                message = "line search failed"
                break
        n_eval += phi.n_eval
        f_new, g_new = phi.cache[step]
        x_new = x + step * d
        s, y = x_new - x, g_new - g
        sy, yy = float(s @ y), float(y @ y)
        if yy > 0 and sy > 1e-10 * yy and np.isfinite(1.0 / sy):
            s_hist.append(s), y_hist.append(y), rho_hist.append(1.0 / sy)
            if len(s_hist) > memory:
                s_hist.pop(0), y_hist.pop(0), rho_hist.pop(0)
        df = abs(f - f_new)
        x, f, g = x_new, f_new, g_new
        history.append(f)
        if f < best_f:
            best_x, best_f = x.copy(), f
        if callback is not None:
            callback(it, f)
        if df < tol:
            message = "loss difference below tolerance"
            break
    return LbfgsResult(best_x, best_f, it, n_eval, history, message)
