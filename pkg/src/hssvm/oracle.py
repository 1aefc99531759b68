"""Dense reference computations for validation at desk scale.

None of this is used by the training path; every entry point refuses
inputs above its size cap and counts its calls in ``kernel.calls``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernel import OracleCapError, calls

QP_CAP = 512
GAP_CAP = 256


def _cap(d: int, cap: int, what: str):
    if d > cap:
        raise OracleCapError(f"{what}: d={d} exceeds oracle cap {cap}")
    calls["oracle"] += 1


def objective(K: np.ndarray, y: np.ndarray, x: np.ndarray) -> float:
    """0.5 x^T Y K Y x - e^T x."""
    yx = y * x
    return float(0.5 * yx @ K @ yx - x.sum())


def solve_kkt_dense(Kb: np.ndarray, y, q, cap: int = 4096, return_lambda=False):
    """Solve the bordered system [[Y Kb Y, -y], [-y^T, 0]] [x; lam] = [q; 0]."""
    y = np.asarray(y, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    d = y.size
    _cap(d, cap, "solve_kkt_dense")
    A = np.zeros((d + 1, d + 1))
    A[:d, :d] = y[:, None] * Kb * y[None, :]
    A[:d, d] = -y
    A[d, :d] = -y
    rhs = np.append(q, 0.0)
    try:
        sol = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"singular KKT system: {exc}") from None
    return (sol[:d], sol[d]) if return_lambda else sol[:d]


def dense_admm(Kt: np.ndarray, y, beta: float, C: float, max_it: int):
    """ADMM trajectory with each x-step solved through the bordered system."""
    y = np.asarray(y, dtype=np.float64)
    d = y.size
    Kb = Kt + beta * np.eye(d)
    x = np.zeros(d)
    z = np.zeros(d)
    mu = np.zeros(d)
    trace = []
    for _ in range(max_it):
        x = solve_kkt_dense(Kb, y, 1.0 + mu + beta * z)
        z_new = np.clip(x - mu / beta, 0.0, C)
        mu = mu - beta * (x - z_new)
        z = z_new
        trace.append((x, z, mu))
    return trace


def dense_bias(K: np.ndarray, z, y, C: float, eps: float = 1e-8) -> float:
    """Margin-averaged bias, one kernel column per margin vector."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    tol = eps * C
    M = [j for j in range(z.size) if tol < z[j] < C - tol]
    if not M:
        M = [j for j in range(z.size) if z[j] > tol]
    if not M:
        return 0.0
    vals = [y[j] - sum(y[i] * z[i] * K[i, j] for i in range(z.size)) for j in M]
    return float(np.mean(vals))


def project_feasible(v, y, C: float) -> np.ndarray:
    """Euclidean projection onto {x : y^T x = 0, 0 <= x <= C}.

    The projection is clip(v - lam*y, 0, C) for the root lam of a
    non-increasing piecewise-linear function, located exactly among its
    breakpoints.
    """
    v = np.asarray(v, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if C == 0 or not (np.any(y > 0) and np.any(y < 0)):
        return np.zeros_like(v)

    def g(lam):
        return float(y @ np.clip(v - lam * y, 0.0, C))

    # g(bp[0]) = C * #positives > 0 and g(bp[-1]) = -C * #negatives < 0
    bp = np.unique(np.concatenate((y * v, y * (v - C))))
    lo, hi = 0, bp.size - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if g(bp[mid]) >= 0:
            lo = mid
        else:
            hi = mid
    g0, g1 = g(bp[lo]), g(bp[hi])
    lam = bp[lo] + g0 * (bp[hi] - bp[lo]) / (g0 - g1)
    return np.clip(v - lam * y, 0.0, C)


@dataclass
class DenseQpSolution:
    x: np.ndarray
    objective: float
    eq_residual: float
    box_violation: float
    stationarity: float
    iterations: int
    history: list = field(default_factory=list)


def _grad_map(Q, x, y, C, L):
    g = Q @ x - 1.0
    step = project_feasible(x - g / L, y, C)
    return L * np.linalg.norm(x - step), g


def _polish(Q, x, y, C):
    """Solve the equality-constrained QP on the free set of ``x`` exactly."""
    tol = 1e-9 * max(C, 1.0)
    at_c = x >= C - tol
    free = (x > tol) & ~at_c
    xp = np.where(at_c, C, 0.0)
    F = np.flatnonzero(free)
    if F.size == 0:
        return xp
    QF = Q[np.ix_(F, F)]
    rhs = 1.0 - Q[np.ix_(F, np.flatnonzero(at_c))] @ np.full(at_c.sum(), C)
    n = F.size
    A = np.zeros((n + 1, n + 1))
    A[:n, :n] = QF
    A[:n, n] = -y[F]
    A[n, :n] = -y[F]
    b = np.append(rhs, C * y[at_c].sum())
    sol = np.linalg.lstsq(A, b, rcond=None)[0]
    xp[F] = np.clip(sol[:n], 0.0, C)
    return xp


def solve_qp_dense(K: np.ndarray, y, C: float, tol: float = 1e-10,
                   max_iter: int = 10**6, cap: int = QP_CAP,
                   record: bool = False) -> DenseQpSolution:
    """Minimize 0.5 x^T Y K Y x - e^T x over {y^T x = 0, 0 <= x <= C}.

    Projected gradient with step 1/L (monotone in the objective), with a
    periodic exact solve on the current free set to finish quickly.
    """
    y = np.asarray(y, dtype=np.float64)
    d = y.size
    _cap(d, cap, "solve_qp_dense")
    Q = y[:, None] * K * y[None, :]
    Q = 0.5 * (Q + Q.T)
    L = max(float(np.linalg.eigvalsh(Q)[-1]), 1e-12)
    x = project_feasible(np.zeros(d), y, C)
    fx = 0.5 * x @ Q @ x - x.sum()
    hist = [fx] if record else []
    res, g = _grad_map(Q, x, y, C, L)
    it = 0
    while res > tol * (1.0 + np.linalg.norm(g)):
        if it >= max_iter:
            raise RuntimeError(
                f"QP oracle did not converge in {max_iter} iterations (res={res:.3g})")
        x = project_feasible(x - g / L, y, C)
        fx = 0.5 * x @ Q @ x - x.sum()
        it += 1
        if record:
            hist.append(fx)
        if it % 25 == 0:
            xp = _polish(Q, x, y, C)
            fp = 0.5 * xp @ Q @ xp - xp.sum()
            if abs(y @ xp) <= 1e-12 * max(C, 1.0) * d and fp <= fx:
                rp, gp = _grad_map(Q, xp, y, C, L)
                if rp < res or rp <= tol * (1.0 + np.linalg.norm(gp)):
                    x, fx = xp, fp
                    if record:
                        hist.append(fx)
        res, g = _grad_map(Q, x, y, C, L)
    box = float(max(np.max(-x, initial=0.0), np.max(x - C, initial=0.0)))
    return DenseQpSolution(x, float(fx), float(abs(y @ x)), box, float(res), it, hist)


def spectral_norm(A: np.ndarray, iters: int = 200, rtol: float = 1e-6,
                  seed: int = 0) -> float:
    """Largest singular value of a symmetric matrix by power iteration.

    The estimate ``|A v|`` with ``|v| = 1`` never exceeds the true norm, so a
    slow start (clustered top eigenvalues) can only tighten the gap check.
    """
    v = np.random.default_rng(seed).standard_normal(A.shape[0])
    nv = np.linalg.norm(v)
    if nv == 0:
        return 0.0
    v /= nv
    est = 0.0
    for _ in range(iters):
        w = A @ v
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        if abs(nw - est) <= rtol * nw:
            return float(nw)
        est = nw
        v = w / nw
    return float(est)


def check_objective_gap(K: np.ndarray, Kt: np.ndarray, y, C: float,
                        cap: int = GAP_CAP):
    """Compare |f(x_bar) - f~(x~)| with 0.5 max(|x~|^2, |x_bar|^2) |K~ - K|_2."""
    y = np.asarray(y, dtype=np.float64)
    _cap(y.size, cap, "check_objective_gap")
    xb = solve_qp_dense(K, y, C)
    xt = solve_qp_dense(Kt, y, C)
    lhs = abs(objective(K, y, xb.x) - objective(Kt, y, xt.x))
    dist = spectral_norm(Kt - K)
    rhs = 0.5 * max(xt.x @ xt.x, xb.x @ xb.x) * dist
    return lhs, rhs, bool(lhs <= rhs * (1.0 + 1e-6))
