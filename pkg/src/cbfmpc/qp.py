"""Dense primal active-set solver for convex quadratic programs.

Solves

    min  1/2 w'Hw + c'w
    s.t. A_eq w  = b_eq
         A_in w >= b_in
         lb <= w <= ub

starting from a feasible point. Equalities stay in the working set throughout;
inequalities enter/leave it, and variable bounds are handled by fixing
variables, which keeps each KKT system at (free vars + active rows). Singular
or degenerate KKT systems are retried with Tikhonov regularization. H must be
positive semidefinite; multipliers are returned for all constraint classes so
callers can run KKT checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

FREE, AT_LOWER, AT_UPPER = -1, 0, 1

_FEAS_DRIFT = 1e-9
_STEP_TOL = 1e-11
_MULT_TOL = 1e-9
_ACT_TOL = 1e-11


@dataclass
class QpResult:
    w: np.ndarray
    status: str  # optimal | iteration_limit | unbounded | singular
    niter: int
    mu_eq: np.ndarray
    lam_in: np.ndarray    # >= 0, zero for inactive rows
    nu_bound: np.ndarray  # bound multipliers: >0 at lower, <0 at upper, 0 free
    objective: float
    active_ineq: np.ndarray
    fixed: np.ndarray


def _solve_kkt(Hff: np.ndarray, Af: np.ndarray, gf: np.ndarray, r: np.ndarray,
               reg: float) -> Optional[np.ndarray]:
    nf = Hff.shape[0]
    mr = Af.shape[0]
    kkt = np.zeros((nf + mr, nf + mr))
    kkt[:nf, :nf] = Hff
    if mr:
        kkt[:nf, nf:] = Af.T
        kkt[nf:, :nf] = Af
    rhs = np.concatenate([-gf, r])
    if rhs.size == 0:
        return rhs
    rhs_scale = 1.0 + float(np.linalg.norm(rhs, np.inf))
    # regularization must be sized relative to the Hessian block, otherwise it
    # is numerically invisible for stiff objectives (penalty weights >> 1)
    hscale = 1.0 + (float(np.max(np.abs(np.diag(Hff)))) if nf else 0.0)
    for eps in (0.0, reg, reg * 1e3, reg * 1e6):
        if eps:
            kkt_r = kkt.copy()
            kkt_r[:nf, :nf] += eps * hscale * np.eye(nf)
            if mr:
                kkt_r[nf:, nf:] -= eps * np.eye(mr)
        else:
            kkt_r = kkt
        try:
            sol = np.linalg.solve(kkt_r, rhs)
            resid = rhs - kkt_r @ sol
            sol = sol + np.linalg.solve(kkt_r, resid)  # one refinement pass
        except np.linalg.LinAlgError:
            continue
        if not np.all(np.isfinite(sol)):
            continue
        resid = float(np.linalg.norm(rhs - kkt_r @ sol, np.inf))
        if resid <= 1e-7 * rhs_scale and float(np.linalg.norm(sol, np.inf)) < 1e12:
            return sol
    return None


def solve_qp(H: np.ndarray, c: np.ndarray,
             A_eq: np.ndarray, b_eq: np.ndarray,
             A_in: np.ndarray, b_in: np.ndarray,
             lb: np.ndarray, ub: np.ndarray,
             w0: np.ndarray,
             act_hint: Optional[np.ndarray] = None,
             fixed_hint: Optional[np.ndarray] = None,
             reg: float = 1e-9,
             max_iter: Optional[int] = None) -> QpResult:
    """Primal active-set iteration from the feasible point ``w0``.

    ``act_hint``/``fixed_hint`` seed the working set from a previous related
    solve; entries inconsistent with ``w0`` are discarded.
    """
    H = np.asarray(H, dtype=float)
    c = np.asarray(c, dtype=float)
    nv = c.size
    A_eq = np.asarray(A_eq, dtype=float).reshape(-1, nv)
    b_eq = np.asarray(b_eq, dtype=float).reshape(-1)
    A_in = np.asarray(A_in, dtype=float).reshape(-1, nv)
    b_in = np.asarray(b_in, dtype=float).reshape(-1)
    me, mi = b_eq.size, b_in.size
    lb = np.asarray(lb, dtype=float)
    ub = np.asarray(ub, dtype=float)
    w = np.clip(np.asarray(w0, dtype=float).copy(), lb, ub)
    if max_iter is None:
        max_iter = 6 * (nv + mi) + 100

    permanent = lb == ub
    fixed = np.full(nv, FREE, dtype=np.int8)
    fixed[permanent] = AT_LOWER
    at_lo = np.zeros(nv, dtype=bool)
    at_up = np.zeros(nv, dtype=bool)
    fin_lo, fin_up = np.isfinite(lb), np.isfinite(ub)
    at_lo[fin_lo] = w[fin_lo] <= lb[fin_lo] + _ACT_TOL * np.maximum(1.0, np.abs(lb[fin_lo]))
    at_up[fin_up] = w[fin_up] >= ub[fin_up] - _ACT_TOL * np.maximum(1.0, np.abs(ub[fin_up]))
    if fixed_hint is not None and fixed_hint.shape == fixed.shape:
        fixed[(fixed_hint == AT_LOWER) & at_lo] = AT_LOWER
        fixed[(fixed_hint == AT_UPPER) & at_up] = AT_UPPER
    else:
        fixed[at_lo] = AT_LOWER
        fixed[at_up & (fixed == FREE)] = AT_UPPER

    slack0 = A_in @ w - b_in if mi else np.zeros(0)
    act = slack0 <= _ACT_TOL * np.maximum(1.0, np.abs(b_in)) if mi else np.zeros(0, dtype=bool)
    if act_hint is not None and act_hint.shape == act.shape:
        act &= act_hint

    def examine_multipliers(w, rows, y, act_idx, bland):
        """Optimality test: returns None when KKT holds, else the element to release."""
        g = H @ w + c
        resid = g - rows.T @ y if rows.size else g.copy()
        mult_scale = _MULT_TOL * (1.0 + (float(np.linalg.norm(y, np.inf)) if y.size else 0.0))
        violators = []  # (value, order_key, kind, index)
        lam_act = y[me:]
        for pos, i in enumerate(act_idx):
            if lam_act[pos] < -mult_scale:
                violators.append((lam_act[pos], (0, i), "row", i))
        for j in np.flatnonzero((fixed != FREE) & ~permanent):
            v = resid[j] if fixed[j] == AT_LOWER else -resid[j]
            if v < -mult_scale:
                violators.append((v, (1, j), "var", j))
        if not violators:
            return None, resid
        if bland:  # anti-cycling: lowest index instead of most negative
            _, _, kind, idx = min(violators, key=lambda t: t[1])
        else:
            _, _, kind, idx = min(violators, key=lambda t: t[0])
        return (kind, idx), resid

    degenerate_steps = 0
    for it in range(1, max_iter + 1):
        free_idx = np.flatnonzero(fixed == FREE)
        act_idx = np.flatnonzero(act)
        rows = np.vstack([A_eq, A_in[act_idx]]) if (me or act_idx.size) else np.zeros((0, nv))
        rhs_rows = np.concatenate([
            b_eq - A_eq @ w if me else np.zeros(0),
            b_in[act_idx] - A_in[act_idx] @ w if act_idx.size else np.zeros(0),
        ])
        g = H @ w + c

        sol = _solve_kkt(H[np.ix_(free_idx, free_idx)], rows[:, free_idx],
                         g[free_idx], rhs_rows, reg)
        if sol is None:
            return _finish(w, "singular", it, me, mi, H, c, A_eq, A_in, act, fixed)
        nf = free_idx.size
        delta = np.zeros(nv)
        delta[free_idx] = sol[:nf]
        y = -sol[nf:]
        bland = degenerate_steps >= 8

        if float(np.linalg.norm(delta, np.inf)) > 1e13:
            return _finish(w, "unbounded", it, me, mi, H, c, A_eq, A_in, act, fixed)

        # ratio test against inactive inequalities and free-variable bounds
        candidates = []  # (ratio, order_key, payload)
        if mi:
            inact = np.flatnonzero(~act)
            if inact.size:
                deriv = A_in[inact] @ delta
                val = np.maximum(A_in[inact] @ w - b_in[inact], 0.0)
                for pos in np.flatnonzero(deriv < -1e-13):
                    i = int(inact[pos])
                    candidates.append((float(val[pos] / -deriv[pos]), (0, i), ("row", i)))
        for j in free_idx:
            if delta[j] < -1e-13 and np.isfinite(lb[j]):
                candidates.append((float((w[j] - lb[j]) / -delta[j]), (1, j),
                                   ("var", j, AT_LOWER)))
            elif delta[j] > 1e-13 and np.isfinite(ub[j]):
                candidates.append((float((ub[j] - w[j]) / delta[j]), (1, j),
                                   ("var", j, AT_UPPER)))
        alpha, block = 1.0, None
        if candidates:
            best = min(r for r, _, _ in candidates)
            if best < 1.0:
                tied = [cnd for cnd in candidates if cnd[0] <= best + 1e-10]
                pick = min(tied, key=lambda t: t[1]) if bland else tied[0]
                alpha, block = max(best, 0.0), pick[2]
        w = np.clip(w + alpha * delta, lb, ub)

        if block is not None:
            if block[0] == "row":
                act[block[1]] = True
            else:
                fixed[block[1]] = block[2]
            degenerate_steps = degenerate_steps + 1 if alpha <= 1e-12 else 0
            continue

        # full step: the equality-constrained subproblem for this working set is
        # solved, so test the multipliers and release the worst violator
        release, resid = examine_multipliers(w, rows, y, act_idx, bland)
        if release is None:
            return _finish(w, "optimal", it, me, mi, H, c, A_eq, A_in, act, fixed,
                           y=y, act_idx=act_idx, resid=resid)
        kind, idx = release
        if kind == "row":
            act[idx] = False
        else:
            fixed[idx] = FREE
        degenerate_steps = (degenerate_steps + 1
                            if float(np.linalg.norm(delta, np.inf)) <= _STEP_TOL else 0)

    return _finish(w, "iteration_limit", max_iter, me, mi, H, c, A_eq, A_in, act, fixed)


def _finish(w, status, niter, me, mi, H, c, A_eq, A_in, act, fixed,
            y=None, act_idx=None, resid=None) -> QpResult:
    mu_eq = np.zeros(me)
    lam_in = np.zeros(mi)
    nu = np.zeros(w.size)
    if y is not None:
        mu_eq = y[:me]
        lam_in[act_idx] = np.maximum(y[me:], 0.0)
        fixed_mask = fixed != FREE
        nu[fixed_mask] = resid[fixed_mask]
    obj = float(0.5 * w @ H @ w + c @ w)
    return QpResult(w=w, status=status, niter=niter, mu_eq=mu_eq, lam_in=lam_in,
                    nu_bound=nu, objective=obj, active_ineq=act.copy(), fixed=fixed.copy())
