"""Entropic optimal transport (log-domain Sinkhorn) and a differentiable EMD."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import Tensor, _make, as_tensor

logger = logging.getLogger(__name__)

WEIGHT_SUM_SLACK = 1e-6


@dataclass(frozen=True)
class SinkhornConfig:
    eps: float = 0.01
    max_iter: int = 500
    tol: float = 1e-6

    def __post_init__(self):
        if self.eps <= 0 or self.tol <= 0 or self.max_iter < 1:
            raise ValueError(f"invalid Sinkhorn configuration {self}")


@dataclass
class EmdResult:
    cost: float
    plan: np.ndarray
    converged: bool
    iterations: int
    marginal_error: float


def _check_weights(w: np.ndarray, name: str) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError(f"{name} must be a non-empty vector")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError(f"{name} must be finite and nonnegative")
    total = w.sum()
    if abs(total - 1.0) > WEIGHT_SUM_SLACK:
        raise ValueError(f"{name} sums to {total!r}, expected 1")
    return w / total


def round_to_marginals(plan: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Project an approximate plan onto the transport polytope.

    Rows and columns are first scaled down to their targets, then the missing
    mass is restored with a rank-one correction (Altschuler, Weed & Rigollet).
    """
    row = plan.sum(axis=1)
    x = np.minimum(np.divide(a, row, out=np.ones_like(a), where=row > 0), 1.0)
    plan = plan * x[:, None]
    col = plan.sum(axis=0)
    y = np.minimum(np.divide(b, col, out=np.ones_like(b), where=col > 0), 1.0)
    plan = plan * y[None, :]
    ea = a - plan.sum(axis=1)
    eb = b - plan.sum(axis=0)
    mass = ea.sum()
    if mass > 0:
        plan = plan + np.outer(ea, eb) / mass
    return plan


def _solve(costs: np.ndarray, wa: np.ndarray, wb: np.ndarray, cfg: SinkhornConfig):
    with np.errstate(divide="ignore"):
        log_a = np.log(wa)
        log_b = np.log(wb)
    f, g, iters, err = kernels.sinkhorn_log(
        np.ascontiguousarray(costs), np.ascontiguousarray(log_a), np.ascontiguousarray(log_b),
        cfg.eps, cfg.max_iter, cfg.tol)
    plans = np.exp((f[:, :, None] + g[:, None, :] - costs) / cfg.eps)
    return plans, iters, err


def sinkhorn_batch(costs: np.ndarray, wa: np.ndarray, wb: np.ndarray, cfg: SinkhornConfig = SinkhornConfig()):
    """Solve N independent problems [N,A,B] at once.

    Returns ``(values, plans, converged, fixed_point_plans)``; ``plans`` are
    rounded onto the marginals when the iteration did not converge.
    """
    costs = np.asarray(costs, dtype=np.float64)
    wa = np.asarray(wa, dtype=np.float64)
    wb = np.asarray(wb, dtype=np.float64)
    raw, iters, err = _solve(costs, wa, wb, cfg)
    converged = err <= cfg.tol
    plans = raw.copy()
    for n in np.flatnonzero(~converged):
        plans[n] = round_to_marginals(raw[n], wa[n], wb[n])
    values = np.einsum("nab,nab->n", plans, costs)
    return values, plans, converged, raw


def sinkhorn_emd(cost, weights_a, weights_b, cfg: SinkhornConfig = SinkhornConfig()) -> EmdResult:
    """Entropic transport cost between two weighted point sets.

    Non-convergence is reported through ``EmdResult.converged``; the plan is
    then the best iterate, rounded to satisfy the marginals.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or not np.all(np.isfinite(cost)):
        raise ValueError("cost must be a finite matrix")
    a = _check_weights(weights_a, "weights_a")
    b = _check_weights(weights_b, "weights_b")
    if cost.shape != (a.size, b.size):
        raise ValueError(f"cost shape {cost.shape} does not match weights ({a.size}, {b.size})")
    raw, iters, err = _solve(cost[None], a[None], b[None], cfg)
    converged = bool(err[0] <= cfg.tol)
    plan = raw[0] if converged else round_to_marginals(raw[0], a, b)
    if not converged:
        logger.debug("sinkhorn stopped after %d iterations, marginal error %.3g", iters[0], err[0])
    return EmdResult(float((plan * cost).sum()), plan, converged, int(iters[0]), float(err[0]))


def implicit_grads(plan: np.ndarray, cost: np.ndarray, eps: float):
    """Gradient of ``<P*, C>`` w.r.t. cost and both marginals at a Sinkhorn fixed point."""
    A, B = plan.shape
    r = plan.sum(axis=1)
    c = plan.sum(axis=0)
    jac = np.zeros((A + B, A + B))
    jac[:A, :A] = np.diag(r)
    jac[A:, A:] = np.diag(c)
    jac[:A, A:] = plan
    jac[A:, :A] = plan.T
    pc = plan * cost
    h = np.concatenate([pc.sum(axis=1), pc.sum(axis=0)])
    # both sides carry a 1/eps factor, which cancels
    lam = np.linalg.lstsq(jac, h, rcond=None)[0]
    la, lb = lam[:A], lam[A:]
    g_cost = plan - pc / eps + plan * (la[:, None] + lb[None, :]) / eps
    return g_cost, la, lb


def emd(cost: Tensor, weights_a, weights_b, cfg: SinkhornConfig = SinkhornConfig(), *, solved=None) -> Tensor:
    """Differentiable entropic EMD.

    ``solved`` optionally passes a precomputed ``(value, plan, fixed_point_plan)``
    so batched forward solves are not repeated.
    """
    cost, wa, wb = as_tensor(cost), as_tensor(weights_a), as_tensor(weights_b)
    if solved is None:
        values, plans, _, raw = sinkhorn_batch(cost.data[None], wa.data[None], wb.data[None], cfg)
        solved = (values[0], plans[0], raw[0])
    value, _, fixed = solved
    cost_data = cost.data

    def backward(g):
        gc, ga, gb = implicit_grads(fixed, cost_data, cfg.eps)
        s = float(np.sum(g))
        return s * gc, s * ga, s * gb

    return _make(np.asarray(float(value)), "emd", (cost, wa, wb), backward)
