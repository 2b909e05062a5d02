"""Entropic optimal transport between the two node sets of a segment.

The per-segment coherence distance fuses a node-matching cost (pairwise
cosine distances between subtitle and visual nodes) with a structure
mismatch cost comparing intra-graph cosine distances. The fused problem is
solved by alternating rounds of linearizing the structure term at the
current plan and re-solving the linear problem with log-domain Sinkhorn
scaling under uniform marginals.

Training gradients use the envelope convention: the converged plan is a
constant and gradients flow through the cost matrices only. A permutation
enumeration oracle (`brute_force_wd`) provides exact answers for small
square problems.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ContractError, NumericalError, ShapeError
from .model import SegmentTrace
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class OTConfig:
    lam: float = 0.5              # node-cost weight inside the fused objective
    alpha: float = 0.1            # loss weight applied by transport_loss
    eps_reg: float = 0.05         # entropic regularization
    sinkhorn_iters: int = 200
    gw_outer_iters: int = 10
    tol: float = 1e-6             # marginal residual target

    def __post_init__(self) -> None:
        if self.eps_reg <= 0:
            raise ContractError("eps_reg must be positive")
        if self.sinkhorn_iters < 1 or self.gw_outer_iters < 1:
            raise ContractError("iteration caps must be at least 1")


@dataclass
class Coupling:
    plan: np.ndarray              # (n, m), rows index the first node set
    p: np.ndarray
    q: np.ndarray
    node_cost: np.ndarray
    intra_a: np.ndarray
    intra_b: np.ndarray
    distance: float
    marginal_err: float
    converged: bool


def _logsumexp_rows(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))


def sinkhorn(
    cost: np.ndarray,
    p: np.ndarray,
    q: np.ndarray,
    eps_reg: float,
    iters: int,
    tol: float = 1e-6,
    warm: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[np.ndarray, float, tuple[np.ndarray, np.ndarray]]:
    """Alternating marginal scaling in the log domain.

    Returns (plan, marginal_err, potentials). Stops at `iters` or once both
    marginal residuals drop to `tol`. `warm` reuses scaled potentials from a
    previous call on a nearby cost.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if not np.all(np.isfinite(cost)):
        raise ContractError("sinkhorn: cost matrix must be finite")
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    n, m = cost.shape
    if p.shape != (n,) or q.shape != (m,):
        raise ShapeError(f"sinkhorn: marginals {p.shape}/{q.shape} do not fit cost {cost.shape}")
    if np.any(p <= 0) or np.any(q <= 0) or abs(p.sum() - 1) > 1e-8 or abs(q.sum() - 1) > 1e-8:
        raise ContractError("sinkhorn: marginals must be positive and sum to 1")

    scaled = cost / eps_reg
    logp = np.log(p)
    logq = np.log(q)
    if warm is not None:
        phi, psi = warm[0].copy(), warm[1].copy()
    else:
        phi = np.zeros(n)
        psi = np.zeros(m)
    plan = np.empty_like(scaled)
    err = np.inf
    for _ in range(iters):
        phi = logp - _logsumexp_rows(psi[None, :] - scaled, axis=1).reshape(-1)
        psi = logq - _logsumexp_rows(phi[:, None] - scaled, axis=0).reshape(-1)
        plan = np.exp(phi[:, None] + psi[None, :] - scaled)
        err = max(
            float(np.abs(plan.sum(axis=1) - p).max()),
            float(np.abs(plan.sum(axis=0) - q).max()),
        )
        if err <= tol:
            break
    if not (np.all(np.isfinite(plan)) and np.isfinite(err)):
        raise NumericalError(
            "sinkhorn scaling produced non-finite values; increase eps_reg "
            f"(eps_reg={eps_reg}, cost range {cost.min():.3g}..{cost.max():.3g})"
        )
    return plan, err, (phi, psi)


def _structure_gap(intra_a: np.ndarray, intra_b: np.ndarray) -> np.ndarray:
    """|A_ii' - B_jj'| arranged as (n, m, n, m)."""
    return np.abs(intra_a[:, None, :, None] - intra_b[None, :, None, :])


def solve_plan(
    node_cost: np.ndarray,
    intra_a: np.ndarray,
    intra_b: np.ndarray,
    cfg: OTConfig,
) -> Coupling:
    """Fused node/structure transport with uniform marginals."""
    node_cost = np.asarray(node_cost, dtype=np.float64)
    n, m = node_cost.shape
    if n < 1 or m < 1:
        raise ContractError("solve_plan: both node sets must be nonempty")
    p = np.full(n, 1.0 / n)
    q = np.full(m, 1.0 / m)
    gap = _structure_gap(np.asarray(intra_a, float), np.asarray(intra_b, float))
    plan = np.outer(p, q)
    warm = None
    err = np.inf
    for _ in range(cfg.gw_outer_iters):
        linear = cfg.lam * node_cost + np.einsum("ijkl,kl->ij", gap, plan)
        new_plan, err, warm = sinkhorn(
            linear, p, q, cfg.eps_reg, cfg.sinkhorn_iters, cfg.tol, warm
        )
        delta = float(np.abs(new_plan - plan).max())
        plan = new_plan
        if delta <= cfg.tol:
            break
    fused = cfg.lam * node_cost + np.einsum("ijkl,kl->ij", gap, plan)
    distance = float((plan * fused).sum())
    return Coupling(
        plan=plan, p=p, q=q, node_cost=node_cost, intra_a=np.asarray(intra_a, float),
        intra_b=np.asarray(intra_b, float), distance=distance, marginal_err=err,
        converged=err <= cfg.tol,
    )


def _np_cosine_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=0, keepdims=True)
    nb = np.linalg.norm(b, axis=0, keepdims=True)
    if na.min() <= 1e-12 or nb.min() <= 1e-12:
        raise ContractError("cosine cost: zero-norm node")
    return np.clip(1.0 - (a / na).T @ (b / nb), 0.0, 2.0)


def got_distance(a_nodes: np.ndarray, b_nodes: np.ndarray,
                 cfg: OTConfig) -> tuple[float, Coupling]:
    """Fused transport distance between two node matrices (columns = nodes)."""
    a = np.asarray(a_nodes, dtype=np.float64)
    b = np.asarray(b_nodes, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] < 1 or b.shape[1] < 1:
        raise ContractError("got_distance: node matrices must be 2-D and nonempty")
    coupling = solve_plan(
        _np_cosine_cost(a, b), _np_cosine_cost(a, a), _np_cosine_cost(b, b), cfg
    )
    return coupling.distance, coupling


def transport_loss(
    segments: list[SegmentTrace],
    cfg: OTConfig,
    frozen_plans: list[np.ndarray] | None = None,
) -> tuple[Tensor, list[np.ndarray]]:
    """Mean per-segment fused distance, scaled by alpha, on the tape.

    Plans come from `solve_plan` on the current values (or `frozen_plans`)
    and are treated as constants; gradients reach the node matrices through
    the cosine cost matrices only.
    """
    if not segments:
        raise ContractError("transport_loss: need at least one segment")
    if cfg.alpha == 0.0:
        return Tensor(0.0), []
    plans: list[np.ndarray] = []
    terms: list[Tensor] = []
    for si, seg in enumerate(segments):
        node_cost = tn.cosine_cost(seg.text, seg.visual)
        intra_s = tn.cosine_cost(seg.text, seg.text)
        intra_v = tn.cosine_cost(seg.visual, seg.visual)
        if frozen_plans is not None:
            plan = frozen_plans[si]
        else:
            plan = solve_plan(node_cost.data, intra_s.data, intra_v.data, cfg).plan
        plans.append(plan)
        node_term = tn.mul(node_cost, Tensor(cfg.lam * plan)).sum()
        terms.append(tn.add(node_term, tn.gw_pair_cost(intra_s, intra_v, plan)))
    total = terms[0] if len(terms) == 1 else tn.concat(terms, axis=0).sum()
    return tn.scale(total, cfg.alpha / len(segments)), plans


def brute_force_wd(cost: np.ndarray) -> float:
    """Exact uniform-marginal transport cost by permutation enumeration.

    Valid for square costs up to 6x6, where the optimum sits on a
    permutation vertex of the doubly stochastic polytope.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ShapeError(f"brute_force_wd: cost must be square, got {cost.shape}")
    n = cost.shape[0]
    if n > 6:
        raise ContractError(f"brute_force_wd: n={n} exceeds the enumeration limit of 6")
    rows = np.arange(n)
    return min(float(cost[rows, perm].mean()) for perm in itertools.permutations(range(n)))
