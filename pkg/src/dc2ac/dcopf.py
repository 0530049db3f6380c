"""DC optimal power flow: B-theta model, active-set QP solver and DC features."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .acphysics import OperatingPoint
from .network import Network

logger = logging.getLogger(__name__)

FEAS_TOL = 1e-8
OPT_TOL = 1e-8
# relative cost tilt that makes equal-cost generators prefer the lower id
TIE_TILT = 1e-9


class FeatureExtractionError(ValueError):
    pass


class DcStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


@dataclass(frozen=True)
class DcSystem:
    B_dc: np.ndarray        # (n_bus, n_bus)
    incidence: np.ndarray   # (n_branch, n_bus), +1 at from, -1 at to
    inv_x: np.ndarray       # (n_branch,)
    shift: np.ndarray       # (n_branch,)


@dataclass
class DcSolution:
    p_g_dc: np.ndarray
    theta_dc: np.ndarray
    f_dc: np.ndarray
    objective: float
    status: DcStatus
    certificate: list = field(default_factory=list)
    iterations: int = 0

    def to_dict(self) -> dict:
        return {"status": self.status.value, "objective": self.objective,
                "p_g_dc": self.p_g_dc.tolist(), "theta_dc": self.theta_dc.tolist(),
                "f_dc": self.f_dc.tolist(), "certificate": list(self.certificate),
                "iterations": self.iterations}


@dataclass(frozen=True)
class DcFeatureSet:
    """DC features.

    ``node`` rows are ``[theta, p_inj]`` per bus, ``edge`` rows ``[F]`` per
    branch, and ``y`` is ``theta || p_g || F`` in network element order.
    """

    node: np.ndarray
    edge: np.ndarray
    y: np.ndarray


def build_dc(net: Network) -> DcSystem:
    C = np.zeros((net.n_branch, net.n_bus))
    rows = np.arange(net.n_branch)
    C[rows, net.f_idx] += 1.0
    C[rows, net.t_idx] -= 1.0
    inv_x = 1.0 / net.branch_array("x")
    return DcSystem(B_dc=C.T @ (inv_x[:, None] * C), incidence=C, inv_x=inv_x,
                    shift=net.branch_array("shift"))


# ---------------------------------------------------------------------------
# Problem assembly: z = [p_g, theta]


@dataclass
class _Problem:
    H: np.ndarray
    c: np.ndarray
    Ae: np.ndarray
    be: np.ndarray
    Ai: np.ndarray
    bi: np.ndarray
    names: list


def _assemble(sys: DcSystem, net: Network, tilt: bool = True) -> _Problem:
    ng, nb, nl = net.n_gen, net.n_bus, net.n_branch
    n = ng + nb
    coeffs = net.cost_coeffs
    H = np.zeros((n, n))
    H[np.arange(ng), np.arange(ng)] = 2.0 * coeffs[:, 0]
    c = np.zeros(n)
    c[:ng] = coeffs[:, 1]
    if tilt and ng:
        scale = 1.0 + np.max(np.abs(coeffs[:, :2]))
        c[:ng] += TIE_TILT * scale * np.arange(ng)

    Cg = np.zeros((nb, ng))
    Cg[net.gen_bus, np.arange(ng)] = 1.0
    shift_inj = sys.incidence.T @ (sys.shift * sys.inv_x)
    Ae = np.zeros((nb + 1, n))
    Ae[:nb, :ng] = Cg
    Ae[:nb, ng:] = -sys.B_dc
    Ae[nb, ng + net.slack] = 1.0
    be = np.concatenate([net.p_d - shift_inj, [0.0]])

    flow_rows = sys.inv_x[:, None] * sys.incidence
    Ai = np.zeros((2 * ng + 2 * nl, n))
    Ai[:ng, :ng] = np.eye(ng)
    Ai[ng:2 * ng, :ng] = -np.eye(ng)
    Ai[2 * ng:2 * ng + nl, ng:] = flow_rows
    Ai[2 * ng + nl:, ng:] = -flow_rows
    fmax = net.branch_array("s_max")
    off = sys.shift * sys.inv_x
    bi = np.concatenate([net.gen_array("p_max"), -net.gen_array("p_min"), fmax + off, fmax - off])
    names = ([f"p_max gen {g.id}" for g in net.generators] + [f"p_min gen {g.id}" for g in net.generators]
             + [f"flow_max branch {br.id}" for br in net.branches]
             + [f"flow_min branch {br.id}" for br in net.branches])
    return _Problem(H, c, Ae, be, Ai, bi, names)


# ---------------------------------------------------------------------------
# Active-set QP


class _Unbounded(Exception):
    pass


def _null_space(A: np.ndarray, n: int, tol: float = 1e-10) -> np.ndarray:
    if A.shape[0] == 0:
        return np.eye(n)
    _, s, vt = np.linalg.svd(A)
    rank = int(np.sum(s > tol * max(1.0, s[0])))
    return vt[rank:].T


def _independent(Ae: np.ndarray, rows: np.ndarray, candidates, tol: float = 1e-9) -> list:
    """Greedy (by index) subset of ``candidates`` keeping the working set full-rank."""
    chosen = []
    base = Ae
    rank = np.linalg.matrix_rank(base, tol=tol) if base.shape[0] else 0
    for i in candidates:
        trial = np.vstack([base, rows[i]])
        r = np.linalg.matrix_rank(trial, tol=tol)
        if r > rank:
            chosen.append(i)
            base, rank = trial, r
    return chosen


def active_set_qp(H, c, Ae, be, Ai, bi, z, working, max_iter: int = 5000):
    """Primal active-set method for a convex QP from a feasible start.

    Minimizes ``0.5 z'Hz + c'z`` s.t. ``Ae z = be``, ``Ai z <= bi``. ``H`` may
    be singular (LP directions are followed along zero curvature until a
    constraint blocks). Both the leaving and the entering constraint are
    chosen by lowest index (Bland), so the iteration cannot cycle.

    Returns ``(z, working, multipliers, iterations)``.
    """
    n = len(z)
    W = list(working)
    scale = 1.0 + np.max(np.abs(c), initial=0.0) + np.max(np.abs(H), initial=0.0)
    for it in range(1, max_iter + 1):
        A_w = np.vstack([Ae, Ai[W]]) if W else Ae
        Z = _null_space(A_w, n)
        g = H @ z + c
        d = np.zeros(n)
        step_cap = 1.0
        if Z.shape[1]:
            gr = Z.T @ g
            w, V = np.linalg.eigh(Z.T @ H @ Z)
            pos = w > 1e-10 * scale
            g0 = V[:, ~pos] @ (V[:, ~pos].T @ gr)
            if np.linalg.norm(g0) > 1e-12 * scale:
                d = -Z @ g0
                step_cap = np.inf
            else:
                d = -Z @ (V[:, pos] @ ((V[:, pos].T @ gr) / w[pos]))
        if np.linalg.norm(d) <= 1e-13 * (1.0 + np.linalg.norm(z)):
            lam, *_ = np.linalg.lstsq(A_w.T, -g, rcond=None)
            lam_i = lam[Ae.shape[0]:]
            neg = [W[k] for k in range(len(W)) if lam_i[k] < -1e-11 * scale]
            if not neg:
                mult = np.zeros(Ai.shape[0])
                mult[W] = lam_i
                return z, W, (lam[:Ae.shape[0]], mult), it
            W.remove(min(neg))
            continue
        ad = Ai @ d
        slack = bi - Ai @ z
        alpha, block = step_cap, None
        for i in np.flatnonzero(ad > 1e-12 * np.linalg.norm(d)):
            if i in W:
                continue
            a = max(slack[i], 0.0) / ad[i]
            if a < alpha - 1e-15:
                alpha, block = a, int(i)
        if not np.isfinite(alpha):
            raise _Unbounded()
        z = z + alpha * d
        if block is not None:
            W.append(block)
            W.sort()
    raise RuntimeError(f"active-set QP did not terminate in {max_iter} iterations")


def _phase_one(p: _Problem, z0: np.ndarray):
    """Minimize total constraint violation to find a feasible point."""
    n, me, mi = len(z0), p.Ae.shape[0], p.Ai.shape[0]
    N = n + 2 * me + mi
    r = p.be - p.Ae @ z0
    viol = p.Ai @ z0 - p.bi
    x0 = np.concatenate([z0, np.maximum(r, 0), np.maximum(-r, 0), np.maximum(viol, 0)])
    Ae = np.hstack([p.Ae, np.eye(me), -np.eye(me), np.zeros((me, mi))])
    Ai = np.vstack([
        np.hstack([p.Ai, np.zeros((mi, 2 * me)), -np.eye(mi)]),
        np.hstack([np.zeros((N - n, n)), -np.eye(N - n)]),
    ])
    bi = np.concatenate([p.bi, np.zeros(N - n)])
    c = np.concatenate([np.zeros(n), np.ones(N - n)])
    x, _, _, it = active_set_qp(np.zeros((N, N)), c, Ae, p.be, Ai, bi, x0, [])
    art = x[n:]
    total = float(art.sum())
    labels = ([f"balance bus {k}" for k in range(me - 1)] + ["slack angle"]) * 2 + p.names
    violated = sorted({labels[k] for k in np.flatnonzero(art > FEAS_TOL)})
    return x[:n], total, violated, it


def _proportional_start(sys: DcSystem, net: Network) -> np.ndarray:
    """Dispatch every unit at the same fraction of its range, then solve angles."""
    p_min, p_max = net.gen_array("p_min"), net.gen_array("p_max")
    span = float(np.sum(p_max - p_min))
    frac = (net.p_d.sum() - p_min.sum()) / span if span > 0 else 0.0
    p_g = p_min + np.clip(frac, 0.0, 1.0) * (p_max - p_min)
    inj = np.zeros(net.n_bus)
    np.add.at(inj, net.gen_bus, p_g)
    inj += sys.incidence.T @ (sys.shift * sys.inv_x) - net.p_d
    keep = np.arange(net.n_bus) != net.slack
    theta = np.zeros(net.n_bus)
    if keep.any():
        theta[keep] = np.linalg.solve(sys.B_dc[np.ix_(keep, keep)], inj[keep])
    return np.concatenate([p_g, theta])


def solve_dc(sys: DcSystem, net: Network) -> DcSolution:
    """Solve the DC-OPF (quadratic costs, balance, generator and flow limits)."""
    p = _assemble(sys, net)
    ng, nb = net.n_gen, net.n_bus
    z0 = _proportional_start(sys, net)
    infeasible = DcSolution(np.full(ng, np.nan), np.full(nb, np.nan), np.full(net.n_branch, np.nan),
                            float("nan"), DcStatus.INFEASIBLE)
    if (np.max(p.Ai @ z0 - p.bi, initial=0.0) > FEAS_TOL
            or np.max(np.abs(p.Ae @ z0 - p.be), initial=0.0) > FEAS_TOL):
        z0, total, violated, it1 = _phase_one(p, z0)
        if total > FEAS_TOL * max(1.0, float(np.abs(p.be).sum())):
            infeasible.certificate = violated
            infeasible.iterations = it1
            logger.info("DC-OPF infeasible: %s", violated)
            return infeasible
    else:
        it1 = 0
    slack = p.bi - p.Ai @ z0
    active = [int(i) for i in np.flatnonzero(slack <= FEAS_TOL)]
    W = _independent(p.Ae, p.Ai, active)
    try:
        z, _, _, it2 = active_set_qp(p.H, p.c, p.Ae, p.be, p.Ai, p.bi, z0, W)
    except _Unbounded:
        return DcSolution(np.full(ng, np.nan), np.full(nb, np.nan), np.full(net.n_branch, np.nan),
                          float("-inf"), DcStatus.UNBOUNDED)
    p_g, theta = z[:ng], z[ng:]
    theta = theta - theta[net.slack]
    flows = sys.inv_x * (sys.incidence @ theta - sys.shift)
    return DcSolution(p_g_dc=p_g.copy(), theta_dc=theta.copy(), f_dc=flows,
                      objective=net.generation_cost(p_g), status=DcStatus.OPTIMAL,
                      iterations=it1 + it2)


def kkt_residuals(net: Network, sol: DcSolution, active_tol: float = 1e-7) -> dict:
    """Check first-order optimality of a reported DC optimum.

    Multipliers are recovered independently of the solver by nonnegative
    least squares over the equality rows and the active inequality rows.
    Stationarity is reported relative to the cost-gradient scale.
    """
    p = _assemble(build_dc(net), net, tilt=False)
    z = np.concatenate([sol.p_g_dc, sol.theta_dc])
    g = p.H @ z + p.c
    slack = p.bi - p.Ai @ z
    act = np.flatnonzero(slack <= active_tol)
    M = np.hstack([p.Ae.T, -p.Ae.T, p.Ai[act].T])
    mult, _ = nnls(M, -g, maxiter=50 * M.shape[1])
    lam = np.zeros(p.Ai.shape[0])
    lam[act] = mult[2 * p.Ae.shape[0]:]
    scale = 1.0 + np.max(np.abs(g), initial=0.0)
    return {
        "stationarity": float(np.max(np.abs(M @ mult + g), initial=0.0) / scale),
        "primal_eq": float(np.max(np.abs(p.Ae @ z - p.be), initial=0.0)),
        "primal_ineq": float(max(0.0, -np.min(slack, initial=0.0))),
        "complementarity": float(np.max(np.abs(lam * slack), initial=0.0) / scale),
        "dual": float(max(0.0, -np.min(lam, initial=0.0))),
    }


def extract_dc_features(sol: DcSolution, net: Network) -> DcFeatureSet:
    if sol.status is not DcStatus.OPTIMAL:
        raise FeatureExtractionError(f"cannot extract features from a {sol.status.value} DC solution")
    p_inj = np.zeros(net.n_bus)
    np.add.at(p_inj, net.gen_bus, sol.p_g_dc)
    p_inj -= net.p_d
    node = np.column_stack([sol.theta_dc, p_inj])
    edge = sol.f_dc.reshape(-1, 1)
    y = np.concatenate([sol.theta_dc, sol.p_g_dc, sol.f_dc])
    return DcFeatureSet(node=node, edge=edge, y=y)


def warm_start(sol: DcSolution, net: Network) -> OperatingPoint:
    """AC starting point from the DC optimum: v = 1, q_g = 0, |S| = |F_dc|."""
    if sol.status is not DcStatus.OPTIMAL:
        raise FeatureExtractionError("warm start needs an optimal DC solution")
    return OperatingPoint(p_g=sol.p_g_dc.copy(), q_g=np.zeros(net.n_gen), v=np.ones(net.n_bus),
                          theta=sol.theta_dc.copy(), s_branch=np.abs(sol.f_dc))


def solve_network(net: Network) -> DcSolution:
    return solve_dc(build_dc(net), net)
