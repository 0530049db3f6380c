"""AC branch flows, nodal mismatches, limit checks and a Newton power-flow solver."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .network import BusKind, Network, build_admittance, branch_admittances

logger = logging.getLogger(__name__)


class PowerFlowDivergence(RuntimeError):
    def __init__(self, message: str, mismatch: float, history=()):
        super().__init__(f"{message} (last mismatch {mismatch:.3e})")
        self.mismatch = mismatch
        self.history = list(history)


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    out = -((-a + np.pi) % (2 * np.pi) - np.pi)
    return out


@dataclass
class OperatingPoint:
    """AC decision vector ``(p_g, q_g, v, theta)`` plus optional branch |S|."""

    p_g: np.ndarray
    q_g: np.ndarray
    v: np.ndarray
    theta: np.ndarray
    s_branch: Optional[np.ndarray] = None

    def __post_init__(self):
        self.p_g = np.asarray(self.p_g, dtype=float)
        self.q_g = np.asarray(self.q_g, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        if self.s_branch is not None:
            self.s_branch = np.asarray(self.s_branch, dtype=float)

    def check(self, net: Network) -> None:
        shapes = {"p_g": (self.p_g, net.n_gen), "q_g": (self.q_g, net.n_gen),
                  "v": (self.v, net.n_bus), "theta": (self.theta, net.n_bus)}
        if self.s_branch is not None:
            shapes["s_branch"] = (self.s_branch, net.n_branch)
        for name, (arr, n) in shapes.items():
            if arr.shape != (n,):
                raise ValueError(f"{name} has shape {arr.shape}, network needs ({n},)")

    def to_dict(self) -> dict:
        out = {"v": self.v.tolist(), "theta": self.theta.tolist(),
               "p_g": self.p_g.tolist(), "q_g": self.q_g.tolist()}
        if self.s_branch is not None:
            out["s_branch"] = self.s_branch.tolist()
        return out

    @classmethod
    def from_dict(cls, doc: dict, net: Optional[Network] = None) -> "OperatingPoint":
        from .network import CaseParseError

        try:
            pt = cls(p_g=doc["p_g"], q_g=doc["q_g"], v=doc["v"], theta=doc["theta"],
                     s_branch=doc.get("s_branch"))
        except KeyError as exc:
            raise CaseParseError(f"labels_ac: missing field {exc.args[0]!r}") from None
        if net is not None:
            try:
                pt.check(net)
            except ValueError as exc:
                raise CaseParseError(f"labels_ac: {exc}") from None
        return pt

    def copy(self) -> "OperatingPoint":
        return OperatingPoint(self.p_g.copy(), self.q_g.copy(), self.v.copy(), self.theta.copy(),
                              None if self.s_branch is None else self.s_branch.copy())


@dataclass
class PfResidual:
    r_p: np.ndarray
    r_q: np.ndarray

    @property
    def max_abs(self) -> float:
        return float(max(np.max(np.abs(self.r_p), initial=0.0), np.max(np.abs(self.r_q), initial=0.0)))


@dataclass
class ViolationReport:
    v_viol: np.ndarray
    q_viol: np.ndarray
    s_viol: np.ndarray
    cost_gap: Optional[float] = None

    def summary(self) -> dict:
        out = {"v_viol_max": float(np.max(self.v_viol, initial=0.0)),
               "q_viol_max": float(np.max(self.q_viol, initial=0.0)),
               "s_viol_max": float(np.max(self.s_viol, initial=0.0)),
               "v_viol": self.v_viol.tolist(), "q_viol": self.q_viol.tolist(),
               "s_viol": self.s_viol.tolist()}
        if self.cost_gap is not None:
            out["cost_gap"] = self.cost_gap
        return out


# ---------------------------------------------------------------------------
# Flows and mismatches


def branch_flows(net: Network, pt: OperatingPoint):
    """Both-end flows for every branch.

    Returns ``(p_ft, q_ft, p_tf, q_tf)`` using the full pi model (series
    admittance, line charging, off-nominal tap and phase shift).
    """
    f, t = net.f_idx, net.t_idx
    yff, yft, ytf, ytt = branch_admittances(net)
    vf, vt = pt.v[f], pt.v[t]
    d = wrap_angle(pt.theta[f] - pt.theta[t])
    rot = np.exp(1j * d)
    s_ft = vf * vf * np.conj(yff) + vf * vt * np.conj(yft) * rot
    s_tf = vt * vt * np.conj(ytt) + vf * vt * np.conj(ytf) * np.conj(rot)
    return s_ft.real, s_ft.imag, s_tf.real, s_tf.imag


def branch_flow(net: Network, pt: OperatingPoint, branch: int):
    """Flows ``(p_bn, q_bn, p_nb, q_nb)`` on the branch whose id is ``branch``."""
    k = net.branch_position(branch)
    p_ft, q_ft, p_tf, q_tf = branch_flows(net, pt)
    return float(p_ft[k]), float(q_ft[k]), float(p_tf[k]), float(q_tf[k])


def apparent_flow(net: Network, pt: OperatingPoint) -> np.ndarray:
    """From-end apparent power magnitude, the quantity stored as ``s_branch``."""
    p_ft, q_ft, _, _ = branch_flows(net, pt)
    return np.hypot(p_ft, q_ft)


def bus_injections(net: Network, v, theta, Y=None):
    if Y is None:
        Y = build_admittance(net)
    d = wrap_angle(theta[:, None] - theta[None, :])
    c, s = np.cos(d), np.sin(d)
    vv = v[:, None] * v[None, :]
    p = np.sum(vv * (Y.G * c + Y.B * s), axis=1)
    q = np.sum(vv * (Y.G * s - Y.B * c), axis=1)
    return p, q


def gen_to_bus(net: Network, values) -> np.ndarray:
    out = np.zeros(net.n_bus)
    np.add.at(out, net.gen_bus, np.asarray(values, dtype=float))
    return out


def pf_residual(net: Network, pt: OperatingPoint, Y=None) -> PfResidual:
    pt.check(net)
    p, q = bus_injections(net, pt.v, pt.theta, Y)
    r_p = gen_to_bus(net, pt.p_g) - net.p_d - p
    r_q = gen_to_bus(net, pt.q_g) - net.q_d - q
    return PfResidual(r_p, r_q)


def feasibility_distance(net: Network, pt: OperatingPoint, Y=None) -> float:
    """Mean over buses of the L2 norm of the (active, reactive) mismatch."""
    res = pf_residual(net, pt, Y)
    return float(np.mean(np.hypot(res.r_p, res.r_q)))


def losses(net: Network, pt: OperatingPoint) -> float:
    """Active power consumed by branches and bus shunt conductances."""
    p_ft, _, p_tf, _ = branch_flows(net, pt)
    return float(np.sum(p_ft + p_tf) + np.sum(net.bus_array("shunt_g") * pt.v**2))


def violations(net: Network, pt: OperatingPoint, ref_cost: Optional[float] = None) -> ViolationReport:
    pt.check(net)
    v_min, v_max = net.bus_array("v_min"), net.bus_array("v_max")
    q_min, q_max = net.gen_array("q_min"), net.gen_array("q_max")
    v_viol = np.maximum(pt.v - v_max, 0.0) + np.maximum(v_min - pt.v, 0.0)
    q_viol = np.maximum(pt.q_g - q_max, 0.0) + np.maximum(q_min - pt.q_g, 0.0)
    s = pt.s_branch if pt.s_branch is not None else apparent_flow(net, pt)
    s_viol = np.maximum(s - net.branch_array("s_max"), 0.0)
    gap = None
    if ref_cost is not None:
        gap = abs(net.generation_cost(pt.p_g) - float(ref_cost))
    return ViolationReport(v_viol, q_viol, s_viol, gap)


# ---------------------------------------------------------------------------
# Newton-Raphson


def bus_types(net: Network):
    """(slack, pv, pq) index arrays. PV buses without a generator act as PQ."""
    has_gen = np.zeros(net.n_bus, dtype=bool)
    has_gen[net.gen_bus] = True
    kinds = [b.kind for b in net.buses]
    ref = np.array([net.slack])
    pv = np.array([k for k, kd in enumerate(kinds) if kd is BusKind.PV and has_gen[k]], dtype=np.int64)
    pq = np.array([k for k, kd in enumerate(kinds)
                   if kd is BusKind.PQ or (kd is BusKind.PV and not has_gen[k])], dtype=np.int64)
    return ref, pv, pq


def default_setpoints(net: Network) -> np.ndarray:
    return 0.5 * (net.bus_array("v_min") + net.bus_array("v_max"))


@dataclass
class NewtonTrace:
    point: OperatingPoint
    history: list = field(default_factory=list)
    iterations: int = 0


def newton_pf_trace(net: Network, p_g, v_set=None, max_iter: int = 30, tol: float = 1e-10) -> NewtonTrace:
    """Newton power flow from a flat start; see :func:`newton_pf`."""
    p_g = np.asarray(p_g, dtype=float).copy()
    if p_g.shape != (net.n_gen,):
        raise ValueError(f"p_g has shape {p_g.shape}, expected ({net.n_gen},)")
    v_set = default_setpoints(net) if v_set is None else np.asarray(v_set, dtype=float)
    ref, pv, pq = bus_types(net)
    if not np.any(net.gen_bus == ref[0]):
        raise ValueError("slack bus has no generator to absorb the mismatch")
    Y = build_admittance(net).Y
    pvpq = np.concatenate([pv, pq])

    vm = np.ones(net.n_bus)
    vm[ref] = v_set[ref]
    vm[pv] = v_set[pv]
    va = np.zeros(net.n_bus)
    s_spec = gen_to_bus(net, p_g) - net.p_d - 1j * net.q_d

    def mismatch(V):
        mis = V * np.conj(Y @ V) - s_spec
        return np.concatenate([mis.real[pvpq], mis.imag[pq]])

    V = vm * np.exp(1j * va)
    F = mismatch(V)
    norm = float(np.max(np.abs(F), initial=0.0))
    history = [norm]
    it = 0
    while norm >= tol:
        if it >= max_iter:
            raise PowerFlowDivergence(f"Newton did not converge in {max_iter} iterations", norm, history)
        it += 1
        Ibus = Y @ V
        Vn = V / np.abs(V)
        dS_dVa = 1j * np.diag(V) @ np.conj(np.diag(Ibus) - Y @ np.diag(V))
        dS_dVm = np.diag(V) @ np.conj(Y @ np.diag(Vn)) + np.conj(np.diag(Ibus)) @ np.diag(Vn)
        J = np.block([
            [dS_dVa.real[np.ix_(pvpq, pvpq)], dS_dVm.real[np.ix_(pvpq, pq)]],
            [dS_dVa.imag[np.ix_(pq, pvpq)], dS_dVm.imag[np.ix_(pq, pq)]],
        ])
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            raise PowerFlowDivergence("singular Jacobian", norm, history) from None
        va[pvpq] += dx[: len(pvpq)]
        vm[pq] += dx[len(pvpq):]
        V = vm * np.exp(1j * va)
        F = mismatch(V)
        norm = float(np.max(np.abs(F), initial=0.0))
        history.append(norm)
        if not np.isfinite(norm) or np.any(vm <= 0):
            raise PowerFlowDivergence("Newton iterates left the physical region", norm, history)

    s_calc = V * np.conj(Y @ V)
    q_g = np.zeros(net.n_gen)
    # slack: first generator at the slack bus takes the imbalance
    slack_gens = np.flatnonzero(net.gen_bus == ref[0])
    others = p_g[slack_gens[1:]].sum()
    p_g[slack_gens[0]] = s_calc.real[ref[0]] + net.p_d[ref[0]] - others
    for bus in np.concatenate([ref, pv]):
        gens = np.flatnonzero(net.gen_bus == bus)
        q_g[gens] = (s_calc.imag[bus] + net.q_d[bus]) / len(gens)
    pt = OperatingPoint(p_g=p_g, q_g=q_g, v=vm.copy(), theta=va.copy())
    pt.s_branch = apparent_flow(net, pt)
    logger.debug("newton converged in %d iterations, mismatch %.2e", it, norm)
    return NewtonTrace(pt, history, it)


def newton_pf(net: Network, p_g, v_set=None, max_iter: int = 30, tol: float = 1e-10) -> OperatingPoint:
    """Solve the AC power flow for a fixed generator dispatch.

    Parameters
    ----------
    p_g : per-generator active dispatch. The first generator on the slack bus
        is re-dispatched to cover losses.
    v_set : per-bus voltage setpoints; only slack and PV entries are used.
        Defaults to the midpoint of each bus's voltage band.

    Raises
    ------
    PowerFlowDivergence
        When the mismatch stays above ``tol`` after ``max_iter`` iterations.
    """
    return newton_pf_trace(net, p_g, v_set, max_iter, tol).point
