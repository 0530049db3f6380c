"""Scenario perturbation, Newton labelling and model-driven data generation."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import gnn
from .acphysics import OperatingPoint, PowerFlowDivergence, feasibility_distance, newton_pf
from .dcopf import DcSolution, DcStatus, solve_network
from .network import Network, load_case, parse_case, scale_loads, serialize_case

logger = logging.getLogger(__name__)

NEWTON_LABEL = "newton_label"
MODEL_GENERATED = "model_generated"
MAX_OVERSAMPLING = 10
PERTURBATION_NOTE = "per-load i.i.d. uniform scaling; a stand-in law, not the one behind OPFData"


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PerturbSpec:
    lo: float = 0.8
    hi: float = 1.2
    per_load: bool = True
    count: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not (0 <= self.lo <= self.hi):
            raise ValueError(f"need 0 <= lo <= hi, got [{self.lo}, {self.hi}]")


@dataclass
class GeneratedSample:
    net: Network
    dc: DcSolution
    point: OperatingPoint
    feasibility: float
    provenance: str


def _draws(base: Network, spec: PerturbSpec, rng):
    n = len(base.loads) if spec.per_load else 1
    while True:
        f = rng.uniform(spec.lo, spec.hi, size=n)
        yield np.broadcast_to(f, (len(base.loads),)).copy()


def perturb(base: Network, spec: PerturbSpec, label: bool = False):
    """Scale loads by seeded uniform draws; redraw scenarios whose DC-OPF is infeasible.

    With ``label=True`` scenarios whose Newton power flow diverges are redrawn
    too, and the result is a list of ``(net, dc, label)`` triples.
    """
    rng = np.random.default_rng(spec.seed)
    out = []
    budget = MAX_OVERSAMPLING * spec.count
    for attempt, factors in enumerate(_draws(base, spec, rng)):
        if len(out) == spec.count:
            break
        if attempt >= budget:
            raise GenerationError(f"only {len(out)} of {spec.count} scenarios feasible after {budget} draws")
        try:
            net = scale_loads(base, factors)
        except ValueError:
            continue
        dc = solve_network(net)
        if dc.status is not DcStatus.OPTIMAL:
            continue
        if not label:
            out.append(net)
            continue
        try:
            lab = newton_label(net, dc)
        except PowerFlowDivergence:
            logger.debug("newton diverged on draw %d; redrawing", attempt)
            continue
        out.append((net, dc, lab))
    return out


def newton_label(net: Network, dc: DcSolution) -> OperatingPoint:
    """AC label: Newton power flow on the DC dispatch, setpoints at band midpoints."""
    return newton_pf(net, dc.p_g_dc)


def generate_ac(params: gnn.ModelParams, net: Network) -> GeneratedSample:
    """DC solve, warm start and model correction for one scenario."""
    dc = solve_network(net)
    if dc.status is not DcStatus.OPTIMAL:
        raise GenerationError(f"DC-OPF is {dc.status.value}: {dc.certificate}")
    sample = gnn.make_sample(net, dc=dc)
    pt = gnn.predict(params, [sample])[0]
    if not all(np.all(np.isfinite(a)) for a in (pt.v, pt.theta, pt.p_g, pt.q_g, pt.s_branch)):
        raise GenerationError("model produced non-finite values")
    return GeneratedSample(net, dc, pt, feasibility_distance(net, pt), MODEL_GENERATED)


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_dataset(samples: list, out_dir: str, spec: Optional[PerturbSpec] = None, base: str = "") -> dict:
    """Write one scenario JSON per sample plus ``manifest.json`` with hashes."""
    os.makedirs(out_dir, exist_ok=True)
    files = []
    for k, s in enumerate(samples):
        name = f"scenario_{k:05d}.json"
        text = serialize_case(s.net, labels=s.point, extra={
            "provenance": s.provenance, "feasibility_distance": s.feasibility})
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
        files.append({"file": name, "sha256": sha256_file(path), "provenance": s.provenance})
    manifest = {"format": "dc2ac-dataset", "version": 1, "base": base, "count": len(samples), "files": files}
    if spec is not None:
        manifest["perturbation"] = {**asdict(spec), "law": PERTURBATION_NOTE}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def read_dataset(data_dir: str, verify: bool = True) -> list:
    """``(net, label, provenance)`` triples in manifest order; hashes are checked."""
    with open(os.path.join(data_dir, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    out = []
    for entry in manifest["files"]:
        path = os.path.join(data_dir, entry["file"])
        if verify and sha256_file(path) != entry["sha256"]:
            raise GenerationError(f"{entry['file']}: content hash does not match the manifest")
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        net, lab = parse_case(text)
        out.append((net, lab, json.loads(text).get("provenance", entry.get("provenance"))))
    return out


def load_samples(data_dir: str) -> list:
    """Dataset directory -> labelled ``GraphSample`` list."""
    return [gnn.make_sample(net, label=lab) for net, lab, _ in read_dataset(data_dir)]


def newton_dataset(base: Network, spec: PerturbSpec) -> list:
    return [GeneratedSample(net, dc, lab, feasibility_distance(net, lab), NEWTON_LABEL)
            for net, dc, lab in perturb(base, spec, label=True)]


def model_dataset(params: gnn.ModelParams, base: Network, spec: PerturbSpec) -> list:
    return [generate_ac(params, net) for net in perturb(base, spec)]


def load_base(path_or_name: str) -> Network:
    """A case file path, or the name of a bundled fixture."""
    if os.path.exists(path_or_name):
        return load_case(path_or_name)[0]
    from .network import bundled_case

    return bundled_case(path_or_name)
