"""Physics-informed loss, optimizer loop and evaluation metrics."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from . import autodiff as ad
from . import gnn
from .acphysics import OperatingPoint, feasibility_distance, gen_to_bus, violations
from .autodiff import Tensor

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-3


class ConfigError(ValueError):
    pass


@dataclass
class LossWeights:
    alpha_v: float = 1.0
    alpha_theta: float = 1.0
    alpha_p: float = 1.0
    alpha_q: float = 1.0
    alpha_s: float = 1.0
    pf: float = 0.1
    box: float = 0.1
    obj: float = 0.01
    res: float = 1e-4

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"loss weight {k} must be a finite non-negative number, got {v}")

    def alpha(self, q: str) -> float:
        return {"v": self.alpha_v, "theta": self.alpha_theta, "p_g": self.alpha_p,
                "q_g": self.alpha_q, "s": self.alpha_s}[q]


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 20
    clip: float = 1.0
    seed: int = 0
    split: tuple = (0.8, 0.1, 0.1)
    mode: str = "residual"
    d_h: int = 64
    d_k: int = 32
    layers: int = 4

    def __post_init__(self):
        self.split = tuple(float(f) for f in self.split)
        if len(self.split) != 3 or any(f < 0 for f in self.split) or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {self.split}")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.mode not in ("residual", "direct"):
            raise ConfigError(f"mode must be 'residual' or 'direct', got {self.mode!r}")
        if self.batch_size < 1 or self.max_epochs < 1 or not self.lr > 0 or not self.clip > 0:
            raise ConfigError("batch_size, max_epochs, lr and clip must be positive")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class LossScales:
    """Training-split statistics used to balance the loss terms."""

    sigma: dict
    cost: float = 1.0


# ---------------------------------------------------------------------------
# loss


def pf_mismatch(batch: gnn.GraphBatch, v: Tensor, theta: Tensor, p_g: Tensor, q_g: Tensor):
    """Active/reactive bus mismatch tensors ``(r_p, r_q)`` of shape (n_bus, 1)."""
    I, J, G, B = batch.ypairs
    n = batch.n_bus
    d = ad.sub(ad.take_rows(theta, I), ad.take_rows(theta, J))
    c, s = ad.cos(d), ad.sin(d)
    vv = ad.mul(ad.take_rows(v, I), ad.take_rows(v, J))
    Gt, Bt = Tensor(G), Tensor(B)
    p_calc = ad.segment_sum(ad.mul(vv, ad.add(ad.mul(Gt, c), ad.mul(Bt, s))), I, n)
    q_calc = ad.segment_sum(ad.mul(vv, ad.sub(ad.mul(Gt, s), ad.mul(Bt, c))), I, n)
    r_p = ad.sub(ad.sub(ad.segment_sum(p_g, batch.gen_bus, n), Tensor(batch.p_d)), p_calc)
    r_q = ad.sub(ad.sub(ad.segment_sum(q_g, batch.gen_bus, n), Tensor(batch.q_d)), q_calc)
    return r_p, r_q


def _sumsq(x: Tensor) -> Tensor:
    return ad.sum_(ad.square(x))


def _box(x: Tensor, lo: Optional[np.ndarray], hi: np.ndarray) -> Tensor:
    out = _sumsq(ad.hinge(ad.sub(x, Tensor(hi))))
    if lo is not None:
        out = ad.add(out, _sumsq(ad.hinge(ad.sub(Tensor(lo), x))))
    return out


def generation_cost(batch: gnn.GraphBatch, p_g: Tensor) -> Tensor:
    """Per-graph cost column (n_graphs, 1)."""
    c = batch.cost
    per_gen = ad.add(ad.add(ad.mul(Tensor(c[:, :1]), ad.square(p_g)), ad.mul(Tensor(c[:, 1:2]), p_g)),
                     Tensor(c[:, 2:3]))
    return ad.segment_sum(per_gen, batch.gen_graph, batch.n_graphs)


def loss(batch: gnn.GraphBatch, pred: gnn.Prediction, weights: LossWeights, scales: LossScales):
    """Total loss and its per-term breakdown (floats), all averaged per graph."""
    if batch.label is None:
        raise ConfigError("loss needs labelled samples")
    inv_g = 1.0 / batch.n_graphs
    sup = None
    for q in gnn.QUANTITIES:
        err = ad.scale(ad.sub(pred.quantity(q), Tensor(batch.label[q])), 1.0 / scales.sigma[q])
        term = ad.scale(_sumsq(err), weights.alpha(q))
        sup = term if sup is None else ad.add(sup, term)
    sup = ad.scale(sup, inv_g)

    r_p, r_q = pf_mismatch(batch, pred.v, pred.theta, pred.p_g, pred.q_g)
    pf = ad.scale(ad.add(_sumsq(r_p), _sumsq(r_q)), inv_g)

    box = ad.add(ad.add(_box(pred.v, batch.v_min, batch.v_max), _box(pred.q_g, batch.q_min, batch.q_max)),
                 _box(pred.s, None, batch.s_max))
    box = ad.scale(box, inv_g)

    gap = ad.sub(generation_cost(batch, pred.p_g), Tensor(batch.label_cost[:, None]))
    obj = ad.scale(ad.sum_(ad.abs_(gap)), inv_g / scales.cost)

    dl = pred.delta
    res = ad.scale(ad.add(ad.add(ad.add(_sumsq(dl.dv), _sumsq(dl.dtheta)), ad.add(_sumsq(dl.dp_g), _sumsq(dl.dq_g))),
                          _sumsq(dl.ds)), inv_g)

    total = sup
    for w, term in ((weights.pf, pf), (weights.box, box), (weights.obj, obj), (weights.res, res)):
        if w:
            total = ad.add(total, ad.scale(term, w))
    terms = {"total": float(total.data.sum()), "sup": float(sup.data.sum()), "pf": float(pf.data.sum()),
             "box": float(box.data.sum()), "obj": float(obj.data.sum()), "res": float(res.data.sum())}
    return total, terms


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params: list, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: list) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_gradients(grads: list, max_norm: float):
    """Scale gradients so their global L2 norm is at most ``max_norm``.

    Returns the (possibly rescaled) gradients and the pre-clip norm.
    """
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        f = max_norm / norm
        grads = [g * f for g in grads]
    return grads, norm


# ---------------------------------------------------------------------------
# statistics and splits


def split_indices(n: int, fractions, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {"train": sorted(int(i) for i in perm[:n_train]),
            "val": sorted(int(i) for i in perm[n_train:n_train + n_val]),
            "test": sorted(int(i) for i in perm[n_train + n_val:])}


def _mean_std(x: np.ndarray):
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return [], []
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 1e-8, std, 1.0)
    return np.atleast_1d(mean).tolist(), np.atleast_1d(std).tolist()


def _label_arrays(samples: list, q: str, which: str = "label") -> np.ndarray:
    field_name = {"v": "v", "theta": "theta", "p_g": "p_g", "q_g": "q_g", "s": "s_branch"}[q]
    return np.concatenate([getattr(getattr(s, which), field_name) for s in samples])


def fit_statistics(samples: list, mode: str):
    """Input normalization, output scales and loss scales from the training split."""
    norm = {}
    for k in gnn.NODE_KINDS:
        rows = np.vstack([s.node_x[k] for s in samples]).reshape(-1, gnn.NODE_WIDTH[k])
        if len(rows):
            norm[f"node.{k}"] = list(_mean_std(rows))
    for t in gnn.EDGE_TYPES:
        xs = [s.edges[t][4] for s in samples if len(s.edges[t][1])]
        if xs:
            norm[f"edge.{t}"] = list(_mean_std(np.vstack(xs)))
            norm[f"dc.{t}"] = list(_mean_std(np.vstack([s.edges[t][5] for s in samples if len(s.edges[t][1])])))
    out_scale, sigma = {}, {}
    for q in gnn.QUANTITIES:
        lab = _label_arrays(samples, q)
        sigma[q] = max(float(lab.std()), SIGMA_FLOOR)
        if q == "theta":
            mask = np.concatenate([np.arange(s.net.n_bus) != s.net.slack for s in samples])
            lab = lab[mask]
        if mode == "residual":
            diff = lab - (_label_arrays(samples, q, "x0")[mask] if q == "theta" else _label_arrays(samples, q, "x0"))
            out_scale[q] = [0.0, max(float(np.sqrt(np.mean(diff ** 2))), SIGMA_FLOOR)]
        else:
            out_scale[q] = [float(lab.mean()), max(float(lab.std()), SIGMA_FLOOR)]
    cost = float(np.mean([abs(s.net.generation_cost(s.label.p_g)) for s in samples]))
    return norm, out_scale, LossScales(sigma=sigma, cost=max(cost, 1e-6))


def _fill_y_norm(norm: dict, samples: list, layout: dict) -> None:
    y = np.vstack([gnn.y_vector(s, layout) for s in samples])
    norm["y_dc"] = list(_mean_std(y))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)      # dicts: epoch, train{...}, val{...}
    best_epoch: int = -1
    best_val: float = math.inf
    stopped_early: bool = False
    diverged: bool = False
    n_params: int = 0
    splits: dict = field(default_factory=dict)
    epoch_seconds: list = field(default_factory=list)

    @property
    def best_val_curve(self) -> list:
        out, best = [], math.inf
        for e in self.epochs:
            best = min(best, e["val"]["total"])
            out.append(best)
        return out

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("epoch_seconds")
        return d


def _batches(samples: list, order, size: int):
    for lo in range(0, len(order), size):
        yield [samples[i] for i in order[lo:lo + size]]


def evaluate_loss(params: gnn.ModelParams, batches: list, weights: LossWeights, scales: LossScales) -> dict:
    """Loss terms averaged per graph over prebuilt batches, no gradient tracking."""
    acc, n = {}, 0
    for b in batches:
        _, terms = loss(b, gnn.forward(b, params), weights, scales)
        for k, v in terms.items():
            acc[k] = acc.get(k, 0.0) + v * b.n_graphs
        n += b.n_graphs
    return {k: v / n for k, v in acc.items()}


def train(samples: list, config: TrainConfig = None, weights: LossWeights = None,
          init: Optional[gnn.ModelParams] = None, out_dir: Optional[str] = None,
          splits: Optional[dict] = None):
    """Fit the residual GNN on labelled ``GraphSample`` objects.

    ``init`` continues from an existing model (fine-tuning): its normalization
    and output scales are kept. ``splits`` overrides the seeded split.
    Returns ``(best_params, report)``.
    """
    config = config or TrainConfig()
    weights = weights or LossWeights()
    if len(samples) < 10:
        raise ConfigError("training needs at least 10 samples")
    if any(s.label is None for s in samples):
        raise ConfigError("every training sample needs a label")
    splits = splits or split_indices(len(samples), config.split, config.seed)
    train_set = [samples[i] for i in splits["train"]]
    val_set = [samples[i] for i in splits["val"]]
    if not train_set or not val_set:
        raise ConfigError("train and validation splits must both be non-empty")

    norm, out_scale, scales = fit_statistics(train_set, config.mode)
    if init is None:
        layout = gnn.y_layout(train_set[0].net)
        _fill_y_norm(norm, train_set, layout)
        cfg = gnn.ModelConfig(d_h=config.d_h, d_k=config.d_k, layers=config.layers, mode=config.mode,
                              layout=layout, norm=norm, out_scale=out_scale)
        params = gnn.init_params(cfg, seed=config.seed)
    else:
        params = init.copy()
        if params.config.mode != config.mode:
            raise ConfigError(f"checkpoint mode {params.config.mode!r} differs from config mode {config.mode!r}")

    report = TrainReport(n_params=params.count(), splits=splits)
    logger.info("training %d parameters on %d/%d samples", report.n_params, len(train_set), len(val_set))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "splits.json"), "w", encoding="utf-8") as fh:
            json.dump(splits, fh, indent=1)

    val_batches = [gnn.build_batch(c, params.config.layout) for c in _batches(val_set, range(len(val_set)), 256)]
    plist = params.values()
    opt = Adam(plist, config.lr)
    rng = np.random.default_rng(config.seed + 1)
    best = params.copy()
    since_best = 0

    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_set))
        acc, seen = {}, 0
        for chunk in _batches(train_set, order, config.batch_size):
            batch = gnn.build_batch(chunk, params.config.layout)
            with ad.Tape() as tape:
                total, terms = loss(batch, gnn.forward(batch, params), weights, scales)
                grads = tape.gradient(total, plist)
            if not math.isfinite(terms["total"]) or not all(np.all(np.isfinite(g)) for g in grads):
                report.diverged = True
                break
            grads, _ = clip_gradients(grads, config.clip)
            opt.step(grads)
            for k, v in terms.items():
                acc[k] = acc.get(k, 0.0) + v * batch.n_graphs
            seen += batch.n_graphs
        if report.diverged:
            logger.warning("non-finite loss in epoch %d; keeping the best finite state", epoch)
            break
        val = evaluate_loss(params, val_batches, weights, scales)
        if not math.isfinite(val["total"]):
            report.diverged = True
            break
        report.epochs.append({"epoch": epoch, "train": {k: v / seen for k, v in acc.items()}, "val": val})
        report.epoch_seconds.append(time.perf_counter() - t0)
        if val["total"] < report.best_val:
            report.best_val, report.best_epoch = val["total"], epoch
            best = params.copy()
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                report.stopped_early = True
                break
        logger.debug("epoch %d train %.4g val %.4g", epoch, report.epochs[-1]["train"].get("total", math.nan),
                     val["total"])
    if out_dir:
        gnn.save_checkpoint(best, os.path.join(out_dir, "model.json"))
        with open(os.path.join(out_dir, "train_report.json"), "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=1)
    return best, report


# ---------------------------------------------------------------------------
# evaluation


DECILES = tuple(round(0.1 * k, 1) for k in range(1, 11))


def ecdf(values) -> tuple:
    """Sorted values and cumulative proportions (nondecreasing, ending at 1)."""
    x = np.sort(np.abs(np.asarray(values, dtype=float)))
    return x, np.arange(1, len(x) + 1) / max(len(x), 1)


def deciles(values) -> list:
    x = np.abs(np.asarray(values, dtype=float))
    return np.quantile(x, DECILES).tolist() if x.size else [0.0] * len(DECILES)


@dataclass
class MetricsReport:
    """Accuracy, physics and timing metrics of a predictor on labelled samples.

    Definitions: ``mse["voltage"]`` pools squared errors of v and theta over buses;
    ``mse["bus_power"]`` pools p and q errors after aggregating generator values
    to their buses; ``mse["branch"]`` covers from-end |S|. Feasibility is the mean
    per-bus norm of the (P, Q) mismatch, averaged over samples.
    """

    n_samples: int
    mse: dict
    mse_quantity: dict
    feasibility: float
    warm_start_feasibility: float
    violation: dict
    cost_gap: float
    power_errors: np.ndarray
    angle_errors: np.ndarray
    timing: dict

    @property
    def mse_mean(self) -> float:
        return float(np.mean([self.mse["voltage"], self.mse["bus_power"], self.mse["branch"]]))

    def to_dict(self) -> dict:
        return {"n_samples": self.n_samples, "mse": self.mse, "mse_mean": self.mse_mean,
                "mse_quantity": self.mse_quantity, "feasibility_distance": self.feasibility,
                "warm_start_feasibility_distance": self.warm_start_feasibility, "violation": self.violation,
                "cost_gap": self.cost_gap, "power_error_deciles": deciles(self.power_errors),
                "angle_error_deciles": deciles(self.angle_errors), "timing": self.timing,
                "definitions": MetricsReport.__doc__.split("\n\n", 1)[1].strip()}

    def write(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
        with open(os.path.join(out_dir, "mse.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "mse"])
            for k, v in {**self.mse, **{f"quantity:{k}": v for k, v in self.mse_quantity.items()}}.items():
                w.writerow([k, repr(v)])
        for name, errs in (("ecdf_power.csv", self.power_errors), ("ecdf_angle.csv", self.angle_errors)):
            x, p = ecdf(errs)
            with open(os.path.join(out_dir, name), "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["abs_error", "proportion"])
                w.writerows(zip(x.tolist(), p.tolist()))
        with open(os.path.join(out_dir, "timing.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "seconds_total", "seconds_per_sample"])
            for k, v in self.timing.items():
                w.writerow([k, repr(v), repr(v / max(self.n_samples, 1))])


Predictor = Union[gnn.ModelParams, Callable[[list], list]]


def evaluate(model: Predictor, samples: list) -> MetricsReport:
    """Compare predictions against labels. ``model`` is ModelParams or ``samples -> [OperatingPoint]``."""
    if not samples or any(s.label is None for s in samples):
        raise ConfigError("evaluate needs a non-empty labelled dataset")
    t0 = time.perf_counter()
    preds = gnn.predict(model, samples) if isinstance(model, gnn.ModelParams) else list(model(samples))
    t_model = time.perf_counter() - t0

    sq = {q: [] for q in ("v", "theta", "p_bus", "q_bus", "s", "p_g", "q_g")}
    power, angle, feas, feas0 = [], [], [], []
    viol = {"v": 0.0, "q": 0.0, "s": 0.0}
    gaps = []
    for s, pt in zip(samples, preds):
        lab, net = s.label, s.net
        sq["v"].append((pt.v - lab.v) ** 2)
        sq["theta"].append((pt.theta - lab.theta) ** 2)
        dp = gen_to_bus(net, pt.p_g - lab.p_g)
        dq = gen_to_bus(net, pt.q_g - lab.q_g)
        sq["p_bus"].append(dp ** 2)
        sq["q_bus"].append(dq ** 2)
        sq["p_g"].append((pt.p_g - lab.p_g) ** 2)
        sq["q_g"].append((pt.q_g - lab.q_g) ** 2)
        sq["s"].append((pt.s_branch - lab.s_branch) ** 2)
        has_gen = np.zeros(net.n_bus, dtype=bool)
        has_gen[net.gen_bus] = True
        power.extend([np.abs(dp[has_gen]), np.abs(dq[has_gen])])
        # the reference angle is zero by construction; counting it would pad the ECDF
        angle.append(np.abs(np.delete(pt.theta - lab.theta, net.slack)))
        feas.append(feasibility_distance(net, pt))
        feas0.append(feasibility_distance(net, s.x0))
        rep = violations(net, pt, ref_cost=net.generation_cost(lab.p_g))
        viol["v"] += float(rep.v_viol.sum())
        viol["q"] += float(rep.q_viol.sum())
        viol["s"] += float(rep.s_viol.sum())
        gaps.append(rep.cost_gap)
    cat = {k: np.concatenate(v) for k, v in sq.items()}
    mse = {"voltage": float(np.mean(np.concatenate([cat["v"], cat["theta"]]))),
           "bus_power": float(np.mean(np.concatenate([cat["p_bus"], cat["q_bus"]]))),
           "branch": float(np.mean(cat["s"])) if cat["s"].size else 0.0}
    mse_q = {k: float(np.mean(cat[k])) if cat[k].size else 0.0 for k in ("v", "theta", "p_g", "q_g", "s")}
    n = len(samples)
    return MetricsReport(
        n_samples=n, mse=mse, mse_quantity=mse_q, feasibility=float(np.mean(feas)),
        warm_start_feasibility=float(np.mean(feas0)), violation={k: v / n for k, v in viol.items()},
        cost_gap=float(np.mean(gaps)), power_errors=np.concatenate(power), angle_errors=np.concatenate(angle),
        timing={"model": t_model},
    )
