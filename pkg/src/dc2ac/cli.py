"""Command-line entry point: ``dc2ac <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import datagen, gnn, training
from .acphysics import OperatingPoint, feasibility_distance, pf_residual, violations
from .dcopf import DcStatus, kkt_residuals, solve_network
from .network import ContingencyRejected, remove_element, serialize_case


def _emit(doc: dict, out: str | None = None) -> None:
    text = json.dumps(doc, indent=1)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def cmd_solve_dc(args) -> int:
    net = datagen.load_base(args.case)
    sol = solve_network(net)
    doc = sol.to_dict()
    if sol.status is DcStatus.OPTIMAL:
        doc["kkt"] = kkt_residuals(net, sol)
    _emit(doc, args.out)
    return 0 if sol.status is DcStatus.OPTIMAL else 2


def cmd_check(args) -> int:
    net = datagen.load_base(args.case)
    with open(args.point, encoding="utf-8") as fh:
        doc = json.load(fh)
    pt = OperatingPoint.from_dict(doc.get("labels_ac", doc), net)
    res = pf_residual(net, pt)
    rep = violations(net, pt)
    _emit({"pf_residual": {"max_abs": res.max_abs, "r_p": res.r_p.tolist(), "r_q": res.r_q.tolist()},
           "violations": rep.summary(), "feasibility_distance": feasibility_distance(net, pt)})
    return 0


def _train_config(path: str | None, mode: str | None) -> tuple:
    doc = {}
    if path:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh) if path.endswith(".toml") else json.load(fh)
    weights = training.LossWeights(**doc.pop("weights", {}))
    if mode:
        doc["mode"] = mode
    return training.TrainConfig.from_dict(doc), weights


def cmd_train(args) -> int:
    cfg, weights = _train_config(args.config, args.mode)
    samples = datagen.load_samples(args.data)
    init = gnn.load_checkpoint(args.init) if args.init else None
    out_dir = os.path.dirname(os.path.abspath(args.out))
    params, report = training.train(samples, cfg, weights, init=init)
    gnn.save_checkpoint(params, args.out)
    stem = os.path.splitext(args.out)[0]
    with open(stem + ".report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1)
    with open(stem + ".splits.json", "w", encoding="utf-8") as fh:
        json.dump(report.splits, fh, indent=1)
    print(f"best epoch {report.best_epoch}, val loss {report.best_val:.6g}, {report.n_params} parameters; "
          f"checkpoint written to {os.path.relpath(args.out, out_dir)}")
    return 0


def cmd_eval(args) -> int:
    params = gnn.load_checkpoint(args.ckpt)
    samples = datagen.load_samples(args.data)
    report = training.evaluate(params, samples)
    if args.report.endswith(".json"):
        _emit(report.to_dict(), args.report)
    else:
        report.write(args.report)
    print(json.dumps({"mse": report.mse, "feasibility_distance": report.feasibility}))
    return 0


def _parse_range(text: str) -> tuple:
    try:
        lo, hi = (float(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"range must look like 0.8:1.2, got {text!r}") from None
    return lo, hi


def cmd_gen_data(args) -> int:
    base = datagen.load_base(args.base)
    lo, hi = args.range
    spec = datagen.PerturbSpec(lo=lo, hi=hi, per_load=not args.global_scale, count=args.count, seed=args.seed)
    if args.labels == "model":
        if not args.ckpt:
            print("--labels model needs --ckpt", file=sys.stderr)
            return 2
        samples = datagen.model_dataset(gnn.load_checkpoint(args.ckpt), base, spec)
    else:
        samples = datagen.newton_dataset(base, spec)
    manifest = datagen.write_dataset(samples, args.out, spec, base=args.base)
    print(f"wrote {manifest['count']} scenarios to {args.out}")
    return 0


def cmd_contingency(args) -> int:
    net = datagen.load_base(args.case)
    kind = "branch" if args.kind == "line" else "generator"
    ids = [br.id for br in net.branches] if kind == "branch" else [g.id for g in net.generators]
    os.makedirs(args.out, exist_ok=True)
    written = 0
    for eid in ids:
        if written >= args.limit:
            break
        try:
            var = remove_element(net, kind, eid)
        except ContingencyRejected as exc:
            print(f"skip: {exc}", file=sys.stderr)
            continue
        with open(os.path.join(args.out, f"n1_{args.kind}_{eid}.json"), "w", encoding="utf-8") as fh:
            fh.write(serialize_case(var, extra={"contingency": {"kind": kind, "id": eid}}))
        written += 1
    print(f"wrote {written} variants to {args.out}")
    return 0


def cmd_import_opfdata(args) -> int:
    from .opfdata import import_record

    os.makedirs(args.out, exist_ok=True)
    for path in args.records:
        with open(path, encoding="utf-8") as fh:
            net, labels = import_record(json.load(fh))
        name = os.path.splitext(os.path.basename(path))[0] + ".json"
        with open(os.path.join(args.out, name), "w", encoding="utf-8") as fh:
            fh.write(serialize_case(net, labels=labels))
    print(f"converted {len(args.records)} records into {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dc2ac", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve-dc", help="solve the DC-OPF of a case")
    s.add_argument("case", help="scenario JSON path or bundled case name")
    s.add_argument("--out")
    s.set_defaults(func=cmd_solve_dc)

    s = sub.add_parser("check", help="power-flow residuals and limit violations of a point")
    s.add_argument("case")
    s.add_argument("point", help="JSON with v, theta, p_g, q_g (or a scenario with labels_ac)")
    s.set_defaults(func=cmd_check)

    s = sub.add_parser("train", help="train the residual GNN")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="TOML or JSON with training options and optional [weights]")
    s.add_argument("--mode", choices=("residual", "direct"))
    s.add_argument("--init", help="checkpoint to fine-tune from")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a labelled dataset")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True, help="report.json path or a directory for JSON + CSVs")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gen-data", help="perturb a base case and label the scenarios")
    s.add_argument("--base", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--range", type=_parse_range, default=(0.8, 1.2))
    s.add_argument("--global-scale", action="store_true", help="one factor for all loads")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--labels", choices=("newton", "model"), default="newton")
    s.add_argument("--ckpt")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("contingency", help="write N-1 variants of a case")
    s.add_argument("case")
    s.add_argument("--kind", choices=("line", "generator"), default="line")
    s.add_argument("--limit", type=int, default=10)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_contingency)

    s = sub.add_parser("import-opfdata", help="convert OPFData JSON records into scenario files")
    s.add_argument("records", nargs="+")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_import_opfdata)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    np.seterr(all="ignore")
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
