"""Command line entry point: ``mgrf {simulate,fit,compare,mesh,prior-check}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .errors import MgrfError
from .io import (application_data, ingest_csv, load_config, model_config_from, rescale_domain,
                 run_application, standardize, summary_row)
from .mesh import build_mesh, write_mesh_csv
from .mgrf_prior import Reformulation
from .pc_prior import PcRhoPrior
from .sampler import ModelKind, run_chain, write_trace_csv

log = logging.getLogger("mgrf")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--reformulation", choices=["I", "II"])
    p.add_argument("--pc-U", dest="pc_U", type=float)
    p.add_argument("--pc-a", dest="pc_a", type=float)
    p.add_argument("--pc-w", dest="pc_w", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--burnin", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mgrf", description="Spatial regression with MGRF priors")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a simulation preset")
    _common(p)
    p.add_argument("--preset", choices=harness.PRESETS)
    p.add_argument("--replicates", type=int)

    p = sub.add_parser("fit", help="fit one model to a station CSV")
    _common(p)
    p.add_argument("--data", help="station CSV (overrides data.path)")
    p.add_argument("--model", default="mgrf", choices=[k.value for k in ModelKind])

    p = sub.add_parser("compare", help="five-model comparison table for a station CSV")
    _common(p)
    p.add_argument("--data", help="station CSV (overrides data.path)")

    p = sub.add_parser("mesh", help="export a structured mesh")
    _common(p)
    p.add_argument("--nodes", type=int)
    p.add_argument("--extension", type=float)

    p = sub.add_parser("prior-check", help="PC prior calibration and density dump")
    _common(p)
    p.add_argument("--grid", type=int, default=401)
    return ap


def _overrides(args) -> dict:
    o: dict = {"sampler": {}, "priors": {}}
    for key in ("seed", "threads"):
        if getattr(args, key) is not None:
            o[key] = getattr(args, key)
    if args.out_dir is not None:
        o["out_dir"] = args.out_dir
    for flag, key in (("iters", "iterations"), ("burnin", "burn_in"), ("thin", "thinning"),
                      ("reformulation", "reformulation")):
        if getattr(args, flag) is not None:
            o["sampler"][key] = getattr(args, flag)
    for key in ("pc_U", "pc_a", "pc_w"):
        if getattr(args, key) is not None:
            o["priors"][key] = getattr(args, key)
    return o


def _dataset(cfg: dict, path_arg):
    path = path_arg or cfg["data"].get("path")
    if not path:
        raise MgrfError("no data file given (use --data or data.path)")
    ds = ingest_csv(path, cfg["data"]["columns"], cfg["data"].get("delimiter"))
    log.info("read %d rows, dropped %d", ds.n_read, ds.n_dropped)
    if cfg["data"].get("standardize", True):
        ds, _ = standardize(ds)
    ds, _ = rescale_domain(ds)
    return application_data(ds, cfg["mesh"]["target_nodes"], cfg["mesh"]["extension_fraction"])


def cmd_simulate(args, cfg, out: Path) -> int:
    name = args.preset or cfg["simulate"]["preset"]
    n = args.replicates or cfg["simulate"].get("n_replicates")
    scenarios = harness.preset(name, n)
    s = cfg["sampler"]
    over = dict(cfg["simulate"].get("overrides", {}))
    over.setdefault("seed", cfg["seed"])
    if args.iters is not None or args.burnin is not None or args.thin is not None:
        over.update(iterations=s["iterations"], burn_in=s["burn_in"], thinning=s["thinning"])
    if args.reformulation is not None:
        over["reformulation"] = Reformulation(args.reformulation)
    if args.pc_U is not None:
        over["pc_U"] = args.pc_U
    if args.pc_a is not None:
        over["pc_a"] = args.pc_a
    failed = 0
    summary = {}
    for i, sc in enumerate(scenarios):
        sc = sc.with_(**over)
        tag = f"scenario_{i:03d}"
        res = harness.run_study(sc, workers=cfg["threads"], cell_dir=out / tag / "cells")
        res.to_csv(out / tag / "results.csv")
        res.to_json(out / tag / "summary.json")
        failed += len(res.failures)
        summary[sc.name] = res.aggregates()
        print(f"{sc.name}: {len(res.cells)} cells ok, {len(res.failures)} failed")
    (out / "study.json").write_text(json.dumps(summary, indent=2))
    return 1 if failed else 0


def cmd_fit(args, cfg, out: Path) -> int:
    data = _dataset(cfg, args.data)
    mc = model_config_from(cfg, args.model)
    s = run_chain(mc, data)
    kind = ModelKind(args.model)
    write_trace_csv(s, out / f"trace_{kind.value}.csv")
    row = summary_row(kind, s, data.covariate_names)
    (out / f"fit_{kind.value}.json").write_text(json.dumps(
        {"summary": row, "acceptance": s.acceptance,
         "ess": {k: p.ess for k, p in s.params.items()}}, indent=2))
    for k, v in row.items():
        print(f"{k}: {v:.6g}" if isinstance(v, float) else f"{k}: {v}")
    return 0


def cmd_compare(args, cfg, out: Path) -> int:
    data = _dataset(cfg, args.data)
    table = run_application(data, model_config_from(cfg))
    table.to_csv(out / "comparison.csv")
    table.to_json(out / "comparison.json")
    print(table.to_text())
    return 0


def cmd_mesh(args, cfg, out: Path) -> int:
    nodes = args.nodes or cfg["mesh"]["target_nodes"]
    ext = args.extension if args.extension is not None else cfg["mesh"]["extension_fraction"]
    mesh = build_mesh(target_nodes=nodes, extension_fraction=ext)
    write_mesh_csv(mesh, out)
    print(f"{mesh.M} nodes, {mesh.n_triangles} triangles written to {out}")
    return 0


def cmd_prior_check(args, cfg, out: Path) -> int:
    pr = cfg["priors"]
    prior = PcRhoPrior.calibrated(pr["pc_U"], pr["pc_a"], pr["pc_w"])
    grid = np.linspace(prior.lower, 1.0, args.grid + 2)[1:-1]
    dens = prior.pdf(grid)
    with (out / "pc_density.csv").open("w") as fh:
        fh.write("rho,density\n")
        for r, d in zip(grid, dens):
            fh.write(f"{r!r},{d!r}\n")
    rng = np.random.default_rng(cfg["seed"])
    draws = prior.sample(rng, 100_000)
    doc = {"w": prior.w, "U": prior.U, "a": prior.a, "lambda": prior.lam,
           "tail_mass_quadrature": prior.tail_mass(prior.U),
           "tail_mass_monte_carlo": float(np.mean(np.abs(draws) > prior.U)),
           "total_mass": prior.total_mass()}
    (out / "pc_prior.json").write_text(json.dumps(doc, indent=2))
    for k, v in doc.items():
        print(f"{k}: {v:.6g}" if isinstance(v, float) else f"{k}: {v}")
    return 0


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "compare": cmd_compare, "mesh": cmd_mesh,
            "prior-check": cmd_prior_check}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        out = Path(cfg["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg, out)
    except MgrfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
