"""Command-line entry point: ``python -m fmmlu {bvp,sweep,rcs,tree-stats}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import driver
from .octree import build_tree, enforce_level_restriction

# flag destination -> default; the config file may set any of these
DEFAULTS = {
    "geometry": "torus", "patches": [10, 6], "order": 4, "wavenumber": 0.97,
    "tol": 1e-6, "quad_tol": None, "occupancy": 40, "proxy_rho": 1.5,
    "near_eta": 1.25, "ppw_mode": False, "angles": 16, "seed": 0, "out": None,
    "refine_depth": 4, "steps": 4, "rows": None,
}


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of flag values; flags override it")
    common.add_argument("--geometry", choices=["torus", "sphere", "plate"])
    common.add_argument("--patches", type=int, nargs="+", metavar="N",
                        help="NU NV for the torus, per-face count for sphere/plate")
    common.add_argument("--order", type=int, help="nodes per patch direction p")
    common.add_argument("--wavenumber", type=float)
    common.add_argument("--tol", type=float, help="factorization tolerance")
    common.add_argument("--quad-tol", type=float, help="near quadrature tolerance")
    common.add_argument("--occupancy", type=int, help="max points per leaf box")
    common.add_argument("--proxy-rho", type=float)
    common.add_argument("--near-eta", type=float)
    common.add_argument("--ppw-mode", action="store_true", default=None)
    common.add_argument("--angles", type=int, help="number of azimuthal angles")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output CSV; a .json sidecar is written beside it")
    common.add_argument("--refine-depth", type=int, help="plate grading depth")
    common.add_argument("--steps", type=int, help="sweep rows (patch doublings)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fmmlu", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("bvp", parents=[common], help="one solve plus point-source validation")
    sub.add_parser("sweep", parents=[common], help="benchmark table over refinements")
    sub.add_parser("rcs", parents=[common], help="monostatic cross-section scan")
    sub.add_parser("tree-stats", parents=[common], help="octree statistics as JSON")
    return p


def resolve(args) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(DEFAULTS)
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
        unknown = set(k.replace("-", "_") for k in data) - set(cfg)
        if unknown:
            raise SystemExit(f"unknown config keys: {sorted(unknown)}")
        cfg.update({k.replace("-", "_"): v for k, v in data.items()})
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _options(cfg):
    return driver.SolverOptions(s=cfg["occupancy"], rho=cfg["proxy_rho"],
                                eta=cfg["near_eta"], eps_q=cfg["quad_tol"])


def _disc(cfg):
    return driver.make_geometry(cfg["geometry"], cfg["patches"], cfg["order"],
                                refine_depth=cfg["refine_depth"])


def _sidecar(out, payload):
    text = json.dumps(payload, indent=2, default=_jsonable)
    if out:
        with open(out.rsplit(".", 1)[0] + ".json", "w") as fh:
            fh.write(text)
    return text


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def cmd_bvp(cfg):
    disc = _disc(cfg)
    rep = driver.validate_point_sources(disc, cfg["wavenumber"], cfg["tol"],
                                        seed=cfg["seed"], options=_options(cfg))
    if cfg["out"]:
        driver.write_table(cfg["out"], [rep.row])
    _sidecar(cfg["out"], {"config": cfg, "row": rep.row, "stats": rep.stats})
    print(",".join(driver.TABLE_HEADER))
    print(",".join(str(rep.row[k]) for k in driver.TABLE_HEADER))


def cmd_sweep(cfg):
    if cfg["geometry"] != "torus":
        raise SystemExit("sweep runs on the torus only")
    rows = cfg["rows"] or driver.default_sweep_rows(
        tuple(cfg["patches"]), cfg["steps"], cfg["order"], cfg["tol"],
        cfg["wavenumber"])
    table, exps = driver.benchmark_sweep(rows, ppw_mode=cfg["ppw_mode"],
                                         k0=cfg["wavenumber"], seed=cfg["seed"],
                                         options=_options(cfg), out=cfg["out"],
                                         isolate=True)
    _sidecar(cfg["out"], {"config": cfg, "rows": table, "exponents": exps})
    print(",".join(driver.TABLE_HEADER))
    for r in table:
        print(",".join(str(r.get(k, "")) for k in driver.TABLE_HEADER))
    print("exponents", json.dumps(exps))


def cmd_rcs(cfg):
    disc = _disc(cfg)
    m = cfg["angles"]
    angles = 2 * np.pi * np.arange(m) / m
    angles, R, solver = driver.monostatic_rcs(disc, cfg["wavenumber"], angles,
                                              cfg["tol"], _options(cfg))
    if cfg["out"]:
        driver.write_rcs_csv(cfg["out"], angles, R)
    _sidecar(cfg["out"], {"config": cfg, "n": disc.n, "t_q": solver.t_q,
                          "t_f": solver.t_f, "t_s": solver.t_s,
                          "stats": solver.factorization.stats})
    print("phi,re_R,im_R,abs_R")
    for a, r in zip(angles, R):
        print(f"{a:.6f},{r.real:.10e},{r.imag:.10e},{abs(r):.10e}")


def cmd_tree_stats(cfg):
    disc = _disc(cfg)
    tree = enforce_level_restriction(build_tree(disc.nodes, cfg["occupancy"]))
    text = _sidecar(cfg["out"], {"n": disc.n, "tree": tree.stats()})
    print(text)


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    cfg = resolve(args)
    {"bvp": cmd_bvp, "sweep": cmd_sweep, "rcs": cmd_rcs,
     "tree-stats": cmd_tree_stats}[args.command](cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
