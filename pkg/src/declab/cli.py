"""Experiment runner: ``declab <kind> [--spec file] [--set key=value ...]``.

Every run writes ``<kind>-<hash>.csv`` (rows carry the seed and spec hash)
and a JSON sidecar with the resolved spec, version and wall time. Exit codes:
2 for invalid specs, 3 for Nyquist refusals, 4 for exhausted retries.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import ensembles as ens
from . import expsum, freqsets, partitions, tubes
from .io import (atomic_write, freqset_to_dict, freqset_rows, plain,
                 rows_to_csv, spec_hash)
from .quadrature import (EvaluationDomain, NyquistError, SamplingPlan, check_nyquist,
                         derive_seed)

KINDS = ("gen", "norm", "decouple", "recouple", "partition", "tubes", "scan", "tight")
ENV_OUT = "DECLAB_OUT"

EXIT_INVALID, EXIT_NYQUIST, EXIT_RETRY = 2, 3, 4

_PLAN = {"method": "monte-carlo", "count": 100000, "spacing": None,
         "stratification": "auto", "strata": None}

DEFAULTS = {
    "gen": {"surface": "caps", "R": 16, "d": 3, "N": 1},
    "norm": {"set": {"surface": "caps", "R": 64, "d": 2, "N": 1}, "p": 4, "weights": "ones",
             "domain": {"kind": "ball", "size": None}, "plan": _PLAN},
    "decouple": {"shape": "strips", "R": 256, "p": 3, "variant": "l2", "field": "constant",
                 "M": 1, "domain": {"kind": "ball", "size": None}, "plan": _PLAN},
    "recouple": {"R": 256, "K": 4, "p": 4, "ball_radius": None, "field": "random-phase",
                 "plan": _PLAN},
    "partition": {"R": 4, "M": 2, "op": "count", "p": 2, "weights": "ones", "family": "all",
                  "draws": 1000},
    "tubes": {"R": 256, "delta": 0.0, "op": "norm", "r": 1.5, "M": None, "p": 3,
              "plan": _PLAN},
    "scan": {"shape": "caps", "R_list": [64, 128, 256], "p": 4, "d": 2, "exponent": 2.0,
             "surface": "circle", "seeds": 5, "r": 1.5, "delta": 0.0,
             "p_list": [2.0, 2.5, 3.0, 3.5, 4.0], "plan": _PLAN},
    "tight": {"surface": "circle", "R": 64, "p": 8, "diameter": None, "measure": False,
              "plan": _PLAN},
}


class SpecError(ValueError):
    """Malformed or invalid experiment spec."""


@dataclass
class RunRecord:
    spec: dict
    spec_hash: str
    version: str
    wall_time: float
    rows: list[dict]
    seed: int
    summary: dict = field(default_factory=dict)
    payload: dict | None = None

    def csv_text(self) -> str:
        return rows_to_csv([{**r, "seed": self.seed, "spec_hash": self.spec_hash}
                            for r in self.rows])

    def sidecar(self) -> dict:
        return plain({"spec": self.spec, "spec_hash": self.spec_hash, "version": self.version,
                      "wall_time": self.wall_time, "seed": self.seed, "summary": self.summary,
                      "rows": self.rows, **({"payload": self.payload} if self.payload else {})})


# --- spec handling --------------------------------------------------------

def _merge(base: dict, over: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise SpecError(f"unknown parameter {path}{k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def _set_path(d: dict, key: str, value):
    parts = key.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
        if not isinstance(d, dict):
            raise SpecError(f"cannot set {key!r}")
    d[parts[-1]] = value


def parse_assignment(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise SpecError(f"--set expects key=value, got {text!r}")
    k, v = text.split("=", 1)
    try:
        return k.strip(), json.loads(v)
    except json.JSONDecodeError:
        return k.strip(), v


def resolve_spec(kind: str, raw: dict, seed: int | None = None) -> dict:
    """Apply defaults and validate the shape of a spec; returns {kind, seed, params}."""
    if kind not in KINDS:
        raise SpecError(f"unknown kind {kind!r}")
    raw = dict(raw)
    if raw.pop("kind", kind) != kind:
        raise SpecError("spec kind does not match the subcommand")
    s = raw.pop("seed", 0)
    params = raw.pop("params", {})
    params = {**params, **raw}
    if seed is not None:
        s = seed
    if not isinstance(s, int) or isinstance(s, bool) or not 0 <= s < 2**64:
        raise SpecError("seed must be an unsigned 64-bit integer")
    return {"kind": kind, "seed": s, "params": _merge(DEFAULTS[kind], params)}


def _num(x, name, lo=None, integer=False):
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise SpecError(f"{name} must be a number")
    if integer and int(x) != x:
        raise SpecError(f"{name} must be an integer")
    if not math.isfinite(x) or (lo is not None and x < lo):
        raise SpecError(f"{name} must be >= {lo}")
    return int(x) if integer else float(x)


def _plan(d: dict, seed: int) -> SamplingPlan:
    if d["method"] == "grid":
        return SamplingPlan.grid(_num(d["spacing"], "plan.spacing", 0))
    return SamplingPlan(count=_num(d["count"], "plan.count", 1, True), seed=seed,
                        stratification=d["stratification"], strata=d["strata"])


def _domain(d: dict, default_size: float) -> EvaluationDomain:
    size = default_size if d.get("size") is None else _num(d["size"], "domain.size", 0)
    if d["kind"] == "torus":
        return EvaluationDomain.torus(size if d.get("size") is not None else 1.0)
    return EvaluationDomain(d["kind"], size)


def _freqset(d: dict) -> freqsets.FrequencySet:
    surf = d["surface"]
    if surf == "caps":
        return freqsets.lift_paraboloid(freqsets.canonical_caps(_num(d["R"], "R", 4), int(d["d"])))
    if surf == "sphere":
        return freqsets.lattice_sphere(_num(d["N"], "N", 1, True), int(d["d"]))
    if surf == "annulus":
        return freqsets.lattice_annulus(_num(d["R"], "R", 1))
    if surf == "moment":
        return freqsets.moment_curve_points(_num(d["R"], "R", 1), int(d["d"]))
    raise SpecError(f"unknown surface {surf!r}")


def _weights(spec, n: int, seed: int):
    if isinstance(spec, list):
        if len(spec) != n:
            raise SpecError(f"{len(spec)} weights for {n} points")
        return np.array([complex(*w) if isinstance(w, list) else complex(w) for w in spec])
    if spec == "ones":
        return np.ones(n, dtype=np.complex128)
    if spec in ("random-phase", "unimodular"):
        return np.exp(2j * np.pi * np.random.default_rng(derive_seed(seed, 1)).random(n))
    if spec == "gaussian-int":
        rng = np.random.default_rng(derive_seed(seed, 1))
        return rng.integers(-3, 4, n) + 1j * rng.integers(-3, 4, n)
    if spec == "signs":
        return np.random.default_rng(derive_seed(seed, 1)).choice([-1.0, 1.0], n).astype(complex)
    raise SpecError(f"unknown weights {spec!r}")


def _field(name, grid, seed) -> ens.TestField:
    if name == "constant":
        return ens.TestField.constant(grid)
    if name == "random-phase":
        return ens.TestField.random_phase(grid, seed)
    raise SpecError(f"unknown field {name!r}")


# --- kinds ----------------------------------------------------------------
# each prepare_* validates and returns a thunk producing (rows, summary, payload)

def prepare_gen(P, seed, threads):
    if P["surface"] not in ("caps", "sphere", "annulus", "moment"):
        raise SpecError(f"unknown surface {P['surface']!r}")
    fs = _freqset(P)

    def go():
        return freqset_rows(fs), {"count": len(fs), "label": fs.label}, freqset_to_dict(fs)
    return go


def prepare_norm(P, seed, threads):
    fs = _freqset(P["set"])
    p = _num(P["p"], "p", 1)
    w = _weights(P["weights"], len(fs), seed)
    R = P["set"].get("R") or 1.0
    dom = _domain(P["domain"], R)
    plan = _plan(P["plan"], seed)
    check_nyquist(dom, plan, fs.max_norm(), p)

    def go():
        est = expsum.lp_mean(fs, w, dom, plan, p, threads)
        l2 = float((np.abs(w) ** 2).sum())
        row = est.to_row(N=len(fs), domain=dom.kind, size=dom.radius_or_side)
        row.update(ratio=est.mean_power / l2 ** (p / 2), ratio_std_error=est.std_error / l2 ** (p / 2))
        return [row], {}, None
    return go


def _ensemble(shape, grid, M, seed):
    if shape == "strips":
        return ens.build_strips(grid)
    if shape == "circles":
        return ens.build_circles(grid)
    if shape == "spread":
        return ens.build_spread(grid, seed)
    if shape == "msets":
        return ens.build_random_msets(grid, int(M), seed)
    raise SpecError(f"unknown shape {shape!r}")


def prepare_decouple(P, seed, threads):
    R = _num(P["R"], "R", 4)
    p = _num(P["p"], "p", 1)
    if P["variant"] not in ("l2", "lp"):
        raise SpecError("variant must be l2 or lp")
    grid = freqsets.canonical_caps(R, 3)
    ep = _ensemble(P["shape"], grid, P["M"], seed)
    fld = _field(P["field"], grid, seed)
    dom = _domain(P["domain"], R)
    plan = _plan(P["plan"], seed)

    def go():
        r = ens.decoupling_ratio(ep, fld, p, P["variant"], dom, plan, threads)
        return [r.to_row()], {"geometry_constant": ens.check_geometry_condition(ep)}, None
    return go


def prepare_recouple(P, seed, threads):
    R = _num(P["R"], "R", 4)
    grid = freqsets.canonical_caps(R, 3)
    K = _num(P["K"], "K", 1, True)
    p = _num(P["p"], "p", 2)
    rad = R if P["ball_radius"] is None else _num(P["ball_radius"], "ball_radius", K)
    fld = _field(P["field"], grid, seed)
    plan = _plan(P["plan"], seed)
    if K > math.sqrt(R) + 1e-9:
        raise SpecError("K must not exceed sqrt(R)")

    def go():
        return [ens.recoupling_ratio(grid, K, fld, p, rad, plan, threads=threads).to_row()], {}, None
    return go


def prepare_partition(P, seed, threads):
    R = _num(P["R"], "R", 1, True)
    M = _num(P["M"], "M", 1, True)
    if R % M:
        raise SpecError(f"M={M} must divide R={R}")
    op = P["op"]
    if op in ("count", "cohabiting"):
        def go():
            fn = partitions.count_partitions if op == "count" else partitions.count_cohabiting
            return [{"R": R, "M": M, "op": op, "value": fn(R, M)}], {}, None
        return go
    if op == "enumerate":
        def go():
            return [{"R": R, "M": M, "index": i, "partition": str(q)}
                    for i, q in enumerate(partitions.enumerate_partitions(R, M))], {}, None
        return go
    if op not in ("moment", "l2", "l4", "elp"):
        raise SpecError(f"unknown partition op {op!r}")
    w = _weights(P["weights"], R, seed)
    if P["weights"] in ("ones", "gaussian-int", "signs") and not isinstance(P["weights"], list):
        a = [(int(z.real), int(z.imag)) for z in w]
    else:
        a = list(w)
    p = _num(P["p"], "p", 1)
    fam = P["family"]
    if fam == "sampled":
        family = partitions.Sampled(seed, _num(P["draws"], "draws", 2, True))
    elif fam == "transversal":
        family = partitions.TransversalSpec.blocks(R, M)
    elif fam == "all":
        family = "all"
    else:
        raise SpecError(f"unknown family {fam!r}")

    def go():
        if op == "l2":
            ok, lhs, rhs = partitions.l2_identity_check(a, M)
            return [{"R": R, "M": M, "op": op, "equal": ok, "lhs": lhs, "rhs": rhs}], {}, None
        if op == "moment":
            rep = partitions.avg_partition_moment(a, M, p, family)
        elif op == "l4":
            rep = partitions.l4_bound_check(a, M, family)
        else:
            rep = partitions.elp_bound_check(a, M, p, family)
        return [rep.to_row()], {}, None
    return go


def prepare_tubes(P, seed, threads):
    R = _num(P["R"], "R", 4)
    delta = _num(P["delta"], "delta", 0)
    fam = tubes.make_bush(freqsets.canonical_caps(R, 3), delta)
    plan = _plan(P["plan"], seed)
    op = P["op"]
    if op not in ("norm", "profile", "mass"):
        raise SpecError(f"unknown tubes op {op!r}")

    def go():
        base = {"R": R, "delta": delta, "tubes": len(fam)}
        if op == "mass":
            return [{**base, "closed_form_mass": fam.total_mass()}], {}, None
        if op == "norm":
            r = _num(P["r"], "r", 1)
            e = tubes.tube_lr_norm(fam, r, plan, threads)
            return [{**base, **e.to_row(), "norm": e.norm(),
                     "norm_std_error": e.norm_std_error()}], {}, None
        M = math.sqrt(R) if P["M"] is None else _num(P["M"], "M", 1)
        pr = tubes.trelation_rhs_profile(fam, M, _num(P["p"], "p", 2), plan, threads)
        row = {**base, **{k: getattr(pr, k) for k in ("M", "p", "int_L_half", "int_L_half_se",
                                                      "weighted_int_L", "weighted_int_L_se",
                                                      "predicted")}}
        row.update(measured=pr.measured, ratio=pr.ratio)
        return [row], {}, None
    return go


def prepare_tight(P, seed, threads):
    R = _num(P["R"], "R", 2)
    p = _num(P["p"], "p", 2)
    d = freqsets.surface_dim(P["surface"])
    diam = R ** (-1 - d / p) if P["diameter"] is None else _num(P["diameter"], "diameter", 0)
    cells = freqsets.equal_measure_partition(P["surface"], diam)
    plan = _plan(P["plan"], seed)

    def go():
        fs = freqsets.tight_random_select(cells, R, p, derive_seed(seed, 0))
        row = {k: fs.meta[k] for k in ("R", "p", "delta", "cells", "kept", "attempts")}
        row["surface"] = P["surface"]
        if P["measure"]:
            r = expsum.sqrt_cancel_ratio(fs, None, EvaluationDomain.ball(R), plan, p, threads)
            row.update(ratio=r.value, ratio_std_error=r.std_error)
        return [row], {}, freqset_to_dict(fs)
    return go


def tight_median_ratio(surface: str, R: float, p: float, seed: int, seeds: int, plan: SamplingPlan,
                       threads: int = 1, diameter: float | None = None):
    """Median over ``seeds`` independent selections of the square-root-cancellation ratio."""
    d = freqsets.surface_dim(surface)
    cells = freqsets.equal_measure_partition(surface, diameter or R ** (-1 - d / p))
    vals = []
    for k in range(seeds):
        fs = freqsets.tight_random_select(cells, R, p, derive_seed(seed, int(R), k))
        pl = SamplingPlan(count=plan.count, seed=derive_seed(seed, int(R), k, 1),
                          stratification=plan.stratification, strata=plan.strata)
        vals.append(expsum.sqrt_cancel_ratio(fs, None, EvaluationDomain.ball(R), pl, p,
                                             threads).value)
    return float(np.median(vals)), vals


def prepare_scan(P, seed, threads):
    R_list = P["R_list"]
    if not isinstance(R_list, list) or len(R_list) < 3:
        raise SpecError("R_list needs at least 3 values")
    R_list = [_num(R, "R", 1) for R in R_list]
    if any(b <= a for a, b in zip(R_list, R_list[1:])):
        raise SpecError("R_list must be strictly increasing")
    shape = P["shape"]
    if shape not in ("synthetic", "caps", "tight", "bush", "strip"):
        raise SpecError(f"unknown scan shape {shape!r}")
    p = _num(P["p"], "p", 1)
    plan = _plan(P["plan"], seed) if shape in ("caps", "tight", "bush") else None

    def go():
        if shape == "strip":
            s = ens.strip_sharpness_scan(R_list, [float(x) for x in P["p_list"]],
                                         _num(P["delta"], "delta", 0))
            rows = [{"row": "point", **r} for r in s.rows]
            rows += [{"row": "exponents", **t} for t in s.table]
            summ = {"lhs_slope": s.lhs_fit.slope, "mass_slope": s.mass_fit.slope,
                    "count_slope": s.count_fit.slope, "p_star": s.p_star}
            rows.append({"row": "fit", **summ})
            return rows, summ, None
        vals, errs = [], []
        for R in R_list:
            if shape == "synthetic":
                v, e = R ** _num(P["exponent"], "exponent"), 0.0
            elif shape == "caps":
                fs = freqsets.lift_paraboloid(freqsets.canonical_caps(R, int(P["d"])))
                r = expsum.sqrt_cancel_ratio(fs, None, EvaluationDomain.ball(R), plan, p, threads)
                v, e = r.value, r.std_error
            elif shape == "tight":
                v, _ = tight_median_ratio(P["surface"], R, p, seed, int(P["seeds"]), plan, threads)
                e = 0.0
            else:
                fam = tubes.make_bush(freqsets.canonical_caps(R, 3), _num(P["delta"], "delta", 0))
                est = tubes.tube_lr_norm(fam, _num(P["r"], "r", 1), plan, threads)
                v, e = est.norm(), est.norm_std_error()
            vals.append(v)
            errs.append(e)
        fit = expsum.fit_exponent(R_list, vals, errs)
        rows = [{"row": "point", **r} for r in fit.to_rows(shape=shape, p=p)]
        rows.append({"row": "fit", "shape": shape, "p": p, **fit.summary()})
        return rows, fit.summary(), None
    return go


PREPARE = {"gen": prepare_gen, "norm": prepare_norm, "decouple": prepare_decouple,
           "recouple": prepare_recouple, "partition": prepare_partition, "tubes": prepare_tubes,
           "scan": prepare_scan, "tight": prepare_tight}


def run(spec: dict, threads: int = 1) -> RunRecord:
    """Execute a resolved spec (see ``resolve_spec``)."""
    P, seed = spec["params"], spec["seed"]
    try:
        thunk = PREPARE[spec["kind"]](P, seed, threads)
    except (NyquistError, SpecError):
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise SpecError(str(exc)) from exc
    t0 = time.perf_counter()
    rows, summary, payload = thunk()
    return RunRecord(spec, spec_hash(spec), __version__, time.perf_counter() - t0,
                     [plain(r) for r in rows], seed, plain(summary), payload)


def write_record(rec: RunRecord, out_dir, fmt: str = "csv") -> list[Path]:
    out = Path(out_dir)
    stem = f"{rec.spec['kind']}-{rec.spec_hash[:12]}"
    side = json.dumps(rec.sidecar(), indent=1, sort_keys=True)
    paths = []
    if fmt == "csv":
        atomic_write(out / f"{stem}.csv", rec.csv_text())
        paths.append(out / f"{stem}.csv")
    atomic_write(out / f"{stem}.json", side + "\n")
    paths.append(out / f"{stem}.json")
    return paths


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="declab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="kind", required=True)
    for k in KINDS:
        sp = sub.add_parser(k, help=f"run a {k} experiment")
        sp.add_argument("--spec", help="JSON experiment spec")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a parameter (dotted keys, JSON values)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help=f"output directory (default ${ENV_OUT} or ./results)")
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--format", choices=("csv", "json"), default="csv")
        sp.add_argument("-q", "--quiet", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = {}
        if args.spec:
            with open(args.spec) as fh:
                raw = json.load(fh)
            if not isinstance(raw, dict):
                raise SpecError("spec file must hold a JSON object")
        for item in args.set:
            k, v = parse_assignment(item)
            _set_path(raw, k, v)
        if args.threads < 1:
            raise SpecError("--threads must be >= 1")
        spec = resolve_spec(args.kind, raw, args.seed)
        rec = run(spec, args.threads)
    except NyquistError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NYQUIST
    except freqsets.RetryExhausted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RETRY
    except (ValueError, TypeError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = args.out or os.environ.get(ENV_OUT) or "results"
    paths = write_record(rec, out, args.format)
    if not args.quiet:
        if args.format == "csv":
            sys.stdout.write(rec.csv_text())
        for p in paths:
            print(f"wrote {p}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
