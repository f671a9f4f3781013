"""lgf-lab: seeded experiment runner.

Every data file starts with '#' header lines echoing the full config, the
derived parameters and a content hash of the config, so a run can be
reproduced from any of its outputs. Wall-clock timestamps go to a separate
``<command>.meta.json`` sidecar; everything else is a pure function of
(config, seed).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np

from .errors import LgfLabError
from .params import Params

COMMANDS = ("sphavg", "specdim", "gmc", "lbm", "mixing", "cone")

# knob -> (type, default); list-valued knobs are comma separated floats
_COMMON = {"d": (int, 4), "gamma": (float, 1.0), "beta": (float, 0.0)}
KNOBS: dict[str, dict[str, tuple[type | str, object]]] = {
    "sphavg": {"t_end": (float, 2.0), "dt": (float, 0.01), "n_reps": (int, 1000), "method": (str, "both"),
               "cutoff": (float, 15.0)},
    "specdim": {"chi_list": ("floats", "-0.5,0,0.5,1,1.5,2"), "t_list": ("floats", "0.002,0.004,0.008,0.016"),
                "n_reps": (int, 200), "n_fields": (int, 2), "n_steps": (int, 64), "lattice_n": (int, 0),
                "L": (float, 4.0)},
    "gmc": {"lattice_n": (int, 64), "L": (float, 4.0), "n_reps": (int, 8), "q": (float, 1.0),
            "radii": ("floats", "0.25,0.5,1"), "statistic": (str, "mean"), "eps_ratio": (float, 2.0)},
    "lbm": {"lattice_n": (int, 32), "L": (float, 4.0), "t_end": (float, 0.05), "n_steps": (int, 500),
            "n_out": (int, 50), "epsilon": (float, 0.0)},
    "mixing": {"radius": (float, 1.0), "t_list": ("floats", "0.5,1,2,5,10,20"), "n_pairs": (int, 100)},
    "cone": {"b": (float, 20.0), "window": ("floats", "-2,2"), "dt": (float, 0.01), "n_reps": (int, 1000),
             "b_list": ("floats", ""), "probes": ("floats", "-2,-1,1,2")},
}

_COMMAND_DEFAULTS = {"gmc": {"d": 3}}


def _conv(kind, raw: str):
    if kind == "floats":
        return tuple(float(x) for x in raw.split(",") if x.strip())
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return str(raw)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    knobs: dict = field(default_factory=dict)
    out: str = "out"
    threads: int = 1
    tolerance_scale: float = 1.0

    @classmethod
    def defaults(cls, command: str) -> "RunConfig":
        if command not in KNOBS:
            raise LgfLabError(f"unknown command {command!r}")
        spec = {**_COMMON, **KNOBS[command]}
        knobs = {k: _conv(t, str(v)) for k, (t, v) in spec.items()}
        knobs.update(_COMMAND_DEFAULTS.get(command, {}))
        return cls(command, knobs=knobs)

    def set(self, key: str, raw: str) -> None:
        spec = {**_COMMON, **KNOBS[self.command]}
        if key == "seed":
            self.seed = int(raw)
        elif key == "tolerance_scale":
            self.tolerance_scale = float(raw)
        elif key in spec:
            self.knobs[key] = _conv(spec[key][0], raw)
        else:
            raise LgfLabError(f"unknown config key {key!r} for {self.command}")

    def render(self) -> str:
        lines = [f"command={self.command}", f"seed={self.seed}", f"tolerance_scale={self.tolerance_scale!r}"]
        lines += [f"{k}={_fmt(self.knobs[k])}" for k in sorted(self.knobs)]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        pairs = []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise LgfLabError(f"config line without '=': {line!r}")
            k, v = line.split("=", 1)
            pairs.append((k.strip(), v.strip()))
        cmd = dict(pairs).get("command")
        if cmd is None:
            raise LgfLabError("config has no command line")
        cfg = cls.defaults(cmd)
        for k, v in pairs:
            if k != "command":
                cfg.set(k, v)
        return cfg

    def params(self) -> Params:
        k = self.knobs
        return Params.make(k["d"], k["gamma"], k["beta"])

    def digest(self) -> str:
        data = self.render().encode()
        return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.render() == other.render()


# ---------------------------------------------------------------- writers


class Emitter:
    def __init__(self, cfg: RunConfig, params: Params):
        self.cfg = cfg
        self.params = params
        self.dir = FsPath(cfg.out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def _header(self) -> list[str]:
        lines = [f"# {ln}" for ln in self.cfg.render().splitlines()]
        lines.append("# params=" + json.dumps(self.params.as_dict(), sort_keys=True))
        lines.append(f"# config_hash={self.cfg.digest()}")
        return lines

    def csv(self, name: str, columns: list[str], rows) -> FsPath:
        p = self.dir / name
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(self._header()) + "\n")
            fh.write(",".join(columns) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(float(v)) for v in row) + "\n")
        self.files.append(name)
        return p

    def json(self, name: str, obj: dict) -> FsPath:
        p = self.dir / name
        doc = {"config": self.cfg.render().splitlines(), "params": self.params.as_dict(),
               "config_hash": self.cfg.digest(), "result": _jsonable(obj)}
        with open(p, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, indent=2, allow_nan=True)
            fh.write("\n")
        self.files.append(name)
        return p


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    return o


# ---------------------------------------------------------------- commands


def cmd_sphavg(cfg: RunConfig, em: Emitter) -> dict:
    from .sphavg import simulate_repr, simulate_sde, variance_increment

    k = cfg.knobs
    d, n = k["d"], k["n_reps"]
    if k["method"] not in ("repr", "sde", "both"):
        raise LgfLabError("method must be repr, sde or both")
    grid = np.round(np.arange(0.0, k["t_end"] + k["dt"] / 2, k["dt"]), 12)
    methods = ["repr", "sde"] if k["method"] == "both" else [k["method"]]
    from .stochastic import RngSeed

    seed = RngSeed(cfg.seed)
    variances = {}
    for i, m in enumerate(methods):
        if m == "repr":
            r = simulate_repr(grid, d, cutoff=k["cutoff"], seed=seed.child(i), n_rep=n)
        else:
            r = simulate_sde(grid, d, seed=seed.child(i), n_rep=n)
        var = r.s_values.var(axis=0)
        variances[m] = var
        c = r.deriv_values.shape[-1]
        cols = ["t", "S"] + [f"S{j + 1}" for j in range(c)] + ["var_S"]
        rows = np.column_stack([grid, r.s_values[0], r.deriv_values[0], var])
        em.csv(f"sphavg_{m}.csv", cols, rows)
    exact = np.array([variance_increment(t, d) for t in grid])
    em.csv("sphavg_covariance.csv", ["t", "var_S_exact"], np.column_stack([grid, exact]))
    checks = {}
    for t in (0.5, 1.0, 2.0):
        j = np.flatnonzero(np.isclose(grid, t))
        if j.size == 0:
            continue
        j = int(j[0])
        entry = {"exact": float(exact[j])}
        for m, var in variances.items():
            band = 3 * cfg.tolerance_scale * exact[j] * math.sqrt(2.0 / (n - 1))
            entry[m] = {"var": float(var[j]), "within_band": bool(abs(var[j] - exact[j]) <= band)}
        checks[_fmt(t)] = entry
    summary = {"methods": methods, "checks": checks}
    em.json("sphavg_summary.json", summary)
    return summary


def cmd_specdim(cfg: RunConfig, em: Emitter) -> dict:
    from .gmc import Lattice
    from .lbm import spec_dim_estimate

    k = cfg.knobs
    lat = Lattice(k["lattice_n"], k["L"]) if k["lattice_n"] else None
    res = spec_dim_estimate(k["d"], k["gamma"], k["beta"], k["chi_list"], k["t_list"], k["n_reps"], cfg.seed,
                            lattice=lat, n_fields=k["n_fields"], n_steps=k["n_steps"])
    out = res.as_dict()
    out["within_tolerance"] = bool(abs(res.d_spec_hat - res.formula_value) <= 0.1 * cfg.tolerance_scale * res.formula_value)
    em.json("specdim.json", out)
    return out


def _gmc_job(args):
    from .gmc import Lattice, ball_mass, gmc_measure, synthesize_lgf, add_log_singularity
    from .stochastic import RngSeed

    i, seed, k = args
    lat = Lattice(k["lattice_n"], k["L"])
    fg = synthesize_lgf(lat, k["d"], RngSeed(seed).child(i))
    if k["beta"]:
        fg = add_log_singularity(fg, k["beta"])
    x = np.zeros(k["d"])
    return [ball_mass(gmc_measure(fg, k["gamma"], r / k["eps_ratio"]), x, r) for r in k["radii"]]


def cmd_gmc(cfg: RunConfig, em: Emitter) -> dict:
    from .gmc import fit_scaling

    k = cfg.knobs
    jobs = [(i, cfg.seed, k) for i in range(k["n_reps"])]
    with ThreadPoolExecutor(max_workers=max(1, cfg.threads)) as pool:
        table = np.array(list(pool.map(_gmc_job, jobs)))
    rows = [(i, r, table[i, j]) for i in range(table.shape[0]) for j, r in enumerate(k["radii"])]
    em.csv("gmc_masses.csv", ["replicate", "radius", "mass"], rows)
    fit = fit_scaling(table, k["radii"], k["q"], k["statistic"])
    g, q, d, beta = k["gamma"], k["q"], k["d"], k["beta"]
    expected = (d + g * g / 2) * q - g * g * q * q / 2 - beta * g * q
    out = {"slope": fit.slope, "stderr": fit.stderr, "expected": expected, "q": q, "statistic": k["statistic"],
           "within_tolerance": bool(abs(fit.slope - expected) <= 0.1 * cfg.tolerance_scale * abs(expected))}
    em.json("gmc_scaling.json", out)
    return out


def cmd_lbm(cfg: RunConfig, em: Emitter) -> dict:
    from .gmc import Lattice, synthesize_lgf
    from .lbm import clock, default_epsilon, lbm_path
    from .stochastic import RngSeed, sample_brownian

    k = cfg.knobs
    p = cfg.params()
    seed = RngSeed(cfg.seed)
    lat = Lattice(k["lattice_n"], k["L"])
    fg = synthesize_lgf(lat, k["d"], seed.child(0))
    grid = np.linspace(0.0, k["t_end"], k["n_steps"] + 1)
    path = sample_brownian(k["d"], grid, seed.child(1))
    eps = k["epsilon"] or default_epsilon(lat, grid[1])
    ck = clock(fg, p.alpha, path, eps)
    em.csv("lbm_clock.csv", ["s", "F"], np.column_stack([grid, ck.f_values]))
    out_grid = np.linspace(0.0, float(ck.f_values[-1]), k["n_out"] + 1)
    lp = lbm_path(fg, p.alpha, path, eps, out_grid)
    em.csv("lbm_path.csv", ["t"] + [f"x{i + 1}" for i in range(k["d"])], np.column_stack([out_grid, lp.values]))
    out = {"epsilon": eps, "alpha": p.alpha, "clock_total": float(ck.f_values[-1])}
    em.json("lbm_summary.json", out)
    return out


def cmd_mixing(cfg: RunConfig, em: Emitter) -> dict:
    from .langevin import companion_system, mixing_profile

    k = cfg.knobs
    if k["d"] < 4 or k["d"] % 2:
        raise LgfLabError("mixing needs even d >= 4")
    sys_ = companion_system(k["d"])
    ts = np.asarray(k["t_list"], dtype=float)
    tv = mixing_profile(sys_, k["radius"], ts, k["n_pairs"], cfg.seed)
    em.csv("mixing.csv", ["t", "tv_bound"], np.column_stack([ts, tv]))
    after = tv[ts >= 1.0]
    out = {"t": ts, "tv_bound": tv, "nonincreasing_after_1": bool(np.all(np.diff(after) <= 1e-15))}
    em.json("mixing.json", out)
    return out


def cmd_cone(cfg: RunConfig, em: Emitter) -> dict:
    from .cone import convergence_diagnostic, sample_cone
    from .stochastic import RngSeed

    k = cfg.knobs
    p = cfg.params()
    if len(k["window"]) != 2:
        raise LgfLabError("window needs two values T,T_max")
    cs = sample_cone(k["d"], p.drift, k["b"], k["window"], k["n_reps"], RngSeed(cfg.seed), dt=k["dt"], beta=k["beta"])
    S = cs.trajectory.s_values
    em.csv("cone_trajectory.csv", ["s", "S_b", "mean", "var"],
           np.column_stack([cs.trajectory.times, S[0], S.mean(axis=0), S.var(axis=0)]))
    out = {"b": k["b"], "sigma_mean": float(np.mean(cs.sigma_b)), "sigma_std": float(np.std(cs.sigma_b))}
    if k["b_list"]:
        diag = convergence_diagnostic(k["b_list"], k["window"], k["probes"], k["n_reps"], RngSeed(cfg.seed),
                                      d=k["d"], q_minus_beta=p.drift, dt=k["dt"])
        diag.pop("samples")
        out["convergence"] = diag
    em.json("cone.json", out)
    return out


DISPATCH = {"sphavg": cmd_sphavg, "specdim": cmd_specdim, "gmc": cmd_gmc, "lbm": cmd_lbm,
            "mixing": cmd_mixing, "cone": cmd_cone}


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lgf-lab", description="Log-correlated field / LBM experiments")
    sub = ap.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    sub.required = True
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--seed", type=int, help="overrides the config; env LGFLAB_SEED is the fallback")
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--out", default="out")
        sp.add_argument("--tolerance-scale", type=float)
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one knob")
        if name == "sphavg":
            sp.add_argument("--method", choices=("repr", "sde", "both"))
    return ap


def resolve_config(ns: argparse.Namespace) -> RunConfig:
    if ns.config:
        cfg = RunConfig.parse(FsPath(ns.config).read_text(encoding="utf-8"))
        if cfg.command != ns.command:
            raise LgfLabError(f"config is for {cfg.command!r}, not {ns.command!r}")
        seed_in_file = any(ln.strip().startswith("seed=") for ln in FsPath(ns.config).read_text().splitlines())
    else:
        cfg = RunConfig.defaults(ns.command)
        seed_in_file = False
    for item in ns.set:
        if "=" not in item:
            raise LgfLabError(f"--set expects KEY=VALUE, got {item!r}")
        cfg.set(*item.split("=", 1))
    if getattr(ns, "method", None):
        cfg.set("method", ns.method)
    if ns.seed is not None:
        cfg.seed = ns.seed
    elif not seed_in_file and os.environ.get("LGFLAB_SEED"):
        cfg.seed = int(os.environ["LGFLAB_SEED"])
    if ns.tolerance_scale is not None:
        cfg.tolerance_scale = ns.tolerance_scale
    cfg.out = ns.out
    cfg.threads = ns.threads
    return cfg


def main(argv: list[str] | None = None) -> int:
    ns = build_parser().parse_args(argv)  # exits 2 with usage on an unknown command
    started = time.time()
    try:
        cfg = resolve_config(ns)
        params = cfg.params()
        em = Emitter(cfg, params)
        result = DISPATCH[cfg.command](cfg, em)
    except (LgfLabError, ValueError, OSError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": ns.command}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 1
    meta = {"command": cfg.command, "started": started, "finished": time.time(), "files": em.files,
            "config_hash": cfg.digest()}
    with open(em.dir / f"{cfg.command}.meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
    print(json.dumps(_jsonable(result), sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
