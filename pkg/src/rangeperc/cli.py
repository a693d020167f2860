"""Command-line surface: simulate, verify, estimate, sweep, gw, range-tail,
walk-exit.

Configuration is a flat key=value file plus command-line overrides (also
key=value); no positional arguments besides the subcommand.  Every run
writes its CSV outputs plus a manifest.json echoing the full configuration,
the seed (verbatim as given and resolved), per-row seeds, version,
timestamps, and sha256 digests of each output file.  CSV bytes are a pure
function of (config, seed) at any worker count; manifests carry wall-clock
data and are not byte-reproducible.

Exit codes: 0 success, 1 check failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import inspect
import json
import os
import sys
import time
from datetime import datetime, timezone

from . import __version__, estimators, gw, suites
from .bonds import BondOracle, derive_seed
from .branching import range_tail, walk_box_exit
from .epidemic import (
    MODE_AGGREGATE,
    MODE_BOND_EXACT,
    StopRule,
    percolation_cluster,
    run_trial,
)
from .estimators import default_stop, estimate_lambda_c
from .lattice import LatticeParams, unpack_keys


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# config parsing


def _to_bool(raw: str) -> bool:
    if str(raw).lower() in ("1", "true", "yes", "on"):
        return True
    if str(raw).lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _to_int_list(raw) -> list:
    if isinstance(raw, (list, tuple)):
        return [int(v) for v in raw]
    return [int(tok) for tok in str(raw).split(",") if tok.strip()]


def _to_float_list(raw) -> list:
    if isinstance(raw, (list, tuple)):
        return [float(v) for v in raw]
    return [float(tok) for tok in str(raw).split(",") if tok.strip()]


def _opt(fn):
    def parse(raw):
        if raw is None or str(raw).lower() in ("none", ""):
            return None
        return fn(raw)

    return parse


_SCHEMAS = {
    "simulate": {
        "d": (int, 2),
        "R": (int, 1),
        "p": (_opt(float), None),
        "lam": (_opt(float), None),
        "theta": (_opt(float), None),
        "trials": (int, 1),
        "trial_offset": (int, 0),
        "mass_cap": (int, 50_000),
        "gen_cap": (_opt(int), None),
        "box_half_width": (_opt(float), None),
        "mode": (str, MODE_BOND_EXACT),
        "check_equivalence": (_to_bool, False),
    },
    "verify": {
        "suite": (str, ""),
    },
    "estimate": {
        "d": (int, 2),
        "R": (int, 4),
        "theta_max": (float, 8.0),
        "q_floor": (float, 0.02),
        "tol": (_opt(float), None),
        "trials_init": (int, 24),
        "trials_point_max": (int, 512),
        "trial_budget": (int, 6144),
        "mass_cap": (int, 50_000),
        "gen_cap": (_opt(int), None),
        "mode": (str, MODE_BOND_EXACT),
    },
    "sweep": {
        "d": (int, 2),
        "R_list": (_to_int_list, [4, 8, 16]),
        "theta_max": (float, 8.0),
        "q_floor": (float, 0.02),
        "tol": (_opt(float), None),
        "trials_init": (int, 24),
        "trials_point_max": (int, 512),
        "trial_budget": (int, 6144),
        "mass_cap": (int, 50_000),
        "gen_cap": (_opt(int), None),
        "mode": (str, MODE_BOND_EXACT),
    },
    "gw": {
        "C": (float, 1.0),
        "N": (int, 24),
        "k_list": (_to_int_list, [100, 1000, 10_000]),
        "slack": (float, 0.05),
    },
    "range-tail": {
        "d": (int, 2),
        "R": (int, 8),
        "theta": (float, 1.0),
        "n": (int, 64),
        "r_grid": (_to_float_list, [1, 2, 4, 8]),
        "trials": (int, 2000),
        "c": (float, 8.0),
        "K": (float, 1.0),
    },
    "walk-exit": {
        "d": (int, 2),
        "R": (int, 4),
        "n": (int, 100),
        "K": (float, 3.0),
        "trials": (int, 100_000),
    },
}

# verify suites accept arbitrary keyword overrides checked against their
# signatures; everything else uses the fixed schemas above.


def parse_seed(raw: str) -> int:
    raw = str(raw).strip()
    try:
        if raw.lower().startswith("0x"):
            return int(raw, 16)
        return int(raw, 10)
    except ValueError as exc:
        raise ConfigError(f"seed must be a decimal or hex integer, got {raw!r}") from exc


def _read_config_file(path: str) -> dict:
    out = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for ln, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{ln}: expected key=value, got {line!r}")
                key, val = line.split("=", 1)
                out[key.strip()] = val.strip()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return out


def build_config(command: str, raw_pairs: dict) -> dict:
    schema = _SCHEMAS[command]
    cfg = {key: default for key, (_, default) in schema.items()}
    for key, raw in raw_pairs.items():
        if key not in schema:
            raise ConfigError(f"unknown configuration key {key!r} for {command!r}")
        parse, _ = schema[key]
        try:
            cfg[key] = parse(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid value for {key!r}: {raw!r} ({exc})") from exc
    return cfg


def _collect_pairs(tokens) -> dict:
    pairs = {}
    for tok in tokens or ():
        if "=" not in tok:
            raise ConfigError(f"overrides must look like key=value, got {tok!r}")
        key, val = tok.split("=", 1)
        pairs[key.strip()] = val.strip()
    return pairs


# ---------------------------------------------------------------------------
# output helpers


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def write_csv(path: str, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[h]) for h in header) + "\n")


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


def write_manifest(out_dir: str, data: dict):
    data = dict(data)
    data["outputs"] = {
        name: file_digest(os.path.join(out_dir, name))
        for name in sorted(os.listdir(out_dir))
        if name.endswith(".csv")
    }
    tmp = os.path.join(out_dir, "manifest.json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))


def _config_digest(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, default=str).encode()
    ).hexdigest()


# ---------------------------------------------------------------------------
# commands


def _resolve_p(cfg, params: LatticeParams) -> float:
    given = [k for k in ("p", "lam", "theta") if cfg.get(k) is not None]
    if len(given) != 1:
        raise ConfigError("give exactly one of p=, lam=, theta=")
    if cfg["p"] is not None:
        p = cfg["p"]
    elif cfg["lam"] is not None:
        p = cfg["lam"] / params.n_neighbors
    else:
        p = (1.0 + cfg["theta"] / params.scale_power) / params.n_neighbors
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"resolved bond probability {p} outside [0, 1]")
    return p


def cmd_simulate(cfg, seed_info, out_dir, workers) -> int:
    params = LatticeParams(cfg["d"], cfg["R"])
    p = _resolve_p(cfg, params)
    gen_cap = cfg["gen_cap"]
    if cfg["check_equivalence"] and gen_cap is None:
        gen_cap = 10**9  # the cluster route has no generation clock
    stop = StopRule(cfg["mass_cap"], gen_cap, cfg["box_half_width"])
    master = seed_info["master_seed"]
    rows = []
    failures = 0
    origin = (0,) * params.d
    for t in range(cfg["trial_offset"], cfg["trial_offset"] + cfg["trials"]):
        oracle = BondOracle(master, t, p)
        res = run_trial(
            [origin],
            (),
            oracle,
            params,
            stop,
            mode=cfg["mode"],
            record_trace=cfg["check_equivalence"],
        )
        if cfg["check_equivalence"]:
            if cfg["mode"] != MODE_BOND_EXACT:
                raise ConfigError("check_equivalence requires mode=bond-exact")
            cluster = percolation_cluster(origin, oracle, params, cap=stop.mass_cap)
            # with an explicit generation cap the epidemic may stop early;
            # the cluster keeps exploring, so it always covers the trace
            ok = res.gen_cap_hit or res.mass_cap_hit == cluster.truncated
            if ok:
                for n, keys in enumerate(res.trace):
                    got = set(map(tuple, unpack_keys(keys, params.d).tolist()))
                    if got != cluster.shell(n):
                        ok = False
                        break
            failures += not ok
        running = res.sizes[0]
        for n, size in enumerate(res.sizes):
            if n == 0:
                continue  # the initial configuration is implicit in the config
            running += size
            rows.append(
                {
                    "trial": t,
                    "n": n,
                    "eta": size,
                    "L": running,
                    "exited_box": bool(res.box_flags[n]) if res.box_flags else False,
                    "extinct": size == 0,
                }
            )
    write_csv(
        os.path.join(out_dir, "trace.csv"),
        ["trial", "n", "eta", "L", "exited_box", "extinct"],
        rows,
    )
    if cfg["check_equivalence"]:
        print(f"equivalence check: {failures} mismatching trials")
    return 1 if failures else 0


def cmd_verify(cfg, seed_info, out_dir, workers, extra_pairs) -> int:
    name = cfg["suite"]
    if name not in suites.SUITES:
        raise ConfigError(
            f"unknown suite {name!r}; choose from {sorted(suites.SUITES)}"
        )
    fn = suites.SUITES[name]
    sig = inspect.signature(fn)
    kwargs = {}
    if "master_seed" in sig.parameters:
        kwargs["master_seed"] = seed_info["master_seed"]
    for key, raw in extra_pairs.items():
        if key not in sig.parameters:
            raise ConfigError(f"unknown configuration key {key!r} for suite {name!r}")
        param = sig.parameters[key]
        anno = param.default
        if isinstance(anno, bool):
            kwargs[key] = _to_bool(raw)
        elif isinstance(anno, int):
            kwargs[key] = int(raw)
        elif isinstance(anno, float):
            kwargs[key] = float(raw)
        elif isinstance(anno, (tuple, list)):
            kwargs[key] = _to_float_list(raw)
        else:
            kwargs[key] = raw
    result = fn(**kwargs)
    if result.rows:
        header = list(result.rows[0].keys())
        write_csv(os.path.join(out_dir, "report.csv"), header, result.rows)
    status = "PASS" if result.passed else "FAIL"
    print(f"[{status}] suite {result.name}: {result.summary}")
    return 0 if result.passed else 1


_ESTIMATE_HEADER = [
    "d",
    "R",
    "lambda_lo",
    "lambda_hi",
    "lambda_c_hat",
    "theta_hat",
    "bracket_width",
    "trials_total",
    "seed",
]
_POINTS_HEADER = [
    "R",
    "lambda",
    "trials",
    "survivals",
    "q_hat",
    "ci_lo",
    "ci_hi",
    "classification",
]


def _estimate_row(est) -> dict:
    return {
        "d": est.d,
        "R": est.R,
        "lambda_lo": est.lambda_lo,
        "lambda_hi": est.lambda_hi,
        "lambda_c_hat": est.lambda_c_hat,
        "theta_hat": est.theta_hat,
        "bracket_width": est.bracket_width,
        "trials_total": est.trials_total,
        "seed": est.seed,
    }


def _point_rows(est) -> list:
    return [
        {
            "R": est.R,
            "lambda": pt.lam,
            "trials": pt.trials,
            "survivals": pt.survivals,
            "q_hat": pt.q_hat,
            "ci_lo": pt.ci_lo,
            "ci_hi": pt.ci_hi,
            "classification": pt.classification,
        }
        for pt in est.points
    ]


def _estimate_kwargs(cfg, workers) -> dict:
    params_stop = (
        StopRule(cfg["mass_cap"], cfg["gen_cap"])
        if cfg["gen_cap"] is not None
        else None
    )
    return dict(
        stop=params_stop,
        theta_max=cfg["theta_max"],
        q_floor=cfg["q_floor"],
        tol=cfg["tol"],
        trials_init=cfg["trials_init"],
        trials_point_max=cfg["trials_point_max"],
        trial_budget=cfg["trial_budget"],
        mode=cfg["mode"],
        workers=workers,
    )


def cmd_estimate(cfg, seed_info, out_dir, workers) -> int:
    params = LatticeParams(cfg["d"], cfg["R"])
    kwargs = _estimate_kwargs(cfg, workers)
    if kwargs["stop"] is None:
        kwargs["stop"] = StopRule(cfg["mass_cap"], default_stop(params).gen_cap)
    est = estimate_lambda_c(params, seed_info["master_seed"], **kwargs)
    write_csv(os.path.join(out_dir, "estimate.csv"), _ESTIMATE_HEADER, [_estimate_row(est)])
    write_csv(os.path.join(out_dir, "points.csv"), _POINTS_HEADER, _point_rows(est))
    print(
        f"d={est.d} R={est.R}: lambda_c in [{est.lambda_lo:.6g}, {est.lambda_hi:.6g}], "
        f"theta_hat={est.theta_hat:.4g} ({est.trials_total} trials"
        f"{', budget exhausted' if est.budget_exhausted else ''})"
    )
    return 0


def _sweep_row_digest(cfg, master_seed: int) -> str:
    keys = [
        "d",
        "theta_max",
        "q_floor",
        "tol",
        "trials_init",
        "trials_point_max",
        "trial_budget",
        "mass_cap",
        "gen_cap",
        "mode",
    ]
    view = {k: cfg[k] for k in keys}
    view["master_seed"] = master_seed
    return _config_digest(view)


def cmd_sweep(cfg, seed_info, out_dir, workers) -> int:
    master = seed_info["master_seed"]
    digest = _sweep_row_digest(cfg, master)
    manifest_path = os.path.join(out_dir, "manifest.json")
    completed = {}
    if os.path.exists(manifest_path):
        try:
            with open(manifest_path, "r", encoding="utf-8") as fh:
                old = json.load(fh)
            if old.get("row_digest") == digest:
                completed = old.get("rows", {})
        except (OSError, json.JSONDecodeError):
            completed = {}
    rows_state = dict(completed)
    resumed = sorted(int(r) for r in completed if int(r) in cfg["R_list"])

    def persist(final: bool):
        table = []
        points = []
        for R in cfg["R_list"]:
            entry = rows_state.get(str(R))
            if entry is None:
                continue
            table.append(entry["row"])
            points.extend(entry["points"])
        write_csv(os.path.join(out_dir, "sweep.csv"), _ESTIMATE_HEADER, table)
        write_csv(os.path.join(out_dir, "points.csv"), _POINTS_HEADER, points)
        write_manifest(
            out_dir,
            {
                "tool": "rangeperc",
                "version": __version__,
                "command": "sweep",
                "config": cfg,
                "master_seed_input": seed_info["raw"],
                "master_seed": master,
                "row_digest": digest,
                "row_seeds": {
                    str(R): derive_seed(master, cfg["d"], R) for R in cfg["R_list"]
                },
                "rows": rows_state,
                "resumed_rows": resumed,
                "workers": workers,
                "started_at": seed_info["started_at"],
                "finished_at": _utcnow() if final else None,
            },
        )

    for R in cfg["R_list"]:
        if str(R) in rows_state:
            continue
        params = LatticeParams(cfg["d"], int(R))
        kwargs = _estimate_kwargs(cfg, workers)
        if kwargs["stop"] is None:
            kwargs["stop"] = StopRule(cfg["mass_cap"], default_stop(params).gen_cap)
        seed_r = derive_seed(master, cfg["d"], int(R))
        est = estimate_lambda_c(params, seed_r, **kwargs)
        rows_state[str(R)] = {"row": _estimate_row(est), "points": _point_rows(est)}
        persist(final=False)
        print(
            f"R={R}: lambda_c_hat={est.lambda_c_hat:.6g} theta_hat={est.theta_hat:.4g}"
        )
    persist(final=True)
    if resumed:
        print(f"resumed rows: {resumed}")
    return 0


def cmd_gw(cfg, seed_info, out_dir, workers) -> int:
    rep = gw.near_critical_schedule_check(
        cfg["C"], cfg["N"], cfg["k_list"], slack=cfg["slack"]
    )
    rows = [
        {
            "k": r.k,
            "N": r.N,
            "q": r.q,
            "survival": r.survival,
            "k_times_survival": r.k_times_survival,
            "bound": r.bound,
            "ok": r.ok,
        }
        for r in rep.rows
    ]
    write_csv(
        os.path.join(out_dir, "gw.csv"),
        ["k", "N", "q", "survival", "k_times_survival", "bound", "ok"],
        rows,
    )
    return 0 if rep.all_ok else 1


def cmd_range_tail(cfg, seed_info, out_dir, workers) -> int:
    params = LatticeParams(cfg["d"], cfg["R"])
    rep = range_tail(
        params,
        cfg["theta"],
        cfg["n"],
        cfg["r_grid"],
        cfg["trials"],
        seed_info["master_seed"],
        c=cfg["c"],
        K=cfg["K"],
    )
    rows = [
        {
            "r_or_k": r.r,
            "trials": r.trials,
            "hits": r.hits,
            "p_hat": r.p_hat,
            "bound": (r.r + 1) ** -2,
            "scaled": r.scaled,
        }
        for r in rep.rows
    ]
    write_csv(
        os.path.join(out_dir, "range_tail.csv"),
        ["r_or_k", "trials", "hits", "p_hat", "bound", "scaled"],
        rows,
    )
    return 0


def cmd_walk_exit(cfg, seed_info, out_dir, workers) -> int:
    params = LatticeParams(cfg["d"], cfg["R"])
    rep = walk_box_exit(
        params, cfg["n"], cfg["K"], cfg["trials"], seed_info["master_seed"]
    )
    rows = [
        {
            "r_or_k": r.k,
            "trials": r.trials,
            "hits": r.hits_running,
            "p_hat": r.p_hat,
            "bound": r.bound,
        }
        for r in rep.rows
    ]
    write_csv(
        os.path.join(out_dir, "walk_exit.csv"),
        ["r_or_k", "trials", "hits", "p_hat", "bound"],
        rows,
    )
    if rep.vacuous:
        print(f"bound {rep.bound:.4g} > 1: vacuous (empirical still computed)")
    return 0


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rangeperc",
        description="Monte Carlo engine for range-R bond percolation / SIR epidemics",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _SCHEMAS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None, help="flat key=value file")
        sp.add_argument("--seed", default=None, help="decimal or hex master seed")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--workers", type=int, default=None)
        if name in ("simulate", "estimate", "sweep"):
            sp.add_argument(
                "--mode", choices=[MODE_BOND_EXACT, MODE_AGGREGATE], default=None
            )
        if name == "simulate":
            sp.add_argument("--check-equivalence", action="store_true")

    args, leftover = parser.parse_known_args(argv)
    args.overrides = leftover
    started_at = _utcnow()
    t0 = time.time()
    try:
        pairs = {}
        if args.config:
            pairs.update(_read_config_file(args.config))
        pairs.update(_collect_pairs(args.overrides))
        if getattr(args, "mode", None):
            pairs["mode"] = args.mode
        if getattr(args, "check_equivalence", False):
            pairs["check_equivalence"] = "true"

        extra_pairs = {}
        if args.command == "verify":
            suite_name = pairs.pop("suite", None)
            if suite_name is None:
                raise ConfigError("verify needs suite=<name>")
            extra_pairs = pairs
            cfg = {"suite": suite_name}
        else:
            cfg = build_config(args.command, pairs)
        if args.command in ("simulate", "estimate", "sweep") and cfg.get(
            "mode"
        ) not in (MODE_BOND_EXACT, MODE_AGGREGATE):
            raise ConfigError(f"unknown mode {cfg.get('mode')!r}")

        raw_seed = args.seed or os.environ.get("RANGEPERC_SEED") or "1"
        master_seed = parse_seed(raw_seed)
        workers = args.workers if args.workers else (os.cpu_count() or 1)
        out_dir = args.out or f"rangeperc_out/{args.command}"
        os.makedirs(out_dir, exist_ok=True)
        seed_info = {"raw": raw_seed, "master_seed": master_seed, "started_at": started_at}

        if args.command == "simulate":
            code = cmd_simulate(cfg, seed_info, out_dir, workers)
        elif args.command == "verify":
            code = cmd_verify(cfg, seed_info, out_dir, workers, extra_pairs)
        elif args.command == "estimate":
            code = cmd_estimate(cfg, seed_info, out_dir, workers)
        elif args.command == "sweep":
            return cmd_sweep(cfg, seed_info, out_dir, workers)  # writes own manifest
        elif args.command == "gw":
            code = cmd_gw(cfg, seed_info, out_dir, workers)
        elif args.command == "range-tail":
            code = cmd_range_tail(cfg, seed_info, out_dir, workers)
        else:
            code = cmd_walk_exit(cfg, seed_info, out_dir, workers)

        write_manifest(
            out_dir,
            {
                "tool": "rangeperc",
                "version": __version__,
                "command": args.command,
                "config": cfg if args.command != "verify" else {**cfg, **extra_pairs},
                "master_seed_input": raw_seed,
                "master_seed": master_seed,
                "workers": workers,
                "started_at": started_at,
                "finished_at": _utcnow(),
                "wall_seconds": time.time() - t0,
            },
        )
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
