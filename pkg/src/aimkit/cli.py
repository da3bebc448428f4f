"""Command-line front end: sweeps, runs, and CSV/JSON artifact emission.

Subcommands: se-curve, amp, gd, thresholds, mapping-check, density.  Options
can come from a flat key=value config file (--config); command-line flags win.
Every artifact gets a sidecar <name>.meta.json embedding the resolved config
and a sha1 content hash, so a run can be reproduced from its outputs alone.
Sweep cells are independent; interrupted sweeps resume from completed rows.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import amp as amp_mod
from . import gd as gd_mod
from . import model as model_mod
from . import state_evolution as se_mod
from .channels import ChannelKind, hardmax, linear, softmax
from .spectra import WishartPrior, convolved_density

SE_COLUMNS = ["channel", "T", "rho", "alpha", "q", "qhat", "mmse", "gen_error", "converged", "se_q"]


def _csv_field(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _make_kind(channel: str, T: int, beta: float) -> ChannelKind:
    if channel == "linear":
        return linear(T)
    if channel == "softmax":
        return softmax(beta, T)
    if channel == "hardmax":
        return hardmax(T)
    raise SystemExit(f"unknown channel {channel!r}")


def _parse_list(spec: str | None, cast=float):
    """Comma list '0.1,0.2' or range 'start:stop:num[:log]'."""
    if spec is None:
        return []
    if ":" in spec:
        parts = spec.split(":")
        lo, hi, num = float(parts[0]), float(parts[1]), int(parts[2])
        if len(parts) > 3 and parts[3] == "log":
            vals = np.geomspace(lo, hi, num)
        else:
            vals = np.linspace(lo, hi, num)
        return [cast(v) for v in vals]
    return [cast(v) for v in spec.split(",") if v]


def _load_config(path: str | None) -> dict:
    cfg = {}
    if path:
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, val = line.partition("=")
                cfg[key.strip()] = val.strip()
    return cfg


def _resolve(args: argparse.Namespace, file_cfg: dict) -> dict:
    """Flags win over the config file; unset flags fall back to file values."""
    merged = dict(file_cfg)
    for key, val in vars(args).items():
        if key in ("func", "config"):
            continue
        if val is not None:
            merged[key] = val
    return merged


def _content_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha1(b"blob %d\0" % len(blob) + blob).hexdigest()


def _write_meta(path: str, config: dict):
    meta = {"config": {k: str(v) for k, v in config.items()}, "content_hash": _content_hash(config)}
    with open(path + ".meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def _ensure_out(config) -> str:
    out = config.get("out") or "."
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# se-curve
# ---------------------------------------------------------------------------

def _se_cell(payload):
    channel, T, rho, alpha, beta, mc, max_iter, seed, informed = payload
    kind = _make_kind(channel, T, beta)
    prior = WishartPrior(rho)
    opts = se_mod.SEOptions(mc_samples=mc, max_iter=max_iter, seed=seed, informed=informed)
    res = se_mod.solve_fixed_point(kind, alpha, prior, T, opts, compute_gen_error=True)
    return {
        "channel": channel, "T": T, "rho": rho, "alpha": alpha,
        "q": res.q, "qhat": res.qhat, "mmse": res.mmse, "gen_error": res.gen_error,
        "converged": int(res.converged), "se_q": res.trailing_std,
    }


def _read_done(path, key_cols):
    done = {}
    if os.path.exists(path):
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            for line in fh:
                vals = line.strip().split(",")
                row = dict(zip(header, vals))
                done[tuple(row[k] for k in key_cols)] = row
    return done


def _row_key(row):
    return (row["channel"], str(row["T"]), repr(float(row["rho"])), repr(float(row["alpha"])))


def cmd_se_curve(config) -> int:
    out = _ensure_out(config)
    channel = config.get("channel", "softmax")
    Ts = _parse_list(str(config.get("T", "2")), int) or [2]
    rhos = _parse_list(str(config.get("rho", "0.5"))) or [0.5]
    alphas = _parse_list(str(config.get("alpha", "")))
    beta = float(config.get("beta", 1.0))
    mc = int(config.get("mc_samples", 20000))
    max_iter = int(config.get("max_iter", 150))
    seed = int(config.get("seed", 0))
    informed = bool(int(config.get("informed", 0)))
    jobs = int(config.get("jobs", 1))
    path = os.path.join(out, config.get("name", "se_curve.csv"))
    if not alphas:
        print("warning: empty alpha grid, nothing to do", file=sys.stderr)
        return 0
    cells = [
        (channel, T, rho, alpha, beta, mc, max_iter, seed, informed)
        for T in Ts for rho in rhos for alpha in alphas
    ]
    done = _read_done(path, SE_COLUMNS[:4])
    todo = [c for c in cells if (c[0], str(c[1]), repr(float(c[2])), repr(float(c[3]))) not in done]
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_se_cell, todo))
    else:
        rows = [_se_cell(c) for c in todo]
    by_key = {_row_key(r): r for r in rows}
    with open(path, "w") as fh:
        fh.write(",".join(SE_COLUMNS) + "\n")
        for cell in cells:
            key = (cell[0], str(cell[1]), repr(float(cell[2])), repr(float(cell[3])))
            if key in by_key:
                r = by_key[key]
                fh.write(",".join(_csv_field(r[c]) for c in SE_COLUMNS) + "\n")
            elif key in done:
                r = done[key]
                fh.write(",".join(str(r[c]) for c in SE_COLUMNS) + "\n")
    _write_meta(path, config)
    print(f"wrote {path} ({len(cells)} cells, {len(todo)} computed)")
    return 0


# ---------------------------------------------------------------------------
# amp
# ---------------------------------------------------------------------------

def _amp_cell(payload):
    channel, T, rho, alpha, beta, d, seed, max_iter = payload
    kind = _make_kind(channel, T, beta)
    prior = WishartPrior(rho)
    teacher = model_mod.sample_teacher(d, rho, seed)
    data = model_mod.generate_dataset(teacher, kind, alpha, T, seed + 1)
    res = amp_mod.run_amp(data, kind, prior, amp_mod.AmpOptions(max_iter=max_iter, seed=seed + 2))
    err = res.estimation_error(teacher.S)
    return seed, alpha, err, res.converged, res.trajectory


def cmd_amp(config) -> int:
    out = _ensure_out(config)
    channel = config.get("channel", "softmax")
    T = int(config.get("T", 2))
    rho = float(config.get("rho", 0.5))
    alphas = _parse_list(str(config.get("alpha", "0.3")))
    beta = float(config.get("beta", 1.0))
    d = int(config.get("d", 100))
    seeds = int(config.get("seeds", 16))
    max_iter = int(config.get("max_iter", 200))
    jobs = int(config.get("jobs", 1))
    base_seed = int(config.get("seed", 0))
    cells = [
        (channel, T, rho, alpha, beta, d, base_seed + 1000 * s, max_iter)
        for alpha in alphas for s in range(seeds)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_amp_cell, cells))
    else:
        results = [_amp_cell(c) for c in cells]
    summary = []
    failures = []
    for alpha in alphas:
        errs = [r[2] for r in results if r[1] == alpha]
        kind = _make_kind(channel, T, beta)
        se_ref = se_mod.solve_fixed_point(kind, alpha, WishartPrior(rho), T,
                                          se_mod.SEOptions(seed=base_seed))
        summary.append({
            "alpha": alpha,
            "amp_error_mean": float(np.mean(errs)),
            "amp_error_se": float(np.std(errs, ddof=1) / math.sqrt(len(errs))) if len(errs) > 1 else 0.0,
            "se_mmse": se_ref.mmse,
            "n_seeds": len(errs),
        })
        if not all(r[3] for r in results if r[1] == alpha):
            failures.append(alpha)
    for seed, alpha, _, _, traj in results:
        tpath = os.path.join(out, f"amp_traj_a{alpha}_s{seed}.csv")
        amp_mod.trajectory_to_csv(traj, tpath)
    spath = os.path.join(out, config.get("name", "amp_summary.json"))
    with open(spath, "w") as fh:
        json.dump({"channel": channel, "T": T, "rho": rho, "d": d, "cells": summary}, fh, indent=2)
    _write_meta(spath, config)
    print(f"wrote {spath} and {len(results)} trajectories")
    if failures:
        print(f"non-converged cells at alpha in {failures}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# gd
# ---------------------------------------------------------------------------

def cmd_gd(config) -> int:
    out = _ensure_out(config)
    T = int(config.get("T", 2))
    rho = float(config.get("rho", 0.5))
    alpha = float(config.get("alpha", 0.3))
    beta = float(config.get("beta", 1.0))
    d = int(config.get("d", 100))
    seeds = int(config.get("seeds", 1))
    m_runs = int(config.get("m_runs", 32))
    epochs = int(config.get("epochs", 1500))
    lr = float(config.get("lr", 0.1))
    base_seed = int(config.get("seed", 0))
    kind = softmax(beta, T)
    prior = WishartPrior(rho)
    gd_errors, agd_errors = [], []
    run_rows = []
    for s in range(seeds):
        seed = base_seed + 1000 * s
        teacher = model_mod.sample_teacher(d, rho, seed)
        data = model_mod.generate_dataset(teacher, kind, alpha, T, seed + 1)
        cfg = gd_mod.GdConfig(r_student=teacher.r, beta=beta, learning_rate=lr,
                              epochs=epochs, m_runs=m_runs, seed=seed + 2)
        S_avg, mats, losses = gd_mod.averaged_gd(cfg, data, return_runs=True)
        errs = [model_mod.estimation_error(M, teacher.S) for M in mats]
        gd_errors.extend(errs)
        agd_errors.append(model_mod.estimation_error(S_avg, teacher.S))
        for run_id, hist in enumerate(losses):
            for step, loss in enumerate(hist):
                if step % 50 == 0 or step == len(hist) - 1:
                    run_rows.append((s, run_id, step + 1, loss, errs[run_id]))
    se_ref = se_mod.solve_fixed_point(kind, alpha, prior, T, se_mod.SEOptions(seed=base_seed))
    rpath = os.path.join(out, "gd_runs.csv")
    with open(rpath, "w") as fh:
        fh.write("seed,run_id,step,loss,est_error\n")
        for row in run_rows:
            fh.write(",".join(_csv_field(v) for v in row) + "\n")
    summary = {
        "gd_error_mean": float(np.mean(gd_errors)),
        "gd_error_se": float(np.std(gd_errors, ddof=1) / math.sqrt(len(gd_errors))) if len(gd_errors) > 1 else 0.0,
        "agd_error": float(np.mean(agd_errors)),
        "se_mmse_reference": se_ref.mmse,
        "alpha": alpha, "rho": rho, "T": T, "d": d, "m_runs": m_runs, "seeds": seeds,
    }
    spath = os.path.join(out, config.get("name", "gd_summary.json"))
    with open(spath, "w") as fh:
        json.dump(summary, fh, indent=2)
    _write_meta(spath, config)
    print(f"wrote {spath} and {rpath}")
    return 0


# ---------------------------------------------------------------------------
# thresholds / mapping-check / density
# ---------------------------------------------------------------------------

def cmd_thresholds(config) -> int:
    out = _ensure_out(config)
    channel = config.get("channel", "softmax")
    Ts = _parse_list(str(config.get("T", "2")), int) or [2]
    rhos = _parse_list(str(config.get("rho", "0.5"))) or [0.5]
    method = config.get("method", "both")
    records = []
    for T in Ts:
        for rho in rhos:
            prior = WishartPrior(rho)
            if channel == "hardmax":
                wt = se_mod.weak_threshold(hardmax(T), T)
                records.append({"channel": channel, "T": T, "rho": rho,
                                "alpha_star": wt.alpha_bar * rho, "method": "weak-closed-form"})
                continue
            if method in ("closed", "both"):
                a = (se_mod.strong_threshold_softmax(T, rho) if channel == "softmax"
                     else se_mod.counting_threshold_linear(T, rho))
                records.append({"channel": channel, "T": T, "rho": rho,
                                "alpha_star": a, "method": "closed-form"})
            if method in ("bisect", "both"):
                kind = _make_kind(channel, T, float(config.get("beta", 1.0)))
                a = se_mod.strong_threshold_bisect(kind, T, prior)
                records.append({"channel": channel, "T": T, "rho": rho,
                                "alpha_star": a, "method": "bisection"})
    path = os.path.join(out, config.get("name", "thresholds.json"))
    with open(path, "w") as fh:
        json.dump(records, fh, indent=2)
    _write_meta(path, config)
    print(f"wrote {path}")
    return 0


def cmd_mapping_check(config) -> int:
    cases = int(config.get("cases", 50))
    seed = int(config.get("seed", 0))
    rng = np.random.default_rng(seed)
    worst = 0.0
    failures = 0
    for i in range(cases):
        L = int(rng.integers(1, 4))
        T = int(rng.integers(2, 5))
        d = int(rng.choice([16, 64]))
        c = float(rng.choice([0.0, 0.5, 1.0]))
        beta = float(rng.choice([0.5, 2.0]))
        M = int(rng.choice([1, 1, 3]))
        weights = []
        for _ in range(L):
            heads = []
            for _ in range(M):
                A = rng.standard_normal((d, d))
                heads.append((A + A.T) / (2.0 * math.sqrt(d)))
            weights.append(heads if M > 1 else heads[0])
        X0 = rng.standard_normal((T, d))
        cfg = model_mod.DeepConfig(weights, c=c, beta=beta)
        y_deep, X_L = model_mod.deep_forward(cfg, X0)
        h_bar = [
            np.mean([model_mod.preactivations(S, X0) for S in cfg.heads(l)], axis=0)
            for l in range(L)
        ]
        y_aim, B = model_mod.aim_forward(h_bar, c, beta)
        g_seq = model_mod._softmax_rows(B @ h_bar[-1] @ B.T, beta) @ B
        err = max(
            np.max(np.abs(y_deep - y_aim)) / max(np.max(np.abs(y_aim)), 1e-30),
            np.max(np.abs(X_L - g_seq @ X0)) / max(np.max(np.abs(X_L)), 1e-30),
        )
        worst = max(worst, err)
        if err > 1e-10:
            failures += 1
            print(f"case {i}: L={L} T={T} d={d} c={c} beta={beta} M={M} rel err {err:.2e}", file=sys.stderr)
    print(f"mapping check: {cases - failures}/{cases} cases within 1e-10 (worst {worst:.2e})")
    return 0 if failures == 0 else 1


def cmd_density(config) -> int:
    out = _ensure_out(config)
    rho = float(config.get("rho", 0.5))
    qhat = float(config.get("qhat", 1.0))
    grid_size = int(config.get("grid_size", 2000))
    dens = convolved_density(WishartPrior(rho), qhat, grid_size)
    path = os.path.join(out, config.get("name", "density.csv"))
    dens.to_csv(path, rho=rho, qhat=qhat)
    _write_meta(path, config)
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="aimkit", description="state evolution, message passing, and baselines"
    )
    parser.add_argument("--config", help="flat key=value config file (flags win)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--channel", choices=["linear", "softmax", "hardmax"])
        p.add_argument("--beta", type=float)
        p.add_argument("--T")
        p.add_argument("--rho")
        p.add_argument("--alpha")
        p.add_argument("--d", type=int)
        p.add_argument("--seeds", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--jobs", type=int)
        p.add_argument("--mc-samples", dest="mc_samples", type=int)
        p.add_argument("--max-iter", dest="max_iter", type=int)
        p.add_argument("--name")

    p = sub.add_parser("se-curve", help="fixed-point sweep to CSV")
    add_common(p)
    p.add_argument("--informed", type=int)
    p.set_defaults(func=cmd_se_curve)

    p = sub.add_parser("amp", help="message-passing runs and pooled summary")
    add_common(p)
    p.set_defaults(func=cmd_amp)

    p = sub.add_parser("gd", help="gradient-descent baseline and averaged variant")
    add_common(p)
    p.add_argument("--m-runs", dest="m_runs", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_gd)

    p = sub.add_parser("thresholds", help="recovery thresholds to JSON")
    add_common(p)
    p.add_argument("--method", choices=["closed", "bisect", "both"])
    p.set_defaults(func=cmd_thresholds)

    p = sub.add_parser("mapping-check", help="deep-stack vs index-function identity suite")
    add_common(p)
    p.add_argument("--cases", type=int)
    p.set_defaults(func=cmd_mapping_check)

    p = sub.add_parser("density", help="tabulated spectral density to CSV")
    add_common(p)
    p.add_argument("--qhat", type=float)
    p.add_argument("--grid-size", dest="grid_size", type=int)
    p.set_defaults(func=cmd_density)

    args = parser.parse_args(argv)
    config = _resolve(args, _load_config(args.config))
    config.pop("command", None)
    try:
        return args.func(config)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
