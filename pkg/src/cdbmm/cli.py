"""Command-line entry point: ``cdbmm simulate | fit | study``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .estimands import density_grid, summarize_groups
from .gibbs import MISSING_MODES, run_chain
from .io import (
    RunConfig,
    load_dataset,
    write_dataset,
    write_manifest,
    write_table,
    write_traces,
)
from .matching import match_dataset
from .model import Hyperparams
from .partition import build_psm, point_estimate_partition, write_partition
from .scenarios import ChainConfig, ScenarioSpec, replicate_study, sensitivity_grid, simulate_scenario

log = logging.getLogger("cdbmm")


def _out_dir(arg: str | None) -> Path:
    d = Path(arg or os.environ.get("CDBMM_OUTPUT_DIR") or "cdbmm_out")
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_simulate(args) -> int:
    spec = ScenarioSpec(args.scenario, n=args.n, seed=args.seed)
    sim = simulate_scenario(spec)
    out = _out_dir(args.out)
    files = [
        write_dataset(out / "data.csv", sim.data),
        write_table(
            out / "truth_units.csv",
            ["unit", "group", "y0", "y1"],
            ([i + 1, int(sim.groups[i]) + 1, sim.y0[i], sim.y1[i]] for i in range(sim.data.n)),
        ),
        write_table(out / "truth_groups.csv", ["group", "gate"], ([g + 1, v] for g, v in enumerate(sim.gate))),
        write_table(out / "truth_ate.csv", ["ate_population", "ate_sample"], [[sim.ate, sim.sample_ate]]),
    ]
    cfg = {"scenario": args.scenario, "n": args.n, "seed": args.seed}
    write_manifest(out, "simulate", cfg, files)
    print(f"wrote scenario {args.scenario} (n={args.n}) to {out}")
    return 0


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.load(args.config).to_dict() if args.config else RunConfig().to_dict()
    overrides = {
        "input": args.input,
        "outcome": args.outcome,
        "treatment": args.treatment,
        "covariates": args.covariates.split(",") if args.covariates else None,
        "categorical": args.categorical.split(",") if args.categorical else None,
        "n_iter": args.n_iter,
        "burn_in": args.burn_in,
        "thin": args.thin,
        "seed": args.seed,
        "loss": args.loss,
        "missing": args.missing,
        "caliper": args.caliper,
        "ridge": args.ridge,
        "min_group_size": args.min_group_size,
        "output_dir": args.out,
    }
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    if args.match:
        cfg["match"] = True
    if args.sigma2_beta is not None:
        cfg["hyper"] = {**cfg["hyper"], "sigma2_beta": args.sigma2_beta[0]}
    if args.L is not None:
        cfg["hyper"] = {**cfg["hyper"], "L": args.L}
    return RunConfig.from_dict(cfg)


def run_fit(config: RunConfig) -> Path:
    """Full pipeline: load, optionally match, sample, summarize, write."""
    if not config.input:
        raise ValueError("no input file given")
    out = config.resolved_output()
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(config.input, config)
    files = []
    kept = np.arange(data.n)
    if config.match:
        m = match_dataset(data.X, data.t, data.columns, config.ridge, config.caliper)
        kept = np.flatnonzero(m.retained)
        files.append(write_table(out / "matched_pairs.csv", ["treated_row", "control_row"], ([a + 1, b + 1] for a, b in m.pairs)))
        files.append(
            write_table(
                out / "balance.csv",
                ["covariate", "smd_before", "smd_after", "degenerate"],
                ([r["covariate"], r["smd_before"], r["smd_after"], r["degenerate"]] for r in m.balance.rows()),
            )
        )
        data = data.subset(kept)
        log.info("matching kept %d of %d units", kept.size, m.scores.size)

    hyper = config.hyperparams
    draws = run_chain(data, hyper, config.n_iter, config.burn_in, config.thin, config.seed, missing=config.missing)
    parts = []
    for t in (0, 1):
        S = draws.S[:, t]
        part = point_estimate_partition(build_psm(S), S, config.loss)
        parts.append(part)
        path = out / f"partition_arm{t}.txt"
        write_partition(path, part.labels)
        files.append(path)
    res = summarize_groups(draws, parts[0], parts[1], data, config.min_group_size)
    G = res.n_groups

    files.append(
        write_table(out / "groups.csv", ["row", "group"], ([int(kept[i]) + 1, int(res.groups[i])] for i in range(data.n)))
    )
    header = ["group", "size", "low_reliability"]
    for est in ("gate", "garr"):
        header += [f"{est}_mean", f"{est}_median", f"{est}_lower95", f"{est}_upper95"]
    header += ["garr_undefined_draws"]
    rows = []
    for g in range(G):
        row = [g + 1, int(res.sizes[g]), bool(res.small[g])]
        for s in (res.gate, res.garr):
            row += [s.mean[g], s.median[g], s.lower[g], s.upper[g]]
        row.append(int(res.garr.undefined_draws[g]))
        rows.append(row)
    files.append(write_table(out / "group_summary.csv", header, rows))
    files.append(
        write_table(
            out / "ate_summary.csv",
            ["ate_mean", "ate_median", "ate_lower95", "ate_upper95"],
            [[res.ate.mean, res.ate.median, res.ate.lower, res.ate.upper]],
        )
    )
    gcols = [f"group_{g + 1}" for g in range(G)]
    files.append(write_table(out / "gate_samples.csv", ["iteration", *gcols], ([int(i), *r] for i, r in zip(draws.iterations, res.gate.samples))))
    files.append(write_table(out / "garr_samples.csv", ["iteration", *gcols], ([int(i), *r] for i, r in zip(draws.iterations, res.garr.samples))))
    files.append(write_table(out / "ate_samples.csv", ["iteration", "ate"], ([int(i), v] for i, v in zip(draws.iterations, res.ate.samples))))

    # plot data: covariate profiles and posterior densities on a shared grid
    cat_cols = [c for c, f in zip(data.columns, data.categorical) if f]
    files.append(
        write_table(
            out / "plot_profiles.csv",
            ["group", *[f"mean_{c}" for c in data.columns], *[f"mode_{c}" for c in cat_cols]],
            ([g + 1, *res.profile_means[g], *[res.profile_modes[g][c] for c in cat_cols]] for g in range(G)),
        )
    )
    for name, s in (("gate", res.gate), ("garr", res.garr)):
        grid, dens = density_grid(s.samples)
        files.append(write_table(out / f"plot_{name}_density.csv", ["x", *gcols], ([x, *d] for x, d in zip(grid, dens))))
    files += write_traces(out / "traces", draws)
    config.save(out / "config.json")
    files.append(out / "config.json")
    write_manifest(out, "fit", config.to_dict(), files)
    print(f"{G} group(s); ATE posterior mean {res.ate.mean:.4f}; outputs in {out}")
    return out


def cmd_fit(args) -> int:
    config = _config_from_args(args)
    if args.write_config:
        config.save(args.write_config)
    run_fit(config)
    return 0


def cmd_study(args) -> int:
    spec = ScenarioSpec(args.scenario, n=args.n, seed=args.seed)
    hyper = Hyperparams(L=args.L) if args.L else Hyperparams()
    chain = ChainConfig(args.n_iter, args.burn_in, args.thin, args.missing or "augment")
    workers = args.workers or os.cpu_count() or 1
    if args.sigma2_beta and len(args.sigma2_beta) > 1:
        reports = sensitivity_grid(spec, args.sigma2_beta, args.reps, hyper, chain, args.loss or "vi", workers)
    else:
        if args.sigma2_beta:
            hyper = Hyperparams(**{**hyper.to_dict(), "sigma2_beta": args.sigma2_beta[0]})
        reports = [replicate_study(spec, args.reps, hyper, chain, args.loss or "vi", workers)]
    out = _out_dir(args.out)
    summary = [r.summary_row() for r in reports]
    cols = list(summary[0])
    files = [write_table(out / "study_report.csv", cols, ([row[c] for c in cols] for row in summary))]
    k = len(spec.params()[0])
    rep_cols = ["scenario", "sigma2_beta", "replicate", "data_seed", "ari", "ate_hat", "ate_true", "ate_bias",
                "clusters_arm0", "clusters_arm1", "groups", *[f"gate_error_{g + 1}" for g in range(k)]]
    rows = []
    for rep in reports:
        for r in rep.replicates:
            rows.append([rep.scenario, rep.hyper.sigma2_beta, r.replicate, r.seed, r.ari, r.ate_hat, r.ate_true,
                         r.ate_bias, r.n_clusters[0], r.n_clusters[1], r.n_groups, *r.gate_error])
    files.append(write_table(out / "study_replicates.csv", rep_cols, rows))
    cfg = {"scenario": args.scenario, "n": args.n, "seed": args.seed, "reps": args.reps,
           "sigma2_beta": args.sigma2_beta or [hyper.sigma2_beta], "n_iter": args.n_iter,
           "burn_in": args.burn_in, "thin": args.thin, "loss": args.loss or "vi", "L": hyper.L}
    write_manifest(out, "study", cfg, files)
    for row in summary:
        print(f"scenario {row['scenario']} sigma2_beta={row['sigma2_beta']:g}: ARI {row['ari_mean']:.4f} "
              f"(sd {row['ari_sd']:.4f}), ATE bias {row['ate_bias_mean']:+.4f}, MSE {row['ate_mse']:.4f}")
    return 0


def _chain_flags(p: argparse.ArgumentParser, defaults: bool) -> None:
    d = (lambda v: v) if defaults else (lambda v: None)
    p.add_argument("--n-iter", type=int, default=d(3000))
    p.add_argument("--burn-in", type=int, default=d(1000))
    p.add_argument("--thin", type=int, default=d(2))
    p.add_argument("--seed", type=int, default=d(0))
    p.add_argument("--loss", choices=("vi", "binder"))
    p.add_argument("--missing", choices=MISSING_MODES, help="how imputed outcomes enter the sweep")
    p.add_argument("--sigma2-beta", type=float, nargs="+", help="prior variance of weight coefficients")
    p.add_argument("--L", type=int, help="truncation level")
    p.add_argument("--out", help="output directory (default $CDBMM_OUTPUT_DIR or ./cdbmm_out)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cdbmm", description="Confounder-dependent Bayesian mixture for heterogeneous effects")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="draw a synthetic scenario with ground truth")
    s.add_argument("--scenario", type=int, required=True, choices=range(1, 8))
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit a dataset and write groups, estimands and traces")
    f.add_argument("--config", help="JSON run configuration; flags override it")
    f.add_argument("--input")
    f.add_argument("--outcome")
    f.add_argument("--treatment")
    f.add_argument("--covariates", help="comma-separated column names")
    f.add_argument("--categorical", help="comma-separated covariates reported by modal level")
    f.add_argument("--match", action="store_true", help="propensity-score match before fitting")
    f.add_argument("--caliper", type=float)
    f.add_argument("--ridge", type=float)
    f.add_argument("--min-group-size", type=int)
    f.add_argument("--write-config", help="also save the resolved configuration here")
    _chain_flags(f, defaults=False)
    f.set_defaults(func=cmd_fit)

    st = sub.add_parser("study", help="replicate study on a scenario, optionally over several sigma2_beta")
    st.add_argument("--scenario", type=int, required=True, choices=range(1, 8))
    st.add_argument("--reps", type=int, default=10)
    st.add_argument("--n", type=int, default=500)
    st.add_argument("--workers", type=int, help="parallel replicate workers (default: all CPUs)")
    _chain_flags(st, defaults=True)
    st.set_defaults(func=cmd_study)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as e:  # every module error becomes a nonzero exit with its message
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
