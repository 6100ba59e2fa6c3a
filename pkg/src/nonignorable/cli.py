"""Command line: ``simulate`` runs a Monte Carlo study, ``estimate`` fits a CSV file.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .cli_io import (
    ColumnMapping,
    RunConfig,
    format_table,
    parse_config,
    parse_gstar,
    read_csv_sample,
    write_estimates,
    write_report,
)
from .errors import ConfigurationError, DataError, NumericalError
from .estimator import SolverOptions, bootstrap_se, estimate_theta_mean, solve_beta, theta_mean_pipeline
from .model import HFamily, ModelSpec
from .moments import NonparametricProvider, ParametricProvider
from .simlab import (
    BetaEstimator,
    NaiveEstimator,
    OracleMeanEstimator,
    ThetaEstimator,
    get_design,
    make_provider,
    run_monte_carlo,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigurationError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nonignorable", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key=value file; flags override it")
        sp.add_argument("--provider", choices=["oracle", "parametric", "nonparametric"])
        sp.add_argument("--gstar", help="default | true | zero | mis:K | affine:C:L | quad:C:L:Q")
        sp.add_argument("--kernel", help="family:scale:exponent, e.g. gaussian:1.5:1/3")
        sp.add_argument("--kernel-theta", dest="kernel_theta", help="kernel for the theta stage")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--format", choices=["text", "csv"])
        sp.add_argument("--tol", type=float)
        sp.add_argument("--max-iter", dest="max_iter", type=int)

    s = sub.add_parser("simulate", help="Monte Carlo study on a registered design")
    s.add_argument("--design", choices=["A", "B1", "B2"])
    s.add_argument("--n", type=int)
    s.add_argument("--replicates", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--generation", choices=["consistent", "literal"])
    common(s)

    e = sub.add_parser("estimate", help="fit beta and the outcome mean on a CSV file")
    e.add_argument("--input")
    e.add_argument("--ycol")
    e.add_argument("--rcol")
    e.add_argument("--ucols", help="comma-separated")
    e.add_argument("--zcols", help="comma-separated")
    e.add_argument("--bootstrap", type=int)
    e.add_argument("--init", type=float)
    common(e)
    return p


def config_from_args(args) -> RunConfig:
    skip = {"command", "config", "verbose"}
    overrides = {k: v for k, v in vars(args).items() if k not in skip}
    return parse_config(args.config, overrides, mode=args.command)


def _kernels(cfg: RunConfig):
    kb = cfg.kernel_spec
    return kb, cfg.kernel_theta_spec or kb


def _providers(cfg: RunConfig, design=None):
    if cfg.provider == "oracle":
        p = make_provider("oracle", design)
        return p, p
    if cfg.provider == "parametric":
        return ParametricProvider(), ParametricProvider()
    kb, kt = _kernels(cfg)
    return NonparametricProvider(kb), NonparametricProvider(kt)


def run_simulate(cfg: RunConfig, out=None):
    out = out or sys.stdout
    design = get_design(cfg.design)
    spec = design.spec(parse_gstar(cfg.gstar, design.q, design))
    pb, pt = _providers(cfg, design)
    opts = SolverOptions(tol_residual=cfg.tol, max_iter=cfg.max_iter)
    roster = [
        NaiveEstimator(),
        OracleMeanEstimator(),
        BetaEstimator(f"beta[{cfg.provider}]", spec, pb, opts),
        ThetaEstimator(f"theta[{cfg.provider}]", spec, pb, pt, opts),
    ]
    rows = run_monte_carlo(design, cfg.n, cfg.replicates, roster, cfg.seed,
                           workers=cfg.workers, mode=cfg.generation)
    out.write(f"design {design.id}, N={cfg.n}, {cfg.replicates} replicates, "
              f"g*={spec.g_star.describe()}, provider={cfg.provider}\n")
    out.write(format_table(rows))
    if cfg.out:
        write_report(rows, cfg.report_format, cfg.out)
    return rows


def run_estimate(cfg: RunConfig, out=None):
    out = out or sys.stdout
    mapping = ColumnMapping(cfg.ycol, cfg.ucols, cfg.zcols, cfg.rcol)
    sample, summary = read_csv_sample(cfg.input, mapping)
    out.write(f"{summary.rows} rows: {summary.observed} observed, {summary.missing} missing, "
              f"{summary.rejected} rejected\n")
    gstar = parse_gstar(cfg.gstar, sample.q)
    spec = ModelSpec(HFamily.linear(), gstar)
    pb, pt = _providers(cfg)
    opts = SolverOptions(tol_residual=cfg.tol, max_iter=cfg.max_iter, init=(cfg.init,))
    bfit = solve_beta(sample, spec, pb, opts)
    tfit = estimate_theta_mean(sample, bfit, pt, h=spec.h)
    se_boot = None
    if cfg.bootstrap:
        closure = theta_mean_pipeline(spec, pb, pt, opts)
        se_boot = float(bootstrap_se(sample, closure, cfg.bootstrap, np.random.SeedSequence(cfg.seed))[0])
    records = [
        {"parameter": "beta", "estimate": float(bfit.beta[0]), "se": float(bfit.se[0])},
        {"parameter": "theta", "estimate": float(tfit.theta[0]), "se": float(tfit.se[0]),
         "se_bootstrap": se_boot},
    ]
    out.write(write_estimates(records, "text"))
    if cfg.out:
        write_estimates(records, cfg.report_format, cfg.out)
    return records


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = config_from_args(args)
        if cfg.mode == "simulate":
            run_simulate(cfg)
        else:
            run_estimate(cfg)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
