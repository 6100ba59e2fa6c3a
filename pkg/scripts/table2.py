"""Design B1: outcome mean against the naive and full-data benchmarks."""

from _common import emit, parser

from nonignorable.simlab import (
    NaiveEstimator,
    OracleMeanEstimator,
    ThetaEstimator,
    get_design,
    make_provider,
    run_monte_carlo,
)


def main():
    p = parser(__doc__, 1000, 1000, 2)
    p.add_argument("--bootstrap", type=int, default=0, help="B for an extra bootstrap-SE row; 0 to skip")
    a = p.parse_args()
    d = get_design("B1")
    roster = [NaiveEstimator(), OracleMeanEstimator()]
    for kind in ("oracle", "parametric", "nonparametric"):
        roster.append(ThetaEstimator(f"theta[{kind}]", d.spec(), make_provider(kind, d, "beta"),
                                     make_provider(kind, d, "theta")))
    if a.bootstrap:
        roster.append(ThetaEstimator("theta[oracle, bootstrap]", d.spec(), make_provider("oracle", d),
                                     se_method="bootstrap", bootstrap=a.bootstrap))
    rows = run_monte_carlo(d, a.n, a.replicates, roster, a.seed, workers=a.workers)
    emit(f"design B1, N={a.n}, {a.replicates} replicates (values x100)", rows, a.out)


if __name__ == "__main__":
    main()
