"""Design B2 (two-dimensional u): outcome mean at one or more sample sizes."""

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
    p = parser(__doc__, 500, 200, 3)
    p.add_argument("--sizes", type=int, nargs="*", help="several N values; overrides --n")
    p.add_argument("--providers", nargs="*", default=["oracle", "parametric"],
                   choices=["oracle", "parametric", "nonparametric"])
    a = p.parse_args()
    d = get_design("B2")
    roster = [NaiveEstimator(), OracleMeanEstimator()]
    roster += [ThetaEstimator(f"theta[{k}]", d.spec(), make_provider(k, d, "beta"), make_provider(k, d, "theta"))
               for k in a.providers]
    for n in a.sizes or [a.n]:
        rows = run_monte_carlo(d, n, a.replicates, roster, a.seed, workers=a.workers)
        emit(f"design B2, N={n}, {a.replicates} replicates (values x100)", rows,
             a.out and (a.out if not a.sizes else a.out.replace(".csv", f"_{n}.csv")))


if __name__ == "__main__":
    main()
