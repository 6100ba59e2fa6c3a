"""Shared argument handling for the table scripts."""

import argparse
import sys

from nonignorable.cli_io import format_table, write_report


def parser(description, n, replicates, seed):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--n", type=int, default=n)
    p.add_argument("--replicates", type=int, default=replicates)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="optional CSV report path")
    return p


def emit(title, rows, out=None):
    sys.stdout.write(f"{title}\n{format_table(rows)}\n")
    if out:
        write_report(rows, "csv", out)
