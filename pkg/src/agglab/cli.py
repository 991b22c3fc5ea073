"""Command-line entry point: ``agglab run | audit | checks run``."""

import argparse
import hashlib
import json
import os
import sys

from agglab import _rng
from agglab import audit as au
from agglab import checks as ck
from agglab.experiment import (ConfigError, atomic_write, build_dataset, header_lines,
                               load_config, run_experiment, write_results)


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(t) for t in text.split(",") if t.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}")
    return parse


def _parser():
    p = argparse.ArgumentParser(prog="agglab", description=(
        "Label-private bag aggregation: run experiments, audit privacy, verify inequalities."))
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a configured experiment grid")
    run.add_argument("--config", help="INI config file")
    run.add_argument("--out", help="output directory (overrides [output] dir)")
    run.add_argument("--mechanism", choices=("wtd-lba", "noisy-wtd-llp", "naive-lba", "naive-llp"))
    run.add_argument("--m", help="comma-separated bag counts")
    run.add_argument("--k", help="comma-separated bag sizes")
    run.add_argument("--rho", help="comma-separated noise fractions")
    run.add_argument("--seeds", help="comma-separated seeds")
    run.add_argument("--model", choices=("linear", "mlp"))
    run.add_argument("--epochs", type=int)
    run.add_argument("--workers", type=int)

    aud = sub.add_parser("audit", help="audit (eps, delta) of a mechanism")
    aud.add_argument("--config", help="INI config file (only [dataset] is used)")
    aud.add_argument("--mech", required=True,
                     choices=("wtd-lba", "noisy-wtd-llp", "naive-lba", "naive-llp"))
    aud.add_argument("--k", type=_csv_list(int), default=[10])
    aud.add_argument("--m", type=int, default=100)
    aud.add_argument("--rho", type=float, default=0.5)
    aud.add_argument("--eps", type=_csv_list(float), default=[0.5, 1.0, 2.0])
    aud.add_argument("--n-cond", type=int, default=au.DEFAULT_N_COND)
    aud.add_argument("--trials", type=int, default=10_000,
                     help="membership trials for the unit-weight mechanisms")
    aud.add_argument("--index", type=int, default=0, help="index whose label is changed")
    aud.add_argument("--new-label", type=float, help="replacement label (default: -y clipped)")
    aud.add_argument("--seed", type=int, default=None)
    aud.add_argument("--out", default="audit")

    chk = sub.add_parser("checks", help="inequality verification harness")
    chk_sub = chk.add_subparsers(dest="checks_command", required=True)
    crun = chk_sub.add_parser("run", help="run a check suite")
    crun.add_argument("--suite", choices=ck.SUITES, default="all")
    crun.add_argument("--seed", type=int, default=None)
    crun.add_argument("--scale", type=float, default=1.0, help="multiply trial counts")
    crun.add_argument("--out", default="checks.csv")
    return p


def _cmd_run(args):
    overrides = {
        "output.dir": args.out, "mechanism.name": args.mechanism, "grid.m": args.m,
        "grid.k": args.k, "grid.rho": args.rho, "grid.seeds": args.seeds, "model.kind": args.model,
        "train.epochs": args.epochs, "output.workers": args.workers,
    }
    cfg = load_config(args.config, overrides)
    table = run_experiment(cfg)
    out = write_results(table)
    print(open(os.path.join(out, "results.md"), encoding="utf-8").read(), end="")
    return 0


def _cmd_audit(args):
    seed = _rng.default_seed() if args.seed is None else args.seed
    cfg = load_config(args.config)
    ds = build_dataset(cfg.dataset)
    os.makedirs(args.out, exist_ok=True)
    perturb = (args.index, args.new_label)
    digest = cfg.digest()
    head = header_lines(digest, [seed])
    if args.mech.startswith("naive"):
        lines = []
        for k in args.k:
            floor = au.naive_lower_bound(ds.n, args.m, k)
            freq = au.naive_membership_frequency(ds, args.m, k, args.index, args.trials, seed,
                                                 args.mech)
            lines.append(f"k={k} m={args.m} n={ds.n} delta_floor={float(floor)!r} "
                         f"({floor.numerator}/{floor.denominator}) membership_frequency={freq!r}")
        path = os.path.join(args.out, f"{args.mech}.txt")
        atomic_write(path, "".join(f"# {h}\n" for h in head) + "\n".join(lines) + "\n")
        print("\n".join(lines))
        return 0
    for k in args.k:
        if args.mech == "wtd-lba":
            curve = au.audit_wtd_lba(ds, k, perturb, args.eps, args.n_cond, seed)
        else:
            curve = au.audit_noisy_llp(ds, args.m, k, args.rho, perturb, args.eps, args.n_cond, seed)
        stem = os.path.join(args.out, f"{args.mech}_k{k}")
        au.save_curve(curve, stem, head)
        print(f"{stem}.csv: " + ", ".join(
            f"eps={e:g} delta={d:.4g}+-{s:.2g}"
            for e, d, s in zip(curve.eps_grid, curve.delta_hat, curve.mc_stderr)))
    return 0


def _cmd_checks(args):
    seed = _rng.default_seed() if args.seed is None else args.seed
    reports = ck.run_suite(args.suite, seed, scale=args.scale)
    params = {"suite": args.suite, "scale": args.scale, "reference": ck.REFERENCE}
    digest = hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()[:16]
    head = header_lines(digest, [seed])
    folder = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(folder, exist_ok=True)
    ck.save_reports(reports, args.out, head)
    stem = os.path.splitext(args.out)[0]
    for r in reports:
        ck.save_reports([r], f"{stem}.{r.name}.csv", head)
    width = max(len(r.name) for r in reports)
    for r in reports:
        print(f"{r.name.ljust(width)}  {r.verdict.upper():4}  empirical={r.empirical:.4g} "
              f"bound={r.bound:.4g}  {r.note}")
    return 0 if all(r.verdict != ck.FAIL for r in reports) else 1


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "audit":
            return _cmd_audit(args)
        return _cmd_checks(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"agglab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
