"""Monte Carlo checks of the concentration and utility inequalities behind the mechanisms.

Each check simulates an inequality of the form Pr[event] <= bound and reports
``pass`` when the empirical frequency is at most ``bound + 3 * stderr``, the
standard error being the binomial one at the bound. Trend checks compare two
configured sizes instead of an absolute bound. A check whose hypotheses do not
hold reports ``skip``.
"""

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from agglab import _rng
from agglab.aggregate import noisy_wtd_llp, wtd_lba
from agglab.audit import BOUND_ATOL, bag_conditional, gaussian_deviation_bound, hockey_stick_gauss
from agglab.core import EIG_RTOL, compute_stats, synth_dataset
from agglab.regress import LinearModel, init_mlp, lba_loss, llp_loss, mse

HANSON_WRIGHT_C0 = 1 / 8
TREND_CAP = 0.05
REFERENCE = dict(n=20000, d=10, target_gamma=0.5, b1=3.0, b2=1.0, seed=7)

PASS, FAIL, SKIP = "pass", "fail", "skip"


@dataclass
class CheckReport:
    name: str
    parameters: dict
    trials: int
    empirical: float
    bound: float
    margin: float
    verdict: str
    seed: int
    note: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.verdict == PASS


def reference_dataset():
    """The reference synthetic dataset (n=20000, d=10, gamma ~ 0.5, b1=3, b2=1)."""
    return synth_dataset(**REFERENCE)


def _binom_se(p, trials):
    p = min(max(p, 0.0), 1.0)
    return math.sqrt(p * (1 - p) / trials)


def _tail_report(name, params, trials, freq, bound, seed, note="", extra=None):
    slack = 3 * _binom_se(min(bound, 1.0), trials)
    verdict = PASS if freq <= min(bound, 1.0) + slack else FAIL
    return CheckReport(name, params, trials, freq, bound, slack, verdict, seed, note, extra or {})


def _trend_report(name, params, trials, freqs, seed, note=""):
    small, large = freqs
    ok = large <= small and large <= TREND_CAP
    return CheckReport(name, params, trials, large, TREND_CAP, small - large,
                       PASS if ok else FAIL, seed,
                       note or f"frequency {small:.4g} at the smaller size, {large:.4g} at the larger",
                       {"frequencies": list(freqs)})


def check_hoeffding_wor(population, n_draw, t, trials=10_000, seed=0):
    """Pr[|mean of n_draw draws without replacement - mu| > t] <= exp(-2 n^2 t^2 / sum a^2).

    The sum in the denominator runs over the ``n_draw`` sampled values; it is
    evaluated at its worst case, ``n_draw * max(a)^2``, since it must not
    depend on the sample.
    """
    pop = np.asarray(population, dtype=np.float64)
    if np.any(pop < 0):
        raise ValueError("population values must be non-negative")
    if not 1 <= n_draw <= pop.size:
        raise ValueError("need 1 <= n_draw <= population size")
    mu = pop.mean()
    amax = pop.max()
    denom = n_draw * amax * amax
    bound = 0.0 if denom == 0 else math.exp(-2 * n_draw ** 2 * t * t / denom)
    rng = _rng.stream(seed, _rng.CHECK, 0)
    hits = 0
    chunk = max(1, 2_000_000 // pop.size)
    done = 0
    while done < trials:
        c = min(chunk, trials - done)
        idx = np.argsort(rng.random((c, pop.size)), axis=1)[:, :n_draw]
        means = pop[idx].mean(axis=1)
        hits += int(np.sum(np.abs(means - mu) > t * (1 + 1e-12)))
        done += c
    return _tail_report("hoeffding_wor", {"population_size": pop.size, "n_draw": n_draw, "t": t},
                        trials, hits / trials, bound, seed)


def check_hanson_wright(a, t, trials=10_000, seed=0, c0=HANSON_WRIGHT_C0):
    """Pr[|S - E S| > t] <= 2 exp(-c0 min(t^2/||v||_2^2, t/||v||_inf)), S = sum (a_i X_i)^2, v = a^2."""
    a = np.asarray(a, dtype=np.float64)
    v = a * a
    vinf = float(np.max(v)) if v.size else 0.0
    if vinf == 0:
        bound = 0.0
    else:
        bound = 2 * math.exp(-c0 * min(t * t / float(v @ v), t / vinf))
    rng = _rng.stream(seed, _rng.CHECK, 1)
    hits = 0
    chunk = max(1, 2_000_000 // max(a.size, 1))
    done = 0
    while done < trials:
        c = min(chunk, trials - done)
        s = (rng.standard_normal((c, a.size)) ** 2) @ v
        hits += int(np.sum(np.abs(s - v.sum()) > t))
        done += c
    return _tail_report("hanson_wright", {"dim": a.size, "t": t, "c0": c0},
                        trials, hits / trials, bound, seed, f"c0 = {c0}")


def check_matrix_chernoff_bags(ds, k, delta_frac, trials=10_000, seed=0):
    """Pr[lambda_min(sum_bag x x^T) <= (1 - delta) k lambda*] <= d' (e^-delta / (1-delta)^(1-delta))^(k lambda*/b2^2).

    The bag matrix is restricted to the span of the non-zero eigenvectors of
    the dataset's second-moment matrix, whose dimension is ``d'``.
    """
    if not 0 < delta_frac < 1:
        raise ValueError("delta_frac must lie in (0, 1)")
    stats = compute_stats(ds)
    evals, evecs = np.linalg.eigh(stats.q)
    basis = evecs[:, evals > EIG_RTOL * evals[-1]]
    dp = basis.shape[1]
    lam = stats.lambda_star
    base = math.exp(-delta_frac) / (1 - delta_frac) ** (1 - delta_frac)
    bound = dp * base ** (k * lam / ds.b2 ** 2)
    proj = ds.features @ basis
    rng = _rng.stream(seed, _rng.CHECK, 2)
    threshold = (1 - delta_frac) * k * lam
    hits = 0
    chunk = max(1, 200_000 // k)
    done = 0
    while done < trials:
        c = min(chunk, trials - done)
        bags = np.stack([rng.choice(ds.n, size=k, replace=False) for _ in range(c)])
        xb = proj[bags]
        mats = np.einsum("bki,bkj->bij", xb, xb)
        lmin = np.linalg.eigvalsh(mats)[:, 0]
        hits += int(np.sum(lmin <= threshold))
        done += c
    return _tail_report("matrix_chernoff_bags",
                        {"k": k, "delta_frac": delta_frac, "d_prime": dp, "lambda_star": lam},
                        trials, hits / trials, bound, seed)


def check_bag_residual(ds, ks=(50, 500), trials=1000, seed=0):
    """Frequency of bags whose least-squares residual falls below k gamma / 4, at two bag sizes.

    Passes when the frequency does not grow with k and is at most 5% at the
    larger size. Skipped when gamma is 0 or exceeds b1^2 / 3.
    """
    gamma = compute_stats(ds).gamma
    params = {"ks": list(ks), "gamma": gamma}
    if gamma <= 1e-12 or gamma > ds.b1 ** 2 / 3:
        return CheckReport("bag_residual", params, 0, math.nan, TREND_CAP, math.nan, SKIP, seed,
                           f"hypothesis violated: gamma = {gamma:.3g} not in (0, b1^2/3]")
    freqs = []
    for idx, k in enumerate(ks):
        rng = _rng.stream(seed, _rng.CHECK, 3, idx)
        low = 0
        for _ in range(trials):
            bag = rng.choice(ds.n, size=k, replace=False)
            low += bag_conditional(ds.features[bag], ds.labels[bag]).variance < k * gamma / 4
        freqs.append(low / trials)
    return _trend_report("bag_residual", params, trials, freqs, seed)


def _model_b3(model):
    return model.b3 if math.isfinite(model.b3) else float(np.linalg.norm(model.r))


def check_lba_utility(ds, m, k, model, theta, trials=200, seed=0):
    """LBA loss of a fixed linear model lies in [(1-2theta) k m omega, (1+2theta) k m omega].

    ``omega`` is the model's instance mean squared error. The failure
    probability bound is 4 exp(-m theta^2 omega^2 / (2 B^4)) with B = b1 + b2 b3.
    """
    omega = mse(ds, model)
    big_b = ds.b1 + ds.b2 * _model_b3(model)
    bound = 4 * math.exp(-m * theta * theta * omega * omega / (2 * big_b ** 4))
    centre = k * m * omega
    slack = 1e-12 * k * m * ds.b1 ** 2
    hits = 0
    losses = []
    for tr in range(trials):
        val = lba_loss(wtd_lba(ds, m, k, _rng.child_seed(seed, _rng.CHECK, 4, tr)), model)
        losses.append(val)
        hits += not ((1 - 2 * theta) * centre - slack <= val <= (1 + 2 * theta) * centre + slack)
    return _tail_report("lba_utility", {"m": m, "k": k, "theta": theta, "omega": omega, "B": big_b},
                        trials, hits / trials, bound, seed,
                        extra={"mean_ratio": float(np.mean(losses) / centre) if centre else math.nan})


def check_llp_decomposition(ds, ms=(500, 5000), k=4, rho=0.5, model=None, theta_rel=0.1,
                            trials=200, seed=0):
    """|val_LLP / mk - (rho + val / n)| <= theta with theta = theta_rel (rho + val / n), at two m.

    Passes when the deviation frequency does not grow with m and is at most
    5% at the larger m.
    """
    if model is None:
        model = init_mlp(ds.d, (8, 4, 1), _rng.child_seed(seed, _rng.CHECK, 5))
    target = rho + mse(ds, model)
    theta = theta_rel * target
    freqs = []
    for idx, m in enumerate(ms):
        hits = 0
        for tr in range(trials):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                llp = noisy_wtd_llp(ds, m, k, float(rho), _rng.child_seed(seed, _rng.CHECK, 6, idx, tr))
            hits += abs(llp_loss(llp, model) / (m * k) - target) > theta
        freqs.append(hits / trials)
    params = {"ms": list(ms), "k": k, "rho": rho, "target": target, "theta": theta}
    return _trend_report("llp_decomposition", params, trials, freqs, seed)


def admissible_pairs(count, seed):
    """Random (mu0, sigma0, mu1, sigma1, theta) tuples meeting the deviation-bound hypotheses."""
    rng = _rng.stream(seed, _rng.CHECK, 7)
    sigma0 = np.exp(rng.uniform(-2, 2, count))
    ratio = rng.uniform(0.5, 1.5, count)
    # a share of exactly equal variances and of zero shifts exercises the edge branches
    ratio[rng.random(count) < 0.1] = 1.0
    kappa = np.maximum(2 * np.abs(ratio - 1), 1e-12)
    shift = rng.uniform(0, 1, count) * np.minimum(np.sqrt(kappa), 0.999)
    shift[rng.random(count) < 0.1] = 0.0
    mu0 = rng.uniform(-3, 3, count)
    sign = np.where(rng.random(count) < 0.5, -1.0, 1.0)
    mu1 = mu0 + sign * shift * sigma0
    theta = rng.uniform(0.01, 0.99, count)
    return list(zip(mu0, sigma0, mu1, sigma0 * np.sqrt(ratio), theta))


def check_gaussian_deviation(trials=10_000, seed=0):
    """Exact divergence at the bound's eps never exceeds the bound's delta on admissible pairs."""
    cases = [p + (None,) for p in admissible_pairs(trials, seed)]
    # the variance-ratio edge: (sigma1/sigma0)^2 = 2 with kappa = 1
    cases += [(0.0, 1.0, 0.0, math.sqrt(2.0), 0.5, 1.0),
              (0.0, 1.0, 0.5, math.sqrt(2.0), 0.5, 1.0)]
    checked = violations = 0
    worst = -math.inf
    for mu0, s0, mu1, s1, th, kap in cases:
        b = gaussian_deviation_bound(mu0, s0, mu1, s1, th, kap)
        if not b.applicable:
            continue
        checked += 1
        exact = hockey_stick_gauss(mu0, s0, mu1, s1, b.eps_bound)
        worst = max(worst, exact - b.delta_bound)
        violations += exact > b.delta_bound + BOUND_ATOL
    return CheckReport("gaussian_deviation", {"pairs": checked}, checked, violations, 0.0,
                       BOUND_ATOL, PASS if violations == 0 else FAIL, seed,
                       f"largest exact - bound = {worst:.3g}", {"max_excess": worst})


SUITES = ("concentration", "utility", "privacy", "all")


def run_suite(name, seed=0, ds=None, scale=1.0):
    """Run a named suite; ``scale`` shrinks trial counts for quick runs."""
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
    ds = reference_dataset() if ds is None else ds

    def n(trials):
        return max(10, int(trials * scale))

    reports = []
    if name in ("concentration", "all"):
        pop = _rng.stream(REFERENCE["seed"], _rng.CHECK, 99).uniform(0, 1, 1000)
        reports.append(check_hoeffding_wor(pop, 100, 0.1, n(10_000), seed))
        reports.append(check_hanson_wright(np.ones(100), 50.0, n(10_000), seed))
        reports.append(check_matrix_chernoff_bags(ds, 200, 0.5, n(10_000), seed))
        reports.append(check_bag_residual(ds, (50, 500), n(1000), seed))
    if name in ("utility", "all"):
        best = compute_stats(ds).best_linear
        model = LinearModel(best, float(np.linalg.norm(best)))
        reports.append(check_lba_utility(ds, 2000, 10, model, 0.1, n(200), seed))
        reports.append(check_llp_decomposition(ds, (500, 5000), 4, 0.5, None, 0.1, n(200), seed))
    if name in ("privacy", "all"):
        reports.append(check_gaussian_deviation(n(10_000), seed))
    return reports


REPORT_COLUMNS = ("name", "parameters", "trials", "empirical", "bound", "margin", "verdict",
                  "seed", "note")


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, dict):
        return json.dumps(v, sort_keys=True)
    return str(v)


def save_reports(reports, path, header=()):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow([_cell(getattr(r, c)) for c in REPORT_COLUMNS])
