"""Numerical (eps, delta) label-DP audits built on the conditional Gaussian law of bag labels.

Given a bag with feature matrix X and labels y and Gaussian weights w, the
released label aggregate w.y conditioned on the released feature aggregate
z = w.X is Gaussian. With the thin SVD X = U S V^T of rank d', its mean is
sum_i (U^T w)_i (U^T y)_i and its variance is the least-squares residual
||(I - U U^T) y||^2. An audit samples conditionings, evaluates the exact
hockey-stick divergence between the conditional laws under neighboring label
vectors, and averages.
"""

import csv
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.special import ndtr

from agglab import _rng
from agglab.aggregate import naive_lba, naive_llp, resolve_noise_set

RANK_RTOL = 1e-10
# A bag residual below this fraction of ||y|| is treated as exactly zero.
DEGENERATE_RTOL = 1e-10
# Floating-point slack when comparing an exact divergence against a bound.
BOUND_ATOL = 1e-12
DEFAULT_N_COND = 2000


@dataclass(frozen=True, eq=False)
class BagConditional:
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray
    d_prime: int
    y_tilde: np.ndarray
    mean_coeffs: np.ndarray
    variance: float

    def mean(self, z):
        """Conditional mean given the feature aggregate ``z = w @ X``."""
        z_tilde = np.asarray(z) @ self.vt[:self.d_prime].T
        return float(z_tilde @ self.mean_coeffs)

    def mean_from_weights(self, w):
        return float((np.asarray(w) @ self.u[:, :self.d_prime]) @ self.y_tilde)


def _rank(s):
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > RANK_RTOL * s[0]))


def bag_conditional(x, y):
    """Conditional law of ``w @ y`` given ``w @ x`` for iid N(0, 1) weights ``w``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("bag features and labels must be finite")
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    dp = _rank(s)
    ur = u[:, :dp]
    y_tilde = ur.T @ y
    resid = y - ur @ y_tilde
    return BagConditional(u=u, s=s, vt=vt, d_prime=dp, y_tilde=y_tilde,
                          mean_coeffs=y_tilde / s[:dp], variance=float(resid @ resid))


def _interval_prob(lo, hi, mu, sigma):
    # P(lo < X < hi) for X ~ N(mu, sigma^2), using whichever tail keeps precision.
    a = (lo - mu) / sigma
    b = (hi - mu) / sigma
    return np.where(a > 0, ndtr(-a) - ndtr(-b), ndtr(b) - ndtr(a))


def hockey_stick_gauss(mu0, sigma0, mu1, sigma1, eps):
    """``sup_S P1(S) - e^eps P0(S)`` for P0 = N(mu0, sigma0^2), P1 = N(mu1, sigma1^2).

    ``eps`` may be a scalar or an array. A zero sigma is a point mass.
    """
    vals = (mu0, sigma0, mu1, sigma1)
    if not all(math.isfinite(v) for v in vals) or not np.all(np.isfinite(eps)):
        raise ValueError(f"non-finite input to hockey_stick_gauss: {vals}, eps={eps}")
    if sigma0 < 0 or sigma1 < 0:
        raise ValueError("standard deviations must be non-negative")
    eps_arr = np.asarray(eps, dtype=np.float64)
    if np.any(eps_arr < 0):
        raise ValueError("eps must be non-negative")
    scalar = eps_arr.ndim == 0
    eps_arr = np.atleast_1d(eps_arr)
    out = _hockey_stick(float(mu0), float(sigma0), float(mu1), float(sigma1), eps_arr)
    out = np.clip(out, 0.0, 1.0)
    return float(out[0]) if scalar else out


def _hockey_stick(mu0, s0, mu1, s1, eps):
    if s0 == 0 and s1 == 0:
        differ = abs(mu1 - mu0) > 1e-12 * max(1.0, abs(mu0), abs(mu1))
        return np.full(eps.shape, 1.0 if differ else 0.0)
    if s0 == 0 or s1 == 0:
        # a point mass against a continuous law: the singleton (or its
        # complement) has probability 1 under one and 0 under the other
        return np.ones(eps.shape)
    if s0 == s1:
        delta = abs(mu1 - mu0)
        if delta == 0:
            return np.zeros(eps.shape)
        h = delta / (2 * s0)
        g = eps * s0 / delta
        return ndtr(h - g) - np.exp(eps) * ndtr(-h - g)

    # log p1/p0 - eps = a x^2 + b x + c; the privacy-loss region is where it is positive
    a = 0.5 / s0 ** 2 - 0.5 / s1 ** 2
    b = mu1 / s1 ** 2 - mu0 / s0 ** 2
    c = mu0 ** 2 / (2 * s0 ** 2) - mu1 ** 2 / (2 * s1 ** 2) + math.log(s0 / s1) - eps
    disc = b * b - 4 * a * c
    out = np.empty(eps.shape)
    neg = disc <= 0
    # no real roots: the region is all of R when a > 0, empty when a < 0
    out[neg] = (1.0 - np.exp(eps[neg])) if a > 0 else 0.0
    pos = ~neg
    if np.any(pos):
        sq = np.sqrt(disc[pos])
        cc = c[pos]
        if b != 0:
            q = -0.5 * (b + math.copysign(1.0, b) * sq)
            r1, r2 = q / a, cc / q
        else:
            r1, r2 = -sq / (2 * a), sq / (2 * a)
        lo, hi = np.minimum(r1, r2), np.maximum(r1, r2)
        e = np.exp(eps[pos])
        p1_in = _interval_prob(lo, hi, mu1, s1)
        p0_in = _interval_prob(lo, hi, mu0, s0)
        if a < 0:
            out[pos] = p1_in - e * p0_in
        else:
            out[pos] = (1.0 - p1_in) - e * (1.0 - p0_in)
    return out


@dataclass(frozen=True)
class DeviationBound:
    applicable: bool
    eps_bound: float
    delta_bound: float
    kappa: float
    zeta: float
    reason: str = ""


def gaussian_deviation_bound(mu0, sigma0, mu1, sigma1, theta, kappa=None, zeta=None):
    """(eps, delta) bound for N(mu0, sigma0^2) vs N(mu1, sigma1^2) under small perturbations.

    With r = (sigma1/sigma0)^2 and shift s = |mu1 - mu0| / sigma0, the bound
    applies when 1/2 <= r <= 1 + kappa <= 2 and s <= sqrt(kappa)/zeta < 1,
    and then eps = 16 (sqrt(kappa)/zeta + theta/zeta + kappa) and
    delta = exp(-theta^2 / (4 kappa)). By default kappa = max(2|r - 1|, 1e-12)
    and zeta = sqrt(kappa)/s (infinite when there is no shift).
    """
    def inapplicable(reason, kap=math.nan, zet=math.nan):
        return DeviationBound(False, math.inf, 1.0, kap, zet, reason)

    if not 0 < theta < 1:
        return inapplicable(f"theta={theta} outside (0, 1)")
    if not sigma0 > 0:
        return inapplicable("sigma0 must be positive")
    ratio = (sigma1 / sigma0) ** 2
    shift = abs(mu1 - mu0) / sigma0
    kap = max(2 * abs(ratio - 1), 1e-12) if kappa is None else float(kappa)
    if zeta is None:
        zet = math.sqrt(kap) / shift if shift > 0 else math.inf
    else:
        zet = float(zeta)
    if not (0.5 <= ratio <= 1 + kap * (1 + 1e-12) and 1 + kap <= 2):
        return inapplicable(f"variance ratio {ratio:.6g} outside [1/2, 1 + kappa] or kappa > 1",
                            kap, zet)
    cap = math.sqrt(kap) / zet
    if not (shift <= cap * (1 + 1e-12) and cap < 1):
        return inapplicable(f"mean shift {shift:.6g} exceeds sqrt(kappa)/zeta or it is >= 1",
                            kap, zet)
    eps_b = 16 * (cap + theta / zet + kap)
    delta_b = math.exp(-theta * theta / (4 * kap))
    return DeviationBound(True, eps_b, delta_b, kap, zet)


def deviation_bound_at(mu0, sigma0, mu1, sigma1, eps):
    """Smallest closed-form deviation delta bound certified at privacy level ``eps``.

    Picks theta so that the bound's eps equals ``eps`` (clipped into (0, 1));
    a smaller bound eps still certifies ``eps`` because the divergence is
    non-increasing in eps. Returns ``(delta, applicable)``.
    """
    base = gaussian_deviation_bound(mu0, sigma0, mu1, sigma1, 0.5)
    if not base.applicable:
        return 1.0, False
    cap = math.sqrt(base.kappa) / base.zeta
    slack = eps / 16 - cap - base.kappa
    if slack <= 0:
        return 1.0, False
    theta = slack * base.zeta if math.isfinite(base.zeta) else 1.0
    theta = min(theta, math.nextafter(1.0, 0.0))
    b = gaussian_deviation_bound(mu0, sigma0, mu1, sigma1, theta, base.kappa, base.zeta)
    if not b.applicable or b.eps_bound > eps * (1 + 1e-12):
        return 1.0, False
    return b.delta_bound, True


@dataclass(frozen=True, eq=False)
class PrivacyCurve:
    eps_grid: np.ndarray
    delta_hat: np.ndarray
    mc_stderr: np.ndarray
    analytic_ref: np.ndarray
    applicable: np.ndarray
    metadata: dict = field(default_factory=dict)

    def delta_at(self, eps):
        idx = np.flatnonzero(np.isclose(self.eps_grid, eps))
        if not idx.size:
            raise KeyError(f"eps={eps} not on the grid")
        return float(self.delta_hat[idx[0]]), float(self.mc_stderr[idx[0]])


def _eps_grid(eps_grid):
    grid = np.asarray(eps_grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0 or np.any(grid < 0) or np.any(np.diff(grid) <= 0):
        raise ValueError("eps_grid must be a non-empty ascending list of non-negative values")
    return grid


def _resolve_perturb(ds, perturb):
    if perturb is None:
        i_star, y_new = 0, None
    elif np.isscalar(perturb):
        i_star, y_new = int(perturb), None
    else:
        i_star, y_new = int(perturb[0]), perturb[1]
    if not 0 <= i_star < ds.n:
        raise ValueError(f"perturbed index {i_star} out of range")
    if y_new is None:
        y_new = float(np.clip(-ds.labels[i_star], -ds.b1, ds.b1))
    if abs(y_new) > ds.b1 * (1 + 1e-12):
        raise ValueError(f"perturbed label {y_new} exceeds b1 = {ds.b1}")
    return i_star, float(y_new)


def _bag_with(n, k, i_star, rng):
    others = rng.choice(n - 1, size=k - 1, replace=False)
    others = others + (others >= i_star)
    return np.concatenate([[i_star], others])


def _mean_stderr(rows):
    rows = np.asarray(rows)
    mean = rows.mean(axis=0)
    se = rows.std(axis=0, ddof=1) / math.sqrt(rows.shape[0]) if rows.shape[0] > 1 else np.zeros_like(mean)
    return mean, se


def audit_wtd_lba(ds, k, perturb=None, eps_grid=(0.5, 1.0, 2.0), n_cond=DEFAULT_N_COND, seed=0):
    """Audit weighted LBA for a single-label change at index ``i*``.

    Each conditioning draws a bag containing ``i*`` (``i*`` plus a uniform
    ``(k-1)``-subset of the rest) and a weight vector, then evaluates the
    exact divergence between the two conditional label laws. The curve is
    the larger of the two directional averages.
    """
    grid = _eps_grid(eps_grid)
    if not 1 <= k <= ds.n:
        raise ValueError(f"need 1 <= k <= n, got k={k}")
    i_star, y_new = _resolve_perturb(ds, perturb)
    t = y_new - ds.labels[i_star]
    fwd = np.empty((n_cond, grid.size))
    bwd = np.empty((n_cond, grid.size))
    ref_f = np.empty((n_cond, grid.size))
    ref_b = np.empty((n_cond, grid.size))
    app = np.zeros(grid.size)
    degenerate = 0
    violations = 0
    for c in range(n_cond):
        rng = _rng.stream(seed, _rng.AUDIT, c)
        bag = _bag_with(ds.n, k, i_star, rng)
        w = rng.standard_normal(k)
        x, y = ds.features[bag], ds.labels[bag]
        bc = bag_conditional(x, y)
        ur = bc.u[:, :bc.d_prime]
        wt = w @ ur
        mu0 = float(wt @ bc.y_tilde)
        var0 = bc.variance
        # labels differ only in slot 0 of the bag
        mu1 = mu0 + t * float(wt @ ur[0])
        e0 = -ur @ ur[0]
        e0[0] += 1.0
        res1 = (y - ur @ bc.y_tilde) + t * e0
        var1 = float(res1 @ res1)
        scale = max(float(y @ y), y_new * y_new, 1e-300)
        if var0 <= DEGENERATE_RTOL ** 2 * scale:
            var0 = 0.0
        if var1 <= DEGENERATE_RTOL ** 2 * scale:
            var1 = 0.0
        if var0 == 0.0 or var1 == 0.0:
            degenerate += 1
        s0, s1 = math.sqrt(var0), math.sqrt(var1)
        fwd[c] = hockey_stick_gauss(mu0, s0, mu1, s1, grid)
        bwd[c] = hockey_stick_gauss(mu1, s1, mu0, s0, grid)
        for g, eps in enumerate(grid):
            rf, okf = deviation_bound_at(mu0, s0, mu1, s1, eps)
            rb, okb = deviation_bound_at(mu1, s1, mu0, s0, eps)
            ref_f[c, g], ref_b[c, g] = rf, rb
            app[g] += okf and okb
            violations += (fwd[c, g] > rf + BOUND_ATOL) + (bwd[c, g] > rb + BOUND_ATOL)
    return _assemble(grid, fwd, bwd, ref_f, ref_b, app / n_cond, {
        "mechanism": "wtd-lba", "n": ds.n, "k": k, "perturbed_index": i_star,
        "new_label": y_new, "n_cond": n_cond, "seed": seed,
        "degenerate_conditionings": degenerate, "bound_violations": int(violations),
    })


def _assemble(grid, fwd, bwd, ref_f, ref_b, app_frac, meta, weight=1.0):
    mf, sf = _mean_stderr(fwd)
    mb, sb = _mean_stderr(bwd)
    use_f = mf >= mb
    delta = np.where(use_f, mf, mb) * weight
    se = np.where(use_f, sf, sb) * weight
    ref = np.maximum(ref_f.mean(axis=0), ref_b.mean(axis=0)) * weight
    meta = dict(meta, applicable_fraction=[float(v) for v in app_frac])
    return PrivacyCurve(grid, np.clip(delta, 0, 1), se, np.minimum(ref, 1.0),
                        app_frac >= 1.0, meta)


def audit_noisy_llp(ds, m, k, rho, perturb=None, eps_grid=(0.5, 1.0, 2.0),
                    n_cond=DEFAULT_N_COND, seed=0):
    """Audit noisy weighted LLP for a single-label change at index ``i*``.

    ``i*`` lands in a bag with probability ``mk/n``; otherwise the release
    does not depend on its label. Given membership and the bag's weights, the
    aggregate label is Gaussian with variance ``sum_{noisy r} w_r^2`` under
    both label vectors and means that differ by ``w_{i*} (y' - y)``. The
    estimate is ``(mk/n)`` times the average divergence over in-bag
    conditionings, where the other members are drawn uniformly and the noise
    set is the one the mechanism would use with the same seed.
    """
    grid = _eps_grid(eps_grid)
    if m * k > ds.n:
        raise ValueError(f"m*k = {m * k} exceeds n = {ds.n}")
    i_star, y_new = _resolve_perturb(ds, perturb)
    t = y_new - ds.labels[i_star]
    noise_set = resolve_noise_set(ds.n, float(rho) if np.isscalar(rho) else rho, seed)
    in_noise = np.zeros(ds.n, dtype=bool)
    in_noise[noise_set] = True
    member = m * k / ds.n
    vals = np.empty((n_cond, grid.size))
    refs = np.empty((n_cond, grid.size))
    app = np.zeros(grid.size)
    violations = 0
    for c in range(n_cond):
        rng = _rng.stream(seed, _rng.AUDIT, c)
        bag = _bag_with(ds.n, k, i_star, rng)
        w = rng.standard_normal(k)
        sigma = math.sqrt(float(np.sum(w[in_noise[bag]] ** 2)))
        shift = w[0] * t
        vals[c] = hockey_stick_gauss(0.0, sigma, shift, sigma, grid)
        for g, eps in enumerate(grid):
            refs[c, g], ok = deviation_bound_at(0.0, sigma, shift, sigma, eps)
            app[g] += ok
            violations += vals[c, g] > refs[c, g] + BOUND_ATOL
    return _assemble(grid, vals, vals, refs, refs, app / n_cond, {
        "mechanism": "noisy-wtd-llp", "n": ds.n, "m": m, "k": k, "rho": len(noise_set) / ds.n,
        "perturbed_index": i_star, "new_label": y_new, "i_star_in_noise_set": bool(in_noise[i_star]),
        "membership_probability": member, "n_cond": n_cond, "seed": seed,
        "bound_violations": int(violations),
    }, weight=member)


def naive_lower_bound(n, m, k):
    """delta floor ``mk/n`` of the unit-weight mechanisms, as an exact fraction."""
    if m * k > n:
        raise ValueError(f"m*k = {m * k} exceeds n = {n}")
    return Fraction(m * k, n)


def naive_membership_frequency(ds, m, k, index=0, trials=10_000, seed=0, mechanism="naive-lba"):
    """Fraction of unit-weight releases whose bags contain ``index``.

    Whenever ``index`` is in a bag, changing its label changes that bag's
    label sum, so this frequency is an empirical lower bound on delta at
    every eps.
    """
    run = {"naive-lba": naive_lba, "naive-llp": naive_llp}[mechanism]
    hits = 0
    for tr in range(trials):
        release = run(ds, m, k, _rng.child_seed(seed, _rng.AUDIT, tr))
        hits += bool(np.any(release.plan.bags == index))
    return hits / trials


def save_curve(curve, stem, header=()):
    """Write ``<stem>.csv`` and the JSON metadata sidecar ``<stem>.json``."""
    with open(f"{stem}.csv", "w", newline="", encoding="utf-8") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["eps", "delta_hat", "stderr", "analytic_ref", "applicable_flag"])
        for row in zip(curve.eps_grid, curve.delta_hat, curve.mc_stderr,
                       curve.analytic_ref, curve.applicable):
            w.writerow([repr(float(v)) for v in row[:4]] + [int(row[4])])
    with open(f"{stem}.json", "w", encoding="utf-8") as fh:
        json.dump(curve.metadata, fh, indent=2, sort_keys=True)
        fh.write("\n")
