"""Bag-aggregation mechanisms: weighted LBA, noisy weighted LLP, and unit-weight baselines.

Randomness is keyed by an integer seed. Bag membership uses the substream
``(seed, BAGS)``, bag ``j``'s weights use ``(seed, WEIGHTS, j)`` and label
noise uses ``(seed, NOISE)``. The LBA and LLP mechanisms share these streams,
so with the same seed and an empty noise set they draw the same bags and
weights.
"""

import csv
import math
import os
import warnings
from dataclasses import dataclass

import numpy as np

from agglab import _rng


class CapacityError(ValueError):
    """Raised when ``m * k`` exceeds the number of available instances."""


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class BagPlan:
    """``m`` disjoint bags of ``k`` indices into a dataset of size ``n``.

    ``bags[j, r]`` is the index ``i_jr`` and ``weights[j, r]`` its weight.
    ``noise_set`` is the sorted set of indices whose labels were perturbed.
    """

    bags: np.ndarray
    weights: np.ndarray
    noise_set: np.ndarray
    n: int

    def __post_init__(self):
        bags = _frozen(self.bags, np.int64)
        weights = _frozen(self.weights, np.float64)
        noise = _frozen(self.noise_set, np.int64)
        if bags.ndim != 2 or bags.shape[0] < 1 or bags.shape[1] < 1:
            raise ValueError(f"bags must be a non-empty m x k array, got shape {bags.shape}")
        if weights.shape != bags.shape:
            raise ValueError(f"weights shape {weights.shape} != bags shape {bags.shape}")
        if not np.all(np.isfinite(weights)):
            raise ValueError("weights must be finite")
        flat = bags.ravel()
        if flat.size > self.n:
            raise CapacityError(f"m*k = {flat.size} exceeds n = {self.n}")
        if flat.min() < 0 or flat.max() >= self.n:
            raise ValueError("bag index out of range")
        if np.unique(flat).size != flat.size:
            raise ValueError("bags are not pairwise disjoint")
        if noise.ndim != 1:
            raise ValueError("noise_set must be 1-d")
        if noise.size and (noise.min() < 0 or noise.max() >= self.n):
            raise ValueError("noise_set index out of range")
        if noise.size > 1 and not np.all(np.diff(noise) > 0):
            raise ValueError("noise_set must be sorted and duplicate-free")
        object.__setattr__(self, "bags", bags)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "noise_set", noise)
        object.__setattr__(self, "n", int(self.n))

    @property
    def m(self):
        return self.bags.shape[0]

    @property
    def k(self):
        return self.bags.shape[1]

    @property
    def rho(self):
        return self.noise_set.size / self.n

    def noise_mask(self):
        """Boolean ``m x k`` array: is member ``(j, r)`` in the noise set."""
        return np.isin(self.bags, self.noise_set)

    def __eq__(self, other):
        if not isinstance(other, BagPlan):
            return NotImplemented
        return (self.n == other.n and np.array_equal(self.bags, other.bags)
                and np.array_equal(self.weights, other.weights)
                and np.array_equal(self.noise_set, other.noise_set))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class LbaDataset:
    agg_features: np.ndarray
    agg_labels: np.ndarray
    plan: BagPlan

    def __post_init__(self):
        object.__setattr__(self, "agg_features", _frozen(self.agg_features, np.float64))
        object.__setattr__(self, "agg_labels", _frozen(self.agg_labels, np.float64))
        m = self.plan.m
        if self.agg_features.ndim != 2 or self.agg_features.shape[0] != m:
            raise ValueError("agg_features must have one row per bag")
        if self.agg_labels.shape != (m,):
            raise ValueError("agg_labels must have one entry per bag")

    @property
    def m(self):
        return self.plan.m

    @property
    def d(self):
        return self.agg_features.shape[1]


@dataclass(frozen=True, eq=False)
class LlpDataset:
    """Per-bag member features and weights, with one aggregate label per bag.

    ``features[j, r]`` is the feature row of member ``i_jr``. Raw labels and
    the noise draws are not part of this value.
    """

    features: np.ndarray
    agg_labels: np.ndarray
    plan: BagPlan

    def __post_init__(self):
        object.__setattr__(self, "features", _frozen(self.features, np.float64))
        object.__setattr__(self, "agg_labels", _frozen(self.agg_labels, np.float64))
        m, k = self.plan.bags.shape
        if self.features.ndim != 3 or self.features.shape[:2] != (m, k):
            raise ValueError(f"features must have shape (m, k, d) = ({m}, {k}, d)")
        if self.agg_labels.shape != (m,):
            raise ValueError("agg_labels must have one entry per bag")

    @property
    def m(self):
        return self.plan.m

    @property
    def k(self):
        return self.plan.k

    @property
    def d(self):
        return self.features.shape[2]

    @property
    def weights(self):
        return self.plan.weights

    @property
    def members(self):
        return self.plan.bags

    def subset(self, bag_ids):
        """Bags ``bag_ids`` as a new LlpDataset (noise set kept as is)."""
        ids = np.asarray(bag_ids, dtype=np.int64)
        plan = BagPlan(self.plan.bags[ids], self.plan.weights[ids],
                       self.plan.noise_set, self.plan.n)
        return LlpDataset(self.features[ids], self.agg_labels[ids], plan)


def _check_capacity(n, m, k):
    if m < 1 or k < 1:
        raise ValueError(f"m and k must be positive, got m={m}, k={k}")
    if m * k > n:
        raise CapacityError(f"m*k = {m * k} exceeds n = {n} (m={m}, k={k})")


def sample_disjoint_bags(n, m, k, rng):
    """Uniform size-``m*k`` sample of ``range(n)`` without replacement, split into ``m`` bags."""
    _check_capacity(n, m, k)
    return rng.choice(n, size=m * k, replace=False).reshape(m, k)


def _bag_weights(seed, m, k, unit):
    if unit:
        return np.ones((m, k))
    return np.stack([_rng.stream(seed, _rng.WEIGHTS, j).standard_normal(k) for j in range(m)])


def _make_plan(n, m, k, seed, unit_weights, noise_set=()):
    bags = sample_disjoint_bags(n, m, k, _rng.stream(seed, _rng.BAGS))
    return BagPlan(bags, _bag_weights(seed, m, k, unit_weights), np.asarray(noise_set, np.int64), n)


def lba_from_plan(ds, plan):
    """Weighted aggregates of ``ds`` over the bags of ``plan``."""
    if plan.n != ds.n:
        raise ValueError(f"plan is for n={plan.n}, dataset has n={ds.n}")
    x = np.einsum("jr,jrd->jd", plan.weights, ds.features[plan.bags])
    y = np.einsum("jr,jr->j", plan.weights, ds.labels[plan.bags])
    return LbaDataset(x, y, plan)


def llp_from_plan(ds, plan, y_tilde):
    """LLP output of ``ds`` over ``plan`` with intermediate labels ``y_tilde``."""
    if plan.n != ds.n or len(y_tilde) != ds.n:
        raise ValueError("plan, dataset and intermediate labels disagree on n")
    y_tilde = np.asarray(y_tilde, dtype=np.float64)
    agg = np.einsum("jr,jr->j", plan.weights, y_tilde[plan.bags])
    return LlpDataset(ds.features[plan.bags], agg, plan)


def wtd_lba(ds, m, k, seed):
    """Release ``m`` bag aggregates with iid N(0, 1) weights, plus the bags themselves."""
    _check_capacity(ds.n, m, k)
    return lba_from_plan(ds, _make_plan(ds.n, m, k, seed, unit_weights=False))


def naive_lba(ds, m, k, seed):
    """Unit-weight LBA: plain bag sums of features and labels."""
    _check_capacity(ds.n, m, k)
    return lba_from_plan(ds, _make_plan(ds.n, m, k, seed, unit_weights=True))


def resolve_noise_set(n, noise, seed):
    """Sorted noise index set from an explicit index collection or a fraction ``rho``."""
    if noise is None:
        return np.zeros(0, dtype=np.int64)
    if isinstance(noise, (float, np.floating)):
        rho = float(noise)
        if not 0.0 <= rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {rho}")
        size = math.ceil(rho * n)
        perm = _rng.stream(seed, _rng.NOISE_SET).permutation(n)
        return np.sort(perm[:size])
    idx = np.unique(np.asarray(noise, dtype=np.int64))
    if idx.size and (idx[0] < 0 or idx[-1] >= n):
        raise ValueError("noise_set index out of range")
    return idx


def noisy_wtd_llp(ds, m, k, noise, seed, audit_mode=False):
    """Add N(0, 1) noise to labels in the noise set, then release weighted LLP bags.

    ``noise`` is either a fraction ``rho`` in [0, 1] (float) or an explicit
    collection of indices. With ``audit_mode`` the intermediate labels are
    returned as well, as ``(y_tilde, llp)``.
    """
    _check_capacity(ds.n, m, k)
    if m * k > ds.n / 2:
        warnings.warn(f"m*k = {m * k} > n/2 = {ds.n / 2}; the mechanism assumes n >> m*k",
                      stacklevel=2)
    noise_set = resolve_noise_set(ds.n, noise, seed)
    y_tilde = ds.labels.copy()
    if noise_set.size:
        g = _rng.stream(seed, _rng.NOISE).standard_normal(ds.n)
        y_tilde[noise_set] += g[noise_set]
    plan = _make_plan(ds.n, m, k, seed, unit_weights=False, noise_set=noise_set)
    llp = llp_from_plan(ds, plan, y_tilde)
    return (y_tilde, llp) if audit_mode else llp


def naive_llp(ds, m, k, seed):
    """Unit-weight, noise-free LLP: each bag's label is the plain label sum."""
    _check_capacity(ds.n, m, k)
    plan = _make_plan(ds.n, m, k, seed, unit_weights=True)
    return llp_from_plan(ds, plan, ds.labels)


# Serialization: a directory with meta.txt, plan.csv and agg.csv (plus
# features.csv for LLP, holding the released member rows).

def _write_plan(plan, path, kind, d):
    with open(os.path.join(path, "meta.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"kind={kind}\nn={plan.n}\nm={plan.m}\nk={plan.k}\nd={d}\n")
        fh.write("noise_set=" + " ".join(str(int(i)) for i in plan.noise_set) + "\n")
    mask = plan.noise_mask()
    with open(os.path.join(path, "plan.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["j", "r", "index", "weight", "in_noise_set"])
        for j in range(plan.m):
            for r in range(plan.k):
                w.writerow([j, r, int(plan.bags[j, r]), repr(float(plan.weights[j, r])),
                            int(mask[j, r])])


def _read_plan(path):
    meta = {}
    with open(os.path.join(path, "meta.txt"), encoding="utf-8") as fh:
        for line in fh:
            key, _, value = line.rstrip("\n").partition("=")
            if key:
                meta[key] = value
    n, m, k = int(meta["n"]), int(meta["m"]), int(meta["k"])
    bags = np.zeros((m, k), dtype=np.int64)
    weights = np.zeros((m, k))
    with open(os.path.join(path, "plan.csv"), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for j, r, idx, wt, _ in reader:
            bags[int(j), int(r)] = int(idx)
            weights[int(j), int(r)] = float(wt)
    noise = np.array([int(t) for t in meta["noise_set"].split()], dtype=np.int64)
    return BagPlan(bags, weights, noise, n), meta


def save_lba(lba, path):
    os.makedirs(path, exist_ok=True)
    _write_plan(lba.plan, path, "lba", lba.d)
    with open(os.path.join(path, "agg.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["j", "y_bar"] + [f"x_bar{i}" for i in range(lba.d)])
        for j in range(lba.m):
            w.writerow([j, repr(float(lba.agg_labels[j]))]
                       + [repr(float(v)) for v in lba.agg_features[j]])


def load_lba(path):
    plan, meta = _read_plan(path)
    if meta["kind"] != "lba":
        raise ValueError(f"{path} holds a {meta['kind']} release, not lba")
    body = np.loadtxt(os.path.join(path, "agg.csv"), delimiter=",", skiprows=1, ndmin=2)
    return LbaDataset(body[:, 2:], body[:, 1], plan)


def save_llp(llp, path):
    os.makedirs(path, exist_ok=True)
    _write_plan(llp.plan, path, "llp", llp.d)
    with open(os.path.join(path, "agg.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["j", "y_bar"])
        for j in range(llp.m):
            w.writerow([j, repr(float(llp.agg_labels[j]))])
    with open(os.path.join(path, "features.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["j", "r"] + [f"x{i}" for i in range(llp.d)])
        for j in range(llp.m):
            for r in range(llp.k):
                w.writerow([j, r] + [repr(float(v)) for v in llp.features[j, r]])


def load_llp(path):
    plan, meta = _read_plan(path)
    if meta["kind"] != "llp":
        raise ValueError(f"{path} holds a {meta['kind']} release, not llp")
    agg = np.loadtxt(os.path.join(path, "agg.csv"), delimiter=",", skiprows=1, ndmin=2)
    feats = np.loadtxt(os.path.join(path, "features.csv"), delimiter=",", skiprows=1, ndmin=2)
    d = int(meta["d"])
    return LlpDataset(feats[:, 2:].reshape(plan.m, plan.k, d), agg[:, 1], plan)
