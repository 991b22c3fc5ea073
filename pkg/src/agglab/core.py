"""Datasets, ingestion, synthesis and dataset-level statistics."""

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from agglab import _rng

# Slack on the b1/b2 certificates so that rescaled rows stay admissible.
_BOUND_RTOL = 1e-12
# Eigenvalues below this fraction of the largest count as zero.
EIG_RTOL = 1e-9
# Realized gamma of a synthetic dataset must land this close to the target.
SYNTH_GAMMA_RTOL = 0.05


class DatasetError(ValueError):
    """Raised for malformed or degenerate datasets."""


class InfeasibleTargetError(DatasetError):
    """Raised when a synthetic dataset cannot reach the requested gamma."""


def _frozen(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labeled feature vectors with certified bounds.

    ``b1`` bounds every ``|y_i|`` and ``b2`` bounds every ``||x_i||_2``.
    When ``has_bias_column`` is set, the last feature of every row is 1 and
    it counts towards the ``b2`` bound.
    """

    features: np.ndarray
    labels: np.ndarray
    b1: float
    b2: float
    has_bias_column: bool = False

    def __post_init__(self):
        x = _frozen(self.features)
        y = _frozen(self.labels)
        if x.ndim != 2:
            raise DatasetError(f"features must be 2-d, got shape {x.shape}")
        n, d = x.shape
        if n < 1 or d < 1:
            raise DatasetError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
        if y.shape != (n,):
            raise DatasetError(f"labels shape {y.shape} does not match n={n}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DatasetError("features and labels must be finite")
        if not (self.b1 > 0 and self.b2 > 0):
            raise DatasetError(f"b1 and b2 must be positive, got {self.b1}, {self.b2}")
        if np.max(np.abs(y)) > self.b1 * (1 + _BOUND_RTOL):
            raise DatasetError(f"label bound violated: max |y| = {np.max(np.abs(y))} > b1 = {self.b1}")
        norms = np.linalg.norm(x, axis=1)
        if np.max(norms) > self.b2 * (1 + _BOUND_RTOL):
            raise DatasetError(f"feature bound violated: max ||x|| = {np.max(norms)} > b2 = {self.b2}")
        if self.has_bias_column and not np.all(x[:, -1] == 1.0):
            raise DatasetError("has_bias_column set but last column is not all ones")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "b1", float(self.b1))
        object.__setattr__(self, "b2", float(self.b2))

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    def subset(self, indices):
        """Rows ``indices`` as a new Dataset with the same certificates."""
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.b1, self.b2,
                       self.has_bias_column)

    def with_labels(self, labels, b1=None):
        return Dataset(self.features, labels, self.b1 if b1 is None else b1, self.b2,
                       self.has_bias_column)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.b1 == other.b1 and self.b2 == other.b2
                and self.has_bias_column == other.has_bias_column
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))

    __hash__ = None


@dataclass(frozen=True)
class DatasetStats:
    q: np.ndarray
    lambda_star: float
    gamma: float
    opt_residual: float
    best_linear: np.ndarray
    rank: int = field(default=0)


def compute_stats(ds):
    """Second-moment matrix, its least non-zero eigenvalue, and the best linear fit.

    ``gamma`` is the minimum mean squared residual of a homogeneous linear
    regressor; ``best_linear`` is the minimum-norm minimizer.
    """
    x, y = ds.features, ds.labels
    n = ds.n
    q = (x.T @ x) / n
    q = 0.5 * (q + q.T)
    eig = np.linalg.eigvalsh(q)
    lam_max = eig[-1]
    if not lam_max > 0:
        raise DatasetError("degenerate dataset: all feature vectors are zero")
    kept = eig[eig > EIG_RTOL * lam_max]
    r, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid = y - x @ r
    opt = float(resid @ resid)
    return DatasetStats(q=_frozen(q), lambda_star=float(kept[0]), gamma=opt / n,
                        opt_residual=opt, best_linear=_frozen(r), rank=int(kept.size))


def synth_dataset(n, d, target_gamma, b1, b2, seed):
    """Planted linear model plus bounded noise, tuned to a target gamma.

    Features are isotropic directions on the sphere of radius ``b2``. The
    planted regressor has norm ``b1 / (3 b2)``, so ``|r.x| <= b1/3``. Uniform
    noise is rescaled so that the least-squares residual per row lands within
    5% of ``target_gamma``; labels are clipped to ``[-b1, b1]``.
    """
    if n < d:
        raise DatasetError(f"need n >= d, got n={n}, d={d}")
    if not (b1 > 0 and b2 > 0):
        raise DatasetError("b1 and b2 must be positive")
    if not 0 <= target_gamma <= b1 * b1 / 3:
        raise InfeasibleTargetError(
            f"target_gamma={target_gamma} outside [0, b1^2/3 = {b1 * b1 / 3}]")
    rng = _rng.stream(seed, _rng.SYNTH)
    g = rng.standard_normal((n, d))
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    x = b2 * g / norms
    direction = rng.standard_normal(d)
    r = direction / np.linalg.norm(direction) * (b1 / (3 * b2))
    eta = rng.uniform(-1.0, 1.0, size=n)
    signal = x @ r
    if target_gamma == 0:
        return Dataset(x, np.clip(signal, -b1, b1), b1, b2)

    coef, *_ = np.linalg.lstsq(x, eta, rcond=None)
    e = eta - x @ coef
    scale = math.sqrt(target_gamma * n / float(e @ e))
    for _ in range(2):
        y = np.clip(signal + scale * eta, -b1, b1)
        ds = Dataset(x, y, b1, b2)
        realized = compute_stats(ds).gamma
        if abs(realized / target_gamma - 1) <= SYNTH_GAMMA_RTOL:
            return ds
        scale *= math.sqrt(target_gamma / realized)
    raise InfeasibleTargetError(
        f"cannot reach gamma={target_gamma} within {SYNTH_GAMMA_RTOL:.0%} "
        f"(realized {realized:.6g}); label clipping at b1={b1} binds")


def load_csv(path, schema, add_bias=False, clip=None, default_role="ignore"):
    """Read a numeric CSV into a Dataset.

    ``schema`` maps header names to ``"feature"``, ``"label"`` or ``"ignore"``;
    unlisted columns get ``default_role``. Rows whose label is missing or not
    a finite number are dropped. A non-numeric feature cell is an error.

    With ``clip=(b1, b2)`` the bias column is appended first, rows whose norm
    exceeds ``b2`` are rescaled onto the ball, then labels are clamped to
    ``[-b1, b1]``. Without ``clip`` the tightest certificates are recorded.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        unknown = set(schema) - set(header)
        if unknown:
            raise DatasetError(f"{path}: schema columns not in header: {sorted(unknown)}")
        roles = [schema.get(h, default_role) for h in header]
        bad = {r for r in roles if r not in ("feature", "label", "ignore")}
        if bad:
            raise DatasetError(f"unknown column roles {sorted(bad)}")
        label_cols = [i for i, r in enumerate(roles) if r == "label"]
        if len(label_cols) != 1:
            raise DatasetError(f"need exactly one label column, got {len(label_cols)}")
        label_col = label_cols[0]
        feat_cols = [i for i, r in enumerate(roles) if r == "feature"]
        if not feat_cols:
            raise DatasetError("no feature columns")

        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}")
            try:
                label = float(row[label_col])
            except ValueError:
                continue
            if not math.isfinite(label):
                continue
            feats = []
            for c in feat_cols:
                try:
                    v = float(row[c])
                except ValueError:
                    raise DatasetError(
                        f"{path}: row {lineno}, column {header[c]!r}: "
                        f"cannot parse {row[c]!r} as a number") from None
                if not math.isfinite(v):
                    raise DatasetError(f"{path}: row {lineno}, column {header[c]!r}: non-finite value")
                feats.append(v)
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise DatasetError(f"{path}: zero usable rows")

    x = np.asarray(rows, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if add_bias:
        x = np.hstack([x, np.ones((x.shape[0], 1))])
    if clip is not None:
        b1, b2 = map(float, clip)
        norms = np.linalg.norm(x, axis=1)
        over = norms > b2
        x[over] *= (b2 / norms[over])[:, None]
        if add_bias:
            # rescaling moved the bias coordinate; restore it and shrink the rest
            x = _rescale_keep_bias(x, b2)
        y = np.clip(y, -b1, b1)
    else:
        b1 = float(np.max(np.abs(y))) or 1.0
        b2 = float(np.max(np.linalg.norm(x, axis=1))) or 1.0
    return Dataset(x, y, b1, b2, has_bias_column=add_bias)


def _rescale_keep_bias(x, b2):
    if b2 < 1.0:
        raise DatasetError(f"b2={b2} < 1 cannot certify rows with a unit bias coordinate")
    x = x.copy()
    x[:, -1] = 1.0
    head = x[:, :-1]
    head_norm = np.linalg.norm(head, axis=1)
    room = math.sqrt(b2 * b2 - 1.0)
    over = head_norm > room
    head[over] *= (room / head_norm[over])[:, None]
    x[:, :-1] = head
    return x


_META_KEYS = ("n", "d", "b1", "b2", "has_bias_column")


def save_dataset(ds, stem):
    """Write ``<stem>.meta`` (key=value lines) and ``<stem>.csv`` (features, label)."""
    with open(f"{stem}.meta", "w", encoding="utf-8") as fh:
        fh.write(f"n={ds.n}\nd={ds.d}\nb1={ds.b1!r}\nb2={ds.b2!r}\n"
                 f"has_bias_column={str(ds.has_bias_column).lower()}\n")
    with open(f"{stem}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(ds.d)] + ["y"])
        for row, label in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [repr(float(label))])


def load_dataset(stem):
    meta = {}
    with open(f"{stem}.meta", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                key, _, value = line.partition("=")
                meta[key.strip()] = value.strip()
    missing = [k for k in _META_KEYS if k not in meta]
    if missing:
        raise DatasetError(f"{stem}.meta missing keys {missing}")
    n, d = int(meta["n"]), int(meta["d"])
    with open(f"{stem}.csv", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        body = np.array([[float(c) for c in row] for row in reader], dtype=np.float64)
    if body.shape != (n, d + 1):
        raise DatasetError(f"{stem}.csv has shape {body.shape}, meta says ({n}, {d + 1})")
    return Dataset(body[:, :d], body[:, d], float(meta["b1"]), float(meta["b2"]),
                   meta["has_bias_column"] == "true")
