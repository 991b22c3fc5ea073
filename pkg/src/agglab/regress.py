"""Regressors trained on aggregated data.

Linear models are fit to LBA releases by norm-constrained least squares. MLPs
are fit to LLP releases by minibatch Adam on the weighted bag loss

    sum_j (y_bar_j - sum_r w_jr f(x_jr))^2.

Every MLP layer acts on its input with a constant 1 appended, so a layer with
``n_in`` inputs and ``n_out`` outputs stores an ``n_out x (n_in + 1)`` matrix.
ReLU is applied between layers, never after the last one.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from agglab import _rng
from agglab.aggregate import BagPlan, LlpDataset

FORMAT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass(frozen=True, eq=False)
class LinearModel:
    r: np.ndarray
    b3: float = math.inf

    def __post_init__(self):
        r = np.array(self.r, dtype=np.float64, copy=True).ravel()
        r.setflags(write=False)
        object.__setattr__(self, "r", r)
        if np.linalg.norm(r) > self.b3 + 1e-9:
            raise ValueError(f"||r|| = {np.linalg.norm(r)} exceeds b3 = {self.b3}")

    @property
    def d(self):
        return self.r.size

    def predict(self, x):
        return np.asarray(x, dtype=np.float64) @ self.r

    def params(self):
        return self.r.copy()

    def with_params(self, s):
        return LinearModel(s, math.inf)

    def backward(self, x, g):
        """Gradient of ``sum_i g_i f(x_i)`` with respect to the parameters."""
        return np.asarray(x).T @ g


@dataclass(frozen=True, eq=False)
class MlpModel:
    layers: tuple
    k_frob: float = None

    def __post_init__(self):
        layers = []
        for w in self.layers:
            w = np.array(w, dtype=np.float64, copy=True)
            if w.ndim != 2:
                raise ValueError("each layer must be a 2-d matrix")
            w.setflags(write=False)
            layers.append(w)
        for a, b in zip(layers, layers[1:]):
            if b.shape[1] != a.shape[0] + 1:
                raise ValueError(f"layer shapes {a.shape} -> {b.shape} do not chain")
        if layers[-1].shape[0] != 1:
            raise ValueError("output layer must have a single unit")
        object.__setattr__(self, "layers", tuple(layers))

    @property
    def d(self):
        return self.layers[0].shape[1] - 1

    @property
    def depth(self):
        return len(self.layers)

    @property
    def b4(self):
        """Cap on ``||s_f||`` implied by the per-layer Frobenius cap."""
        return math.sqrt(self.depth) * self.k_frob if self.k_frob is not None else math.inf

    @property
    def lip_l(self):
        """Lipschitz constant of the output in the parameters, for inputs of norm <= k_frob."""
        return nn_lipschitz_bound(self.k_frob, self.depth) if self.k_frob is not None else math.inf

    def frobenius_norms(self):
        return np.array([np.linalg.norm(w) for w in self.layers])

    def _forward(self, x):
        acts = [np.asarray(x, dtype=np.float64)]
        pre = []
        for l, w in enumerate(self.layers):
            a = acts[-1]
            h = a @ w[:, :-1].T + w[:, -1]
            pre.append(h)
            acts.append(h if l == len(self.layers) - 1 else np.maximum(h, 0.0))
        return acts, pre

    def predict(self, x):
        a = np.asarray(x, dtype=np.float64)
        for w in self.layers[:-1]:
            a = np.maximum(a @ w[:, :-1].T + w[:, -1], 0.0)
        w = self.layers[-1]
        return (a @ w[:, :-1].T + w[:, -1])[:, 0]

    def params(self):
        return np.concatenate([w.ravel() for w in self.layers])

    def with_params(self, s):
        out, pos = [], 0
        for w in self.layers:
            out.append(np.asarray(s[pos:pos + w.size]).reshape(w.shape))
            pos += w.size
        return MlpModel(tuple(out), self.k_frob)

    def backward(self, x, g):
        """Gradient of ``sum_i g_i f(x_i)`` with respect to the flattened parameters."""
        acts, pre = self._forward(x)
        delta = np.asarray(g, dtype=np.float64)[:, None]
        grads = [None] * len(self.layers)
        for l in range(len(self.layers) - 1, -1, -1):
            w = self.layers[l]
            a = acts[l]
            grads[l] = np.hstack([delta.T @ a, delta.sum(axis=0)[:, None]])
            if l:
                delta = (delta @ w[:, :-1]) * (pre[l - 1] > 0)
        return np.concatenate([gr.ravel() for gr in grads])

    def project(self, k_frob=None):
        """Rescale each layer onto the Frobenius ball of radius ``k_frob``."""
        cap = self.k_frob if k_frob is None else k_frob
        if cap is None:
            return self
        out = []
        for w in self.layers:
            norm = np.linalg.norm(w)
            out.append(w * (cap / norm) if norm > cap else w)
        return MlpModel(tuple(out), cap)


def init_mlp(d, arch, seed, k_frob=None):
    """Glorot-uniform weights with zero biases; ``arch`` lists layer widths ending in 1."""
    arch = tuple(int(a) for a in arch)
    if not arch or arch[-1] != 1:
        raise ValueError(f"arch must end with a single output unit, got {arch}")
    rng = _rng.stream(seed, _rng.TRAIN, 0)
    layers, n_in = [], d
    for n_out in arch:
        limit = math.sqrt(6.0 / (n_in + n_out))
        w = np.zeros((n_out, n_in + 1))
        w[:, :-1] = rng.uniform(-limit, limit, size=(n_out, n_in))
        layers.append(w)
        n_in = n_out
    model = MlpModel(tuple(layers), k_frob)
    return model.project() if k_frob is not None else model


def _geometric(k, l0):
    # sum_{t=0}^{l0} K^{2t}
    k2 = k * k
    if abs(k2 - 1.0) < 1e-12:
        return l0 + 1.0
    return (k2 ** (l0 + 1) - 1.0) / (k2 - 1.0)


def nn_output_bound(k, l0):
    """Bound on ``|f(x)|`` for depth-``l0`` nets with layer norms and ``||x||`` at most ``k``."""
    if k <= 0 or l0 < 1:
        raise ValueError("need K > 0 and l0 >= 1")
    return k * math.sqrt(_geometric(k, l0))


def nn_lipschitz_bound(k, l0):
    """Lipschitz constant of the output in the flattened weights, same class as above."""
    if k <= 0 or l0 < 1:
        raise ValueError("need K > 0 and l0 >= 1")
    return max(math.sqrt(l0 * _geometric(k, l0)), float(l0))


def _bag_predictions(llp, model):
    if model.d != llp.d:
        raise ValueError(f"model expects d={model.d}, data has d={llp.d}")
    flat = llp.features.reshape(-1, llp.d)
    return model.predict(flat).reshape(llp.m, llp.k)


def llp_residuals(llp, model):
    return llp.agg_labels - np.sum(llp.weights * _bag_predictions(llp, model), axis=1)


def llp_loss(llp, model):
    """Weighted bag loss ``sum_j (y_bar_j - sum_r w_jr f(x_jr))^2``."""
    res = llp_residuals(llp, model)
    return float(res @ res)


def grad_llp_loss(llp, model):
    """Gradient of :func:`llp_loss` with respect to ``model.params()``."""
    res = llp_residuals(llp, model)
    upstream = (-2.0 * res[:, None] * llp.weights).ravel()
    return model.backward(llp.features.reshape(-1, llp.d), upstream)


def lba_loss(lba, model):
    res = lba.agg_labels - lba.agg_features @ model.r
    return float(res @ res)


def mse(ds, model):
    res = ds.labels - model.predict(ds.features)
    return float(res @ res) / ds.n


def constrained_lstsq(a, b, b3, max_steps=10_000, rtol=1e-10):
    """Minimize ``||a r - b||^2`` subject to ``||r|| <= b3``.

    Solves the ridge-stabilized normal equations first; if that solution is
    outside the ball, runs projected gradient descent from its rescaling.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = a.shape[1]
    if b3 == 0:
        return np.zeros(d)
    gram = a.T @ a
    tr = np.trace(gram)
    if tr == 0:
        return np.zeros(d)
    rhs = a.T @ b
    r, *_ = np.linalg.lstsq(gram + 1e-10 * tr * np.eye(d), rhs, rcond=None)
    norm = np.linalg.norm(r)
    if norm <= b3:
        return r

    def loss(v):
        res = a @ v - b
        return float(res @ res)

    step = 1.0 / (2.0 * np.linalg.eigvalsh(gram)[-1])
    r = r * (b3 / norm)
    cur = loss(r)
    for _ in range(max_steps):
        r_new = r - step * 2.0 * (gram @ r - rhs)
        nn = np.linalg.norm(r_new)
        if nn > b3:
            r_new *= b3 / nn
        new = loss(r_new)
        done = abs(cur - new) <= rtol * max(cur, 1e-300)
        r, cur = r_new, new
        if done:
            break
    return r


def fit_linear_lba(lba, b3=math.inf):
    """Norm-constrained least squares on the aggregated pairs ``(x_bar_j, y_bar_j)``."""
    if lba.m < 1:
        raise ValueError("empty LBA release")
    return LinearModel(constrained_lstsq(lba.agg_features, lba.agg_labels, b3), b3)


def fit_linear(ds, b3=math.inf):
    """Instance-level counterpart of :func:`fit_linear_lba`."""
    return LinearModel(constrained_lstsq(ds.features, ds.labels, b3), b3)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 32
    patience: int = 3
    holdout_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.holdout_frac < 1:
            raise ValueError("holdout_frac must lie in [0, 1)")


def cosine_lr(cfg, step, total):
    frac = min(step / max(total, 1), 1.0)
    return cfg.lr * ((1 - cfg.alpha) * 0.5 * (1 + math.cos(math.pi * frac)) + cfg.alpha)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1


def fit_mlp_llp(llp, arch, cfg, frob_cap=None, history=None):
    """Train an MLP on an LLP release with Adam, cosine decay and early stopping.

    The last ``cfg.holdout_frac`` of the bags are held out; training stops
    after ``cfg.patience`` epochs without held-out improvement and the best
    snapshot is returned. Losses are reported per bag.
    """
    model = init_mlp(llp.d, arch, cfg.seed, frob_cap)
    n_val = int(math.floor(cfg.holdout_frac * llp.m)) if llp.m >= 10 else 0
    train = llp.subset(np.arange(llp.m - n_val))
    val = llp.subset(np.arange(llp.m - n_val, llp.m)) if n_val else None
    hist = history if history is not None else TrainHistory()

    s = model.params()
    m1 = np.zeros_like(s)
    m2 = np.zeros_like(s)
    bs = min(cfg.batch_size, train.m)
    steps_per_epoch = math.ceil(train.m / bs)
    total = cfg.epochs * steps_per_epoch
    t = 0
    best, best_val, stale = model, math.inf, 0
    for epoch in range(cfg.epochs):
        order = _rng.stream(cfg.seed, _rng.TRAIN, 1, epoch).permutation(train.m)
        for start in range(0, train.m, bs):
            batch = train.subset(order[start:start + bs])
            g = grad_llp_loss(batch, model) / batch.m
            if not np.all(np.isfinite(g)):
                raise TrainingDivergedError(
                    f"non-finite gradient at epoch {epoch}, step {t}, lr {cosine_lr(cfg, t, total):.3g}")
            t += 1
            m1 = cfg.beta1 * m1 + (1 - cfg.beta1) * g
            m2 = cfg.beta2 * m2 + (1 - cfg.beta2) * g * g
            mhat = m1 / (1 - cfg.beta1 ** t)
            vhat = m2 / (1 - cfg.beta2 ** t)
            s = s - cosine_lr(cfg, t - 1, total) * mhat / (np.sqrt(vhat) + cfg.eps_adam)
            model = model.with_params(s)
            if frob_cap is not None:
                model = model.project(frob_cap)
                s = model.params()
        tl = llp_loss(train, model) / train.m
        if not math.isfinite(tl):
            raise TrainingDivergedError(f"training loss became {tl} at epoch {epoch}")
        hist.train_loss.append(tl)
        if val is None:
            best, hist.best_epoch = model, epoch
            continue
        vl = llp_loss(val, model) / val.m
        hist.val_loss.append(vl)
        if vl < best_val:
            best, best_val, stale, hist.best_epoch = model, vl, 0, epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best


def instance_llp(ds):
    """View a dataset as an LLP release with singleton bags, unit weights and no noise."""
    plan = BagPlan(np.arange(ds.n)[:, None], np.ones((ds.n, 1)), np.zeros(0, np.int64), ds.n)
    return LlpDataset(ds.features[:, None, :], ds.labels, plan)


def fit_mlp(ds, arch, cfg, frob_cap=None):
    """Instance-level counterpart of :func:`fit_mlp_llp`."""
    return fit_mlp_llp(instance_llp(ds), arch, cfg, frob_cap)


# Text serialization: a header line, then one line per field or matrix row.

def dumps_model(model):
    lines = [f"agglab-model {FORMAT_VERSION}"]
    if isinstance(model, LinearModel):
        lines += ["kind linear", f"b3 {model.b3!r}", f"d {model.d}",
                  " ".join(repr(float(v)) for v in model.r)]
    elif isinstance(model, MlpModel):
        cap = "none" if model.k_frob is None else repr(float(model.k_frob))
        lines += ["kind mlp", "activation relu", f"k_frob {cap}", f"layers {model.depth}"]
        for w in model.layers:
            lines.append(f"shape {w.shape[0]} {w.shape[1]}")
            lines += [" ".join(repr(float(v)) for v in row) for row in w]
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    return "\n".join(lines) + "\n"


def loads_model(text):
    lines = iter(text.splitlines())
    head = next(lines).split()
    if head[0] != "agglab-model" or int(head[1]) != FORMAT_VERSION:
        raise ValueError(f"unsupported model header {head}")
    kind = next(lines).split()[1]
    if kind == "linear":
        b3 = float(next(lines).split()[1])
        next(lines)
        r = [float(v) for v in next(lines).split()]
        return LinearModel(r, b3)
    if kind == "mlp":
        next(lines)
        cap = next(lines).split()[1]
        depth = int(next(lines).split()[1])
        layers = []
        for _ in range(depth):
            _, rows, cols = next(lines).split()
            w = np.array([[float(v) for v in next(lines).split()] for _ in range(int(rows))])
            layers.append(w.reshape(int(rows), int(cols)))
        return MlpModel(tuple(layers), None if cap == "none" else float(cap))
    raise ValueError(f"unknown model kind {kind!r}")


def save_model(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_model(model))


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return loads_model(fh.read())
