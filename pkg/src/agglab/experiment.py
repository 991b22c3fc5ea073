"""Config-driven experiments: aggregate a training split, fit, and score on held-out instances."""

import configparser
import csv
import dataclasses
import hashlib
import json
import math
import os
import tempfile
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from agglab import _rng
from agglab.aggregate import naive_lba, naive_llp, noisy_wtd_llp, wtd_lba
from agglab.core import load_csv, synth_dataset
from agglab.regress import (LinearModel, TrainConfig, constrained_lstsq, fit_linear,
                            fit_linear_lba, fit_mlp, fit_mlp_llp, mse)

MECHANISMS = ("wtd-lba", "noisy-wtd-llp", "naive-lba", "naive-llp")
LBA_MECHANISMS = ("wtd-lba", "naive-lba")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: dict(
        source="synth", n=20000, d=10, target_gamma=0.5, b1=3.0, b2=1.0, seed=7))
    split: float = 0.8
    mechanism: str = "wtd-lba"
    ms: tuple = (100,)
    ks: tuple = (10,)
    rhos: tuple = (0.0,)
    model: str = "linear"
    b3: float = math.inf
    arch: tuple = (128, 64, 1)
    frob_cap: float = None
    train: TrainConfig = TrainConfig()
    batch_instances: int = 1024
    seeds: tuple = tuple(range(10))
    out_dir: str = "results"
    workers: int = 1

    def validate(self, n_train=None):
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"unknown mechanism {self.mechanism!r}; choose from {MECHANISMS}")
        if self.model not in ("linear", "mlp"):
            raise ConfigError(f"unknown model {self.model!r}")
        if self.model == "mlp" and self.mechanism in LBA_MECHANISMS:
            raise ConfigError("an MLP cannot be trained on LBA aggregates; use linear")
        if not (self.ms and self.ks and self.rhos and self.seeds):
            raise ConfigError("grids and seed list must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be distinct, got {self.seeds}")
        if not 0 < self.split < 1:
            raise ConfigError("split must lie in (0, 1)")
        if any(not 0 <= r <= 1 for r in self.rhos):
            raise ConfigError("rho values must lie in [0, 1]")
        if n_train is not None:
            for m in self.ms:
                for k in self.ks:
                    if m * k > n_train:
                        raise ConfigError(f"grid point m={m}, k={k}: m*k = {m * k} exceeds "
                                          f"the training split size {n_train}")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["b3"] = repr(self.b3)
        return d

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=repr)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _ints(text):
    return tuple(int(t) for t in str(text).replace(" ", "").split(",") if t)


def _floats(text):
    return tuple(float(t) for t in str(text).replace(" ", "").split(",") if t)


def load_config(path=None, overrides=None):
    """Read an INI-style config with sections [dataset] [mechanism] [model] [train] [grid] [output].

    ``overrides`` maps ``section.key`` to string values and wins over the file.
    """
    cp = configparser.ConfigParser()
    if path is not None:
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        cp.read(path, encoding="utf-8")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, name = key.partition(".")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, name, str(value))

    def get(section, key, default=None):
        return cp.get(section, key, fallback=default)

    known = {"dataset", "mechanism", "model", "train", "grid", "output"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")

    base = ExperimentConfig()
    src = get("dataset", "source", "synth")
    if src == "synth":
        dataset = dict(source="synth",
                       n=int(get("dataset", "n", 20000)), d=int(get("dataset", "d", 10)),
                       target_gamma=float(get("dataset", "gamma", 0.5)),
                       b1=float(get("dataset", "b1", 3.0)), b2=float(get("dataset", "b2", 1.0)),
                       seed=int(get("dataset", "seed", 7)))
    elif src == "csv":
        clip = get("dataset", "clip")
        dataset = dict(source="csv", path=get("dataset", "path"), label=get("dataset", "label"),
                       features=get("dataset", "features", "*"),
                       add_bias=cp.getboolean("dataset", "add_bias", fallback=False),
                       clip=_floats(clip) if clip else None)
        if not dataset["path"] or not dataset["label"]:
            raise ConfigError("csv datasets need path and label")
    else:
        raise ConfigError(f"unknown dataset source {src!r}")

    tc = TrainConfig(
        epochs=int(get("train", "epochs", 200)), lr=float(get("train", "lr", 1e-3)),
        alpha=float(get("train", "alpha", 1e-3)), beta1=float(get("train", "beta1", 0.9)),
        beta2=float(get("train", "beta2", 0.999)), eps_adam=float(get("train", "eps_adam", 1e-8)),
        patience=int(get("train", "patience", 3)))
    seeds = get("grid", "seeds")
    if seeds is None:
        first = _rng.default_seed()
        seeds = tuple(range(first, first + 10))
    else:
        seeds = _ints(seeds)
    frob = get("model", "frob_cap")
    cfg = ExperimentConfig(
        dataset=dataset, split=float(get("dataset", "split", base.split)),
        mechanism=get("mechanism", "name", base.mechanism),
        ms=_ints(get("grid", "m", "100")), ks=_ints(get("grid", "k", "10")),
        rhos=_floats(get("grid", "rho", "0.0")),
        model=get("model", "kind", base.model), b3=float(get("model", "b3", "inf")),
        arch=_ints(get("model", "arch", "128,64,1")),
        frob_cap=float(frob) if frob not in (None, "", "none") else None,
        train=tc, batch_instances=int(get("train", "batch_size", 1024)),
        seeds=seeds, out_dir=get("output", "dir", base.out_dir),
        workers=int(get("output", "workers", 1)))
    cfg.validate()
    return cfg


def build_dataset(spec):
    if spec["source"] == "synth":
        return synth_dataset(spec["n"], spec["d"], spec["target_gamma"], spec["b1"], spec["b2"],
                             spec["seed"])
    with open(spec["path"], newline="", encoding="utf-8") as fh:
        header = [h.strip() for h in next(csv.reader(fh))]
    if spec["features"] in ("*", "", None):
        schema = {h: "feature" for h in header}
    else:
        schema = {h: "ignore" for h in header}
        schema.update({h.strip(): "feature" for h in spec["features"].split(",")})
    schema[spec["label"]] = "label"
    return load_csv(spec["path"], schema, add_bias=spec["add_bias"], clip=spec["clip"])


def train_test_split(ds, frac, seed):
    perm = _rng.stream(seed, _rng.SPLIT).permutation(ds.n)
    cut = int(round(frac * ds.n))
    return ds.subset(np.sort(perm[:cut])), ds.subset(np.sort(perm[cut:]))


def _fit_release(cfg, train, m, k, rho, seed):
    """Run the mechanism on ``train`` and fit; returns (model, intermediate labels)."""
    mech = cfg.mechanism
    if mech in LBA_MECHANISMS:
        release = (wtd_lba if mech == "wtd-lba" else naive_lba)(train, m, k, seed)
        return fit_linear_lba(release, cfg.b3), train.labels
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if mech == "noisy-wtd-llp":
            y_tilde, release = noisy_wtd_llp(train, m, k, float(rho), seed, audit_mode=True)
        else:
            release, y_tilde = naive_llp(train, m, k, seed), train.labels
    if cfg.model == "linear":
        # for linear f the bag loss is least squares on the weighted feature sums
        agg_x = np.einsum("jr,jrd->jd", release.weights, release.features)
        return LinearModel(constrained_lstsq(agg_x, release.agg_labels, cfg.b3), cfg.b3), y_tilde
    tc = dataclasses.replace(cfg.train, seed=seed,
                             batch_size=max(1, math.ceil(cfg.batch_instances / k)))
    return fit_mlp_llp(release, cfg.arch, tc, cfg.frob_cap), y_tilde


def _baseline(cfg, train, seed):
    if cfg.model == "linear":
        return fit_linear(train, cfg.b3)
    tc = dataclasses.replace(cfg.train, seed=seed, batch_size=cfg.batch_instances)
    return fit_mlp(train, cfg.arch, tc, cfg.frob_cap)


def _run_one(args):
    cfg, ds, gi, m, k, rho, seed = args
    train, test = train_test_split(ds, cfg.split, seed)
    model, y_tilde = _fit_release(cfg, train, m, k, rho, _rng.child_seed(seed, _rng.BAGS, gi))
    return dict(m=m, k=k, rho=rho, seed=seed, test_mse=mse(test, model),
                train_mse=mse(train, model),
                train_mse_intermediate=float(np.mean((y_tilde - model.predict(train.features)) ** 2)))


def _run_baseline(args):
    cfg, ds, seed = args
    train, test = train_test_split(ds, cfg.split, seed)
    return seed, mse(test, _baseline(cfg, train, seed))


@dataclass
class ResultTable:
    rows: list
    runs: list
    config: ExperimentConfig

    COLUMNS = ("m", "k", "rho", "model", "test_mse_mean", "test_mse_std", "baseline_mean",
               "baseline_std", "train_mse_mean", "train_mse_intermediate_mean", "seeds")

    def row(self, m, k, rho):
        for r in self.rows:
            if r["m"] == m and r["k"] == k and r["rho"] == rho:
                return r
        raise KeyError((m, k, rho))


def _std(v):
    return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0


def run_experiment(cfg, ds=None):
    """Every (m, k, rho) grid point over every seed, plus the instance-trained baseline per seed."""
    ds = build_dataset(cfg.dataset) if ds is None else ds
    n_train = len(train_test_split(ds, cfg.split, cfg.seeds[0])[0].labels)
    cfg.validate(n_train)
    rhos = cfg.rhos if cfg.mechanism == "noisy-wtd-llp" else (0.0,)
    points = [(m, k, rho) for m in cfg.ms for k in cfg.ks for rho in rhos]
    tasks = [(cfg, ds, gi, m, k, rho, s) for gi, (m, k, rho) in enumerate(points) for s in cfg.seeds]
    base_tasks = [(cfg, ds, s) for s in cfg.seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            runs = list(pool.map(_run_one, tasks))
            base = dict(pool.map(_run_baseline, base_tasks))
    else:
        runs = [_run_one(t) for t in tasks]
        base = dict(_run_baseline(t) for t in base_tasks)
    bvals = [base[s] for s in cfg.seeds]
    rows = []
    for m, k, rho in points:
        sel = [r for r in runs if r["m"] == m and r["k"] == k and r["rho"] == rho]
        test = [r["test_mse"] for r in sel]
        rows.append(dict(m=m, k=k, rho=rho, model=cfg.model,
                         test_mse_mean=float(np.mean(test)), test_mse_std=_std(test),
                         baseline_mean=float(np.mean(bvals)), baseline_std=_std(bvals),
                         train_mse_mean=float(np.mean([r["train_mse"] for r in sel])),
                         train_mse_intermediate_mean=float(
                             np.mean([r["train_mse_intermediate"] for r in sel])),
                         seeds=len(sel)))
    for r in runs:
        r["baseline_test_mse"] = base[r["seed"]]
    return ResultTable(rows, runs, cfg)


def header_lines(cfg_digest, seeds):
    return [f"config_hash={cfg_digest}", "seeds=" + ",".join(str(s) for s in seeds)]


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def atomic_write(path, text):
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
    with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_results(table, out_dir=None):
    """Write results.csv, results.md and runs.csv (one line per grid point and seed)."""
    cfg = table.config
    out = out_dir or cfg.out_dir
    head = "".join(f"# {h}\n" for h in header_lines(cfg.digest(), cfg.seeds))
    cols = ResultTable.COLUMNS
    lines = [",".join(cols)] + [",".join(_fmt(r[c]) for c in cols) for r in table.rows]
    atomic_write(os.path.join(out, "results.csv"), head + "\n".join(lines) + "\n")

    md = [f"<!-- {h} -->" for h in header_lines(cfg.digest(), cfg.seeds)]
    cells = [[str(c) for c in cols]] + [
        [f"{r[c]:.6g}" if isinstance(r[c], float) else str(r[c]) for c in cols] for r in table.rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    fmt_row = lambda row: "| " + " | ".join(v.rjust(w) for v, w in zip(row, widths)) + " |"
    md.append(fmt_row(cells[0]))
    md.append("|" + "|".join("-" * (w + 2) for w in widths) + "|")
    md += [fmt_row(r) for r in cells[1:]]
    atomic_write(os.path.join(out, "results.md"), "\n".join(md) + "\n")

    rcols = ("m", "k", "rho", "seed", "test_mse", "baseline_test_mse", "train_mse",
             "train_mse_intermediate")
    rl = [",".join(rcols)] + [",".join(_fmt(r[c]) for c in rcols) for r in table.runs]
    atomic_write(os.path.join(out, "runs.csv"), head + "\n".join(rl) + "\n")
    return out
