import os

import numpy as np
import pytest

from agglab.core import (Dataset, DatasetError, InfeasibleTargetError, compute_stats, load_csv,
                         load_dataset, save_dataset, synth_dataset)


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


class TestDataset:
    def test_valid(self):
        ds = Dataset(np.eye(3), [0.1, -0.2, 0.3], b1=1.0, b2=1.0)
        assert (ds.n, ds.d) == (3, 3)
        assert not ds.features.flags.writeable

    @pytest.mark.parametrize("kwargs", [
        dict(features=np.eye(2), labels=[2.0, 0.0], b1=1.0, b2=1.0),
        dict(features=2 * np.eye(2), labels=[0.0, 0.0], b1=1.0, b2=1.0),
        dict(features=np.eye(2), labels=[0.0], b1=1.0, b2=1.0),
        dict(features=np.array([[np.nan, 0.0]]), labels=[0.0], b1=1.0, b2=1.0),
        dict(features=np.eye(2), labels=[0.0, 0.0], b1=0.0, b2=1.0),
        dict(features=np.zeros((0, 2)), labels=[], b1=1.0, b2=1.0),
        dict(features=np.array([[0.5, 0.5]]), labels=[0.0], b1=1.0, b2=1.0, has_bias_column=True),
    ])
    def test_invariants_rejected(self, kwargs):
        with pytest.raises(DatasetError):
            Dataset(**kwargs)

    def test_bias_flag_accepted(self):
        ds = Dataset(np.array([[0.2, 1.0]]), [0.0], 1.0, 2.0, has_bias_column=True)
        assert ds.has_bias_column


class TestLoadCsv:
    def test_single_row_with_bias(self, tmp_path):
        p = _write(tmp_path / "a.csv", "f1,f2,label\n1.0,2.0,0.5\n")
        ds = load_csv(p, {"f1": "feature", "f2": "feature", "label": "label"}, add_bias=True)
        np.testing.assert_array_equal(ds.features, [[1.0, 2.0, 1.0]])
        np.testing.assert_array_equal(ds.labels, [0.5])
        assert ds.has_bias_column

    @pytest.mark.parametrize("d", [71, 402])
    def test_wide_inputs(self, tmp_path, d, rng):
        cols = [f"c{i}" for i in range(d)]
        rows = rng.normal(size=(5, d + 1))
        text = ",".join(cols + ["target"]) + "\n" + "\n".join(",".join(repr(float(v)) for v in r) for r in rows)
        p = _write(tmp_path / "w.csv", text + "\n")
        ds = load_csv(p, {"target": "label"}, default_role="feature")
        assert ds.d == d
        ds = load_csv(p, {"target": "label"}, add_bias=True, default_role="feature")
        assert ds.d == d + 1

    def test_missing_labels_dropped(self, tmp_path):
        p = _write(tmp_path / "a.csv", "x,y\n1,0.5\n2,\n3,nan\n4,abc\n5,1.5\n")
        ds = load_csv(p, {"x": "feature", "y": "label"})
        np.testing.assert_array_equal(ds.labels, [0.5, 1.5])
        np.testing.assert_array_equal(ds.features[:, 0], [1.0, 5.0])

    def test_ignore_column(self, tmp_path):
        p = _write(tmp_path / "a.csv", "id,x,y\nfoo,1,0.5\n")
        ds = load_csv(p, {"id": "ignore", "x": "feature", "y": "label"})
        assert ds.d == 1

    def test_bad_feature_cell_names_location(self, tmp_path):
        p = _write(tmp_path / "a.csv", "x,y\n1,0.5\nzz,0.1\n")
        with pytest.raises(DatasetError, match=r"row 3.*'x'"):
            load_csv(p, {"x": "feature", "y": "label"})

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_csv(str(tmp_path / "nope.csv"), {"y": "label"})

    def test_zero_usable_rows(self, tmp_path):
        p = _write(tmp_path / "a.csv", "x,y\n1,\n")
        with pytest.raises(DatasetError, match="zero usable rows"):
            load_csv(p, {"x": "feature", "y": "label"})

    def test_needs_one_label(self, tmp_path):
        p = _write(tmp_path / "a.csv", "x,y\n1,2\n")
        with pytest.raises(DatasetError):
            load_csv(p, {"x": "feature", "y": "feature"})

    def test_clip(self, tmp_path):
        p = _write(tmp_path / "a.csv", "a,b,y\n3,4,10\n0.1,0,-0.2\n")
        ds = load_csv(p, {"a": "feature", "b": "feature", "y": "label"}, clip=(1.0, 2.0))
        np.testing.assert_allclose(np.linalg.norm(ds.features[0]), 2.0)
        np.testing.assert_allclose(ds.features[0], [1.2, 1.6])
        np.testing.assert_array_equal(ds.features[1], [0.1, 0.0])
        np.testing.assert_array_equal(ds.labels, [1.0, -0.2])

    def test_clip_keeps_bias(self, tmp_path):
        p = _write(tmp_path / "a.csv", "a,y\n10,0\n")
        ds = load_csv(p, {"a": "feature", "y": "label"}, add_bias=True, clip=(1.0, 2.0))
        assert ds.features[0, -1] == 1.0
        assert np.linalg.norm(ds.features[0]) <= 2.0 * (1 + 1e-12)


class TestSynth:
    def test_zero_gamma(self):
        ds = synth_dataset(500, 5, 0.0, 3.0, 1.0, seed=1)
        assert compute_stats(ds).gamma <= 1e-9

    def test_reference_gamma(self):
        ds = synth_dataset(20000, 10, 0.5, 3.0, 1.0, seed=7)
        assert 0.475 <= compute_stats(ds).gamma <= 0.525
        assert np.max(np.abs(ds.labels)) <= 3.0
        assert np.max(np.linalg.norm(ds.features, axis=1)) <= 1.0 + 1e-12

    def test_deterministic(self):
        a = synth_dataset(2000, 10, 0.5, 3.0, 1.0, seed=7)
        b = synth_dataset(2000, 10, 0.5, 3.0, 1.0, seed=7)
        assert a == b
        assert a != synth_dataset(2000, 10, 0.5, 3.0, 1.0, seed=8)

    def test_target_above_cap(self):
        with pytest.raises(InfeasibleTargetError):
            synth_dataset(100, 2, 4.0, 3.0, 1.0, seed=0)

    def test_clipping_binds(self):
        with pytest.raises(InfeasibleTargetError):
            synth_dataset(20, 10, 0.33, 1.0, 1.0, seed=0)

    def test_n_below_d(self):
        with pytest.raises(DatasetError):
            synth_dataset(3, 5, 0.1, 1.0, 1.0, seed=0)


class TestStats:
    def test_basis_rows(self):
        d = 4
        st = compute_stats(Dataset(np.eye(d), np.zeros(d), 1.0, 1.0))
        np.testing.assert_allclose(st.q, np.eye(d) / d)
        assert st.lambda_star == pytest.approx(1 / d)
        assert st.rank == d

    def test_exact_linear(self, rng):
        x = rng.normal(size=(40, 3)) / 3
        h = np.array([0.2, -0.1, 0.3])
        st = compute_stats(Dataset(x, x @ h, 1.0, 2.0))
        assert st.gamma <= 1e-20
        np.testing.assert_allclose(x @ st.best_linear, x @ h, atol=1e-12)

    def test_normal_equations_oracle(self, rng):
        x = rng.uniform(-1, 1, size=(50, 5)) / 3
        y = rng.uniform(-1, 1, size=50)
        st = compute_stats(Dataset(x, y, 1.0, 1.0))
        r = np.linalg.solve(x.T @ x, x.T @ y)
        resid = y - x @ r
        assert st.gamma == pytest.approx(resid @ resid / 50, rel=1e-8)
        assert st.opt_residual == pytest.approx(st.gamma * 50, rel=1e-12)
        # stationarity of the residual at the witness
        np.testing.assert_allclose(x.T @ (y - x @ st.best_linear), 0, atol=1e-12)

    def test_q_matches_definition(self, rng):
        x = rng.normal(size=(30, 4)) / 4
        st = compute_stats(Dataset(x, np.zeros(30), 1.0, 2.0))
        q = sum(np.outer(r, r) for r in x) / 30
        np.testing.assert_allclose(st.q, q, rtol=1e-12, atol=1e-15)
        evals = np.linalg.eigvalsh(st.q)
        assert np.all(evals[evals > 1e-9 * evals[-1]] >= st.lambda_star)

    def test_rank_deficient(self, rng):
        base = rng.normal(size=(20, 2)) / 4
        x = np.hstack([base, base[:, :1]])
        st = compute_stats(Dataset(x, rng.uniform(-1, 1, 20), 1.0, 2.0))
        assert st.rank == 2
        assert st.lambda_star > 0
        # minimum-norm witness splits weight evenly across duplicated columns
        assert st.best_linear[0] == pytest.approx(st.best_linear[2], rel=1e-8)

    def test_degenerate(self):
        with pytest.raises(DatasetError, match="degenerate"):
            compute_stats(Dataset(np.zeros((3, 2)), np.zeros(3), 1.0, 1.0))

    def test_no_regressor_beats_gamma(self, rng):
        ds = synth_dataset(400, 4, 0.3, 3.0, 1.0, seed=3)
        st = compute_stats(ds)
        rs = rng.normal(size=(1000, 4)) * rng.uniform(0, 3, size=(1000, 1)) + st.best_linear
        resid = np.mean((ds.labels[None, :] - rs @ ds.features.T) ** 2, axis=1)
        assert np.all(resid >= st.gamma - 1e-9)

    def test_rotation_invariance(self, rng):
        ds = synth_dataset(300, 6, 0.2, 3.0, 1.0, seed=4)
        rot, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        a = compute_stats(ds).lambda_star
        b = compute_stats(Dataset(ds.features @ rot, ds.labels, 3.0, 1.0)).lambda_star
        assert b == pytest.approx(a, rel=1e-8)

    def test_bias_augmentation_never_hurts(self, rng):
        ds = synth_dataset(300, 4, 0.3, 3.0, 1.0, seed=5)
        aug = Dataset(np.hstack([ds.features, np.ones((ds.n, 1))]), ds.labels, 3.0, 2.0, True)
        assert compute_stats(aug).gamma <= compute_stats(ds).gamma + 1e-12


def test_save_load_roundtrip(tmp_path):
    ds = synth_dataset(50, 3, 0.1, 3.0, 1.0, seed=2)
    stem = str(tmp_path / "ds")
    save_dataset(ds, stem)
    assert os.path.exists(stem + ".meta") and os.path.exists(stem + ".csv")
    back = load_dataset(stem)
    assert back == ds
    meta = open(stem + ".meta").read()
    for key in ("n=50", "d=3", "b1=", "b2=", "has_bias_column=false"):
        assert key in meta
