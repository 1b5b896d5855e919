import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bnfcp.data import (
    CsvParseError,
    DataSet,
    InsufficientDataError,
    NonFiniteValueError,
    SchemaError,
    SourceCollection,
    StandardizationStats,
    default_schema,
    delta_grid,
    gen_heteroscedastic,
    gen_msdg_synthetic,
    gen_toy_shift,
    load_csv,
    partition_msdg,
    perturb_labels,
    sample_mixture,
    standardize,
    toy_p_conditional,
    toy_q_conditional,
    write_csv,
)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestDataSet:
    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            DataSet(np.zeros((3, 2)), np.zeros(2))

    def test_non_finite(self):
        with pytest.raises(ValueError):
            DataSet(np.zeros((2, 1)), np.array([0.0, np.nan]))

    def test_vector_features_become_column(self):
        assert DataSet(np.arange(3.0), np.zeros(3)).features.shape == (3, 1)

    def test_concat_and_subset(self):
        a = DataSet(np.zeros((2, 1)), np.zeros(2), [0, 0], [0, 1])
        b = DataSet(np.ones((1, 1)), np.ones(1), [1], [2])
        c = DataSet.concat([a, b])
        assert c.n == 3 and c.source_ids.tolist() == [0, 0, 1]
        assert c.subset([2]).indices.tolist() == [2]
        assert DataSet.concat([a, DataSet(np.ones((1, 1)), np.ones(1))]).source_ids is None


class TestToyShift:
    def test_conditionals(self):
        # [PAPER] P: N(-0.5x, -0.3x^2 + 0.3x) ; Q: N(0.25x, -0.24x^2 + 0.24x), at x = 0.5
        m, v = toy_p_conditional(0.5)
        assert m == pytest.approx(-0.25) and v == pytest.approx(0.075)
        m, v = toy_q_conditional(0.5)
        assert m == pytest.approx(0.125) and v == pytest.approx(0.06)

    def test_supports(self):
        p, q = gen_toy_shift(10_000, seed=1)
        assert p.features.min() >= 0 and p.features.max() <= 1
        assert q.features.min() >= 0 and q.features.max() <= 0.8

    def test_sample_means(self):
        # [DERIVED] E[Y] under P = -0.25 ; under Q = 0.25 * 0.4 = 0.1
        p, q = gen_toy_shift(100_000, seed=2)
        for ds, mean in ((p, -0.25), (q, 0.1)):
            se = ds.labels.std() / np.sqrt(ds.n)
            assert abs(ds.labels.mean() - mean) <= 3 * se

    def test_conditional_variance(self):
        # a narrow x-band around 0.5 recovers the variance reading
        p, _ = gen_toy_shift(200_000, seed=3)
        band = np.abs(p.features[:, 0] - 0.5) < 0.01
        resid = p.labels[band] + 0.5 * p.features[band, 0]
        assert resid.var() == pytest.approx(0.075, rel=0.1)

    def test_deterministic(self):
        a, b = gen_toy_shift(50, seed=4), gen_toy_shift(50, seed=4)
        assert a[0].labels.tobytes() == b[0].labels.tobytes()
        assert a[1].features.tobytes() == b[1].features.tobytes()

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            gen_toy_shift(0)


class TestHeteroscedastic:
    def test_noise_free(self):
        d = gen_heteroscedastic(100, 0.0, seed=0)
        np.testing.assert_array_equal(d.labels, np.sin(2 * d.features[:, 0]))

    def test_outer_band_noisier(self):
        d = gen_heteroscedastic(10_000, 1.0, seed=1)
        x, y = d.features[:, 0], d.labels - np.sin(2 * d.features[:, 0])
        assert y[np.abs(x) > 0.5].var() > y[np.abs(x) <= 0.5].var()

    def test_mean(self):
        # [DERIVED] E[sin 2x] = 0 on a symmetric interval, noise has mean 0
        d = gen_heteroscedastic(10_000, 1.0, seed=2)
        assert abs(d.labels.mean()) <= 3 * d.labels.std() / 100


class TestPartition:
    def raw(self, n=600, K=3, seed=0):
        return gen_msdg_synthetic(n, K, seed)

    def test_disjoint_exhaustive(self):
        col = partition_msdg(self.raw(), 3, source_size=100, seed=1)
        groups = [s.indices for s in col.sources] + [col.calibration.indices] + [p.indices for p in col.pools]
        seen = np.concatenate(groups)
        assert seen.size == np.unique(seen).size == 1800
        for i, a in enumerate(groups):
            for b in groups[i + 1:]:
                assert not set(a.tolist()) & set(b.tolist())

    def test_equal_sizes(self):
        col = partition_msdg(self.raw(), 3, source_size=100, seed=1)
        assert [s.n for s in col.sources] == [100] * 3 and col.calibration.n == 100

    def test_single_source(self):
        raw = DataSet(np.arange(50.0), np.zeros(50), np.zeros(50))
        col = partition_msdg(raw, 1, source_size=20, seed=0)
        assert not set(col.sources[0].indices) & set(col.calibration.indices)

    def test_too_large(self):
        with pytest.raises(InsufficientDataError):
            partition_msdg(self.raw(100), 3, source_size=100)

    def test_feature_quantile_rule(self):
        raw = DataSet(np.random.default_rng(0).normal(size=(300, 2)), np.zeros(300))
        col = partition_msdg(raw, 3, rule="feature_quantile", source_size=50, seed=0)
        means = [s.features[:, 0].mean() for s in col.sources]
        assert means == sorted(means)
        assert col.calibration.source_ids is not None

    def test_deterministic(self):
        a = partition_msdg(self.raw(), 3, source_size=100, seed=5)
        b = partition_msdg(self.raw(), 3, source_size=100, seed=5)
        assert a.calibration.indices.tobytes() == b.calibration.indices.tobytes()

    def test_unequal_sources_rejected(self):
        a = DataSet(np.zeros((2, 1)), np.zeros(2))
        with pytest.raises(ValueError):
            SourceCollection([a, a.subset([0])], a, [a])


class TestMixture:
    def pools(self):
        return [DataSet(np.full((2000, 1), k), np.zeros(2000)) for k in range(3)]

    def test_one_hot(self):
        m = sample_mixture(self.pools(), [0, 1, 0], 100, seed=0)
        assert np.all(m.features == 1) and np.all(m.source_ids == 1)

    def test_uniform_counts(self):
        # [DERIVED] multinomial counts: mean n/K, sd sqrt(n p (1 - p))
        m = sample_mixture(self.pools(), np.ones(3) / 3, 3000, seed=1)
        counts = np.bincount(m.source_ids, minlength=3)
        assert np.all(np.abs(counts - 1000) <= 3 * np.sqrt(3000 * (1 / 3) * (2 / 3)))

    def test_empty(self):
        assert sample_mixture(self.pools(), [0.5, 0.5, 0], 0).n == 0

    def test_exhausted(self):
        with pytest.raises(InsufficientDataError):
            sample_mixture(self.pools(), [1, 0, 0], 2500)

    def test_not_simplex(self):
        with pytest.raises(ValueError):
            sample_mixture(self.pools(), [0.5, 0.6, 0.0], 10)

    def test_without_replacement(self):
        pools = [DataSet(np.arange(100.0), np.zeros(100))]
        m = sample_mixture(pools, [1.0], 100, seed=2)
        assert np.unique(m.features).size == 100


class TestPerturb:
    def test_interval(self):
        # [PAPER] perturbed labels lie in [Y, 1.5Y]
        d = DataSet(np.zeros((1000, 1)), np.full(1000, 2.0))
        y = perturb_labels(d, 1.0, 1.5, seed=0).labels
        assert y.min() >= 2.0 and y.max() <= 3.0

    def test_identity(self):
        d = gen_heteroscedastic(20, seed=0)
        assert perturb_labels(d, 1.0, 1.0).labels.tobytes() == d.labels.tobytes()

    def test_ratio_mean(self):
        # [DERIVED] E[U(1, 1.5)] = 1.25, sd = 0.5 / sqrt(12)
        d = DataSet(np.zeros((100_000, 1)), np.ones(100_000))
        r = perturb_labels(d, 1.0, 1.5, seed=1).labels
        assert abs(r.mean() - 1.25) <= 3 * (0.5 / np.sqrt(12)) / np.sqrt(1e5)

    @settings(max_examples=20)
    @given(st.integers(0, 1000), st.floats(0.5, 2.0), st.floats(0.0, 1.0))
    def test_features_untouched(self, seed, lo, width):
        d = gen_heteroscedastic(30, seed=seed)
        assert perturb_labels(d, lo, lo + width, seed).features.tobytes() == d.features.tobytes()

    def test_bad_range(self):
        with pytest.raises(ValueError):
            perturb_labels(gen_heteroscedastic(3), 1.5, 1.0)

    def test_delta_grid(self):
        g = delta_grid()
        assert g.size == 11 and g[0] == 1.0 and g[-1] == 1.5


class TestCsv:
    def test_fixture(self, tmp_path):
        p = write(tmp_path / "a.csv", "x0,x1,y,src\n1,2,3,0\n4.5,-1,0.25,1\n")
        d = load_csv(p, {"x0": "feature", "x1": "feature", "y": "label", "src": "source"})
        np.testing.assert_array_equal(d.features, [[1, 2], [4.5, -1]])
        np.testing.assert_array_equal(d.labels, [3, 0.25])
        assert d.source_ids.tolist() == [0, 1]

    def test_missing_label_column(self, tmp_path):
        p = write(tmp_path / "a.csv", "x0,x1\n1,2\n")
        with pytest.raises(SchemaError):
            load_csv(p, {"x0": "feature", "y": "label"})

    def test_nan_cell(self, tmp_path):
        p = write(tmp_path / "a.csv", "x0,y\n1,2\n3,NaN\n")
        with pytest.raises(NonFiniteValueError) as e:
            load_csv(p, {"x0": "feature", "y": "label"})
        assert e.value.row == 3

    def test_parse_error(self, tmp_path):
        p = write(tmp_path / "a.csv", "x0,y\n1,abc\n")
        with pytest.raises(CsvParseError) as e:
            load_csv(p, {"x0": "feature", "y": "label"})
        assert e.value.row == 2

    def test_bad_schema(self, tmp_path):
        p = write(tmp_path / "a.csv", "x0,y\n1,2\n")
        with pytest.raises(SchemaError):
            load_csv(p, {"x0": "feature", "y": "target"})
        with pytest.raises(SchemaError):
            load_csv(p, {"x0": "feature"})

    def test_yaml_schema_file(self, tmp_path):
        p = write(tmp_path / "a.csv", "a,b,junk\n1,2,x\n")
        s = write(tmp_path / "s.yaml", "columns:\n  a: feature\n  b: label\n  junk: ignore\n")
        assert load_csv(p, s).labels.tolist() == [2.0]

    def test_round_trip(self, tmp_path):
        d = gen_msdg_synthetic(20, 2, seed=0)
        write_csv(tmp_path / "d.csv", d)
        back = load_csv(tmp_path / "d.csv", default_schema(2, True))
        assert back.features.tobytes() == d.features.tobytes()
        assert back.labels.tobytes() == d.labels.tobytes()
        assert back.source_ids.tolist() == d.source_ids.tolist()


class TestStandardize:
    def test_round_trip(self):
        d = gen_msdg_synthetic(100, 3, seed=0)
        z, stats = standardize(d)
        np.testing.assert_allclose(z.features.mean(axis=0), 0, atol=1e-12)
        np.testing.assert_allclose(z.features.std(axis=0), 1, atol=1e-12)
        back = stats.invert(z)
        assert np.max(np.abs(back.features - d.features)) <= 1e-9
        assert np.max(np.abs(back.labels - d.labels)) <= 1e-9

    def test_already_standard(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(500, 2))
        x = (x - x.mean(0)) / x.std(0)
        y = rng.normal(size=500)
        y = (y - y.mean()) / y.std()
        z, _ = standardize(DataSet(x, y))
        np.testing.assert_allclose(z.features, x, atol=1e-12)

    def test_constant_column(self):
        d = DataSet(np.column_stack([np.full(10, 4.0), np.arange(10.0)]), np.arange(10.0))
        z, stats = standardize(d)
        assert stats.x_constant.tolist() == [True, False]
        np.testing.assert_array_equal(z.features[:, 0], 4.0)

    def test_dict_round_trip(self):
        _, stats = standardize(gen_heteroscedastic(50))
        again = StandardizationStats.from_dict(stats.to_dict())
        assert again.to_dict() == stats.to_dict()
