import numpy as np
import pytest

from csa.data import (
    Column,
    ColumnMap,
    CovariateSchema,
    DataError,
    Scaler,
    StratificationError,
    from_arrays,
    impute_missing,
    load_csv,
    nn_proxy_counterfactuals,
    standardize,
    stratified_split,
)


def write_csv(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


SCHEMA = CovariateSchema.of(("age", "continuous"), ("site", "categorical"))


def test_schema_validation():
    with pytest.raises(DataError):
        CovariateSchema(())
    with pytest.raises(DataError):
        CovariateSchema.of(("a", "continuous"), ("a", "categorical"))
    with pytest.raises(DataError):
        CovariateSchema.of(("a", "ordinal"))


def test_load_csv_complete_file(tmp_path):
    path = write_csv(tmp_path, "age,site,y,delta,a\n50,A,10,1,0\n60,B,20,0,1\n40,A,5,1,1\n")
    ds = load_csv(path, SCHEMA)
    assert len(ds) == 3
    assert not ds.missing_mask().any()
    assert ds.y.tolist() == [10.0, 20.0, 5.0]
    assert ds.delta.tolist() == [1, 0, 1]
    assert ds.a.tolist() == [0, 1, 1]
    assert ds.raw_columns[0].tolist() == [50.0, 60.0, 40.0]


def test_load_csv_flags_missing_cells(tmp_path):
    path = write_csv(tmp_path, "age,site,y,delta,a\n50,A,10,1,0\n,B,20,0,1\n40,,5,1,1\n")
    ds = load_csv(path, SCHEMA)
    mask = ds.missing_mask()
    assert mask[1, 0] and mask[2, 1]
    assert mask.sum() == 2


def test_load_csv_missing_required_column_named(tmp_path):
    path = write_csv(tmp_path, "age,site,y,a\n50,A,10,0\n")
    with pytest.raises(DataError, match="delta"):
        load_csv(path, SCHEMA)


def test_load_csv_row_errors_carry_row_index(tmp_path):
    path = write_csv(tmp_path, "age,site,y,delta,a\n50,A,10,1,0\nxx,B,20,0,1\n")
    with pytest.raises(DataError, match="row 2"):
        load_csv(path, SCHEMA)
    path = write_csv(tmp_path, "age,site,y,delta,a\n50,A,-3,1,0\n")
    with pytest.raises(DataError, match="row 1"):
        load_csv(path, SCHEMA)
    path = write_csv(tmp_path, "age,site,y,delta,a\n50,A,10,2,0\n")
    with pytest.raises(DataError, match="delta"):
        load_csv(path, SCHEMA)
    path = write_csv(tmp_path, "age,site,y,delta,a\n50,A,10,1\n")
    with pytest.raises(DataError, match="row 1"):
        load_csv(path, SCHEMA)


def split_dataset(ds, seed=0):
    return stratified_split(ds, seed=seed)


def make_numeric_dataset(n=200, seed=0, p=3):
    rng = np.random.default_rng(seed)
    schema = CovariateSchema.of(*[(f"x{j}", "continuous") for j in range(p)])
    X = rng.normal(size=(n, p))
    y = rng.uniform(1, 100, n)
    delta = rng.integers(0, 2, n)
    a = rng.integers(0, 2, n)
    return from_arrays(schema, X, y, delta, a)


def manual_split(ds, labels):
    out = ds.copy()
    out.split = np.array(labels, dtype=object)
    return out


def test_impute_median_and_mode():
    schema = CovariateSchema.of(("v", "continuous"), ("c", "categorical"))
    raw_v = np.array([1.0, 2.0, 3.0, np.nan, 9.0])
    raw_c = np.array(["A", "A", "B", "B", None], dtype=object)
    ds = from_arrays(schema, np.zeros((5, 2)), np.ones(5), np.ones(5), np.zeros(5))
    ds.raw_columns = [raw_v, raw_c]
    ds = manual_split(ds, ["train", "train", "train", "valid", "test"])
    out = impute_missing(ds)
    # continuous gap: median of train {1,2,3} = 2
    assert out.raw_columns[0][3] == 2.0
    # categorical gap: mode of train {A,A,B} = A
    assert out.raw_columns[1][4] == "A"
    assert not out.missing_mask().any()


def test_impute_no_gaps_is_identity():
    ds = make_numeric_dataset(50)
    ds = manual_split(ds, ["train"] * 40 + ["valid"] * 5 + ["test"] * 5)
    out = impute_missing(ds)
    for before, after in zip(ds.raw_columns, out.raw_columns):
        assert np.array_equal(before, after)


def test_impute_all_missing_train_column_errors():
    schema = CovariateSchema.of(("v", "continuous"))
    ds = from_arrays(schema, np.zeros((4, 1)), np.ones(4), np.ones(4), np.zeros(4))
    ds.raw_columns = [np.array([np.nan, np.nan, 1.0, 2.0])]
    ds = manual_split(ds, ["train", "train", "valid", "test"])
    with pytest.raises(DataError, match="v"):
        impute_missing(ds)


def test_standardize_hand_computed():
    schema = CovariateSchema.of(("v", "continuous"))
    ds = from_arrays(schema, np.array([[1.0], [2.0], [3.0]]), np.ones(3),
                     np.ones(3), np.zeros(3))
    ds = manual_split(ds, ["train", "train", "train"])
    out, scaler = standardize(ds)
    # mean 2, population sd sqrt(2/3): (1-2)/0.8165 = -1.2247
    assert np.allclose(out.features[:, 0], [-1.224744871, 0.0, 1.224744871], atol=1e-8)
    assert scaler.entries[0]["mean"] == 2.0


def test_standardize_constant_column_warns():
    schema = CovariateSchema.of(("v", "continuous"))
    ds = from_arrays(schema, np.full((3, 1), 5.0), np.ones(3), np.ones(3), np.zeros(3))
    ds = manual_split(ds, ["train", "train", "train"])
    with pytest.warns(UserWarning, match="zero variance"):
        out, scaler = standardize(ds)
    assert np.allclose(out.features, 0.0)
    assert scaler.entries[0]["scale"] == 1.0


def test_standardize_one_hot_three_levels():
    schema = CovariateSchema.of(("c", "categorical"))
    ds = from_arrays(schema, np.array([["x"], ["y"], ["z"], ["y"]]), np.ones(4),
                     np.ones(4), np.zeros(4))
    ds = manual_split(ds, ["train", "train", "train", "train"])
    out, _ = standardize(ds)
    assert out.features.shape == (4, 3)
    assert np.allclose(out.features.sum(axis=1), 1.0)
    assert out.feature_names == ["c=x", "c=y", "c=z"]


def test_standardize_requires_imputation_first():
    schema = CovariateSchema.of(("v", "continuous"))
    ds = from_arrays(schema, np.ones((3, 1)), np.ones(3), np.ones(3), np.zeros(3))
    ds.raw_columns[0][1] = np.nan
    ds = manual_split(ds, ["train", "train", "train"])
    with pytest.raises(DataError):
        standardize(ds)


def test_train_statistics_ignore_other_splits():
    # permuting valid/test rows leaves the fitted statistics bit-identical
    ds = make_numeric_dataset(120, seed=3)
    ds = split_dataset(ds, seed=1)
    ds.raw_columns[0][ds.split_indices("valid")] += 500.0
    _, scaler_a = standardize(ds)
    shuffled = ds.copy()
    non_train = np.concatenate([ds.split_indices("valid"), ds.split_indices("test")])
    perm = np.random.default_rng(0).permutation(non_train)
    for col in range(len(shuffled.raw_columns)):
        shuffled.raw_columns[col][non_train] = shuffled.raw_columns[col][perm]
    _, scaler_b = standardize(shuffled)
    assert scaler_a.to_json() == scaler_b.to_json()


def test_scaler_sidecar_round_trip(tmp_path):
    ds = make_numeric_dataset(150, seed=4)
    ds = split_dataset(ds, seed=2)
    _, scaler = standardize(ds)
    path = tmp_path / "scaler.json"
    scaler.save(path)
    again = Scaler.load(path)
    assert again.entries == scaler.entries


def test_stratified_split_partition_and_proportions():
    rng = np.random.default_rng(5)
    n = 1000
    schema = CovariateSchema.of(("x", "continuous"))
    delta = (rng.random(n) < 0.269).astype(int)
    a = rng.integers(0, 2, n)
    ds = from_arrays(schema, rng.normal(size=(n, 1)), rng.uniform(1, 10, n), delta, a)
    out = stratified_split(ds, seed=7)
    # partition: every record labelled exactly once
    assert set(np.unique(out.split)) == {"train", "valid", "test"}
    assert sum(out.split_indices(s).size for s in ("train", "valid", "test")) == n
    global_event = delta.mean()
    for name in ("train", "valid", "test"):
        idx = out.split_indices(name)
        assert abs(idx.size / n - {"train": 0.70, "valid": 0.15, "test": 0.15}[name]) <= 0.02
        assert abs(delta[idx].mean() - global_event) <= 0.03
        assert abs(a[idx].mean() - a.mean()) <= 0.03


def test_stratified_split_deterministic():
    ds = make_numeric_dataset(500, seed=6)
    s1 = stratified_split(ds, seed=11).split
    s2 = stratified_split(ds, seed=11).split
    assert np.array_equal(s1, s2)
    s3 = stratified_split(ds, seed=12).split
    assert not np.array_equal(s1, s3)


def test_stratified_split_too_small():
    schema = CovariateSchema.of(("x", "continuous"))
    rng = np.random.default_rng(8)
    delta = np.zeros(10, dtype=int)
    delta[3] = 1
    a = np.zeros(10, dtype=int)
    a[3] = 1  # single treated event
    ds = from_arrays(schema, rng.normal(size=(10, 1)), np.ones(10), delta, a)
    with pytest.raises(StratificationError):
        stratified_split(ds, seed=0)


def prepared_dataset(n=120, seed=9):
    ds = make_numeric_dataset(n, seed=seed)
    ds = stratified_split(ds, seed=seed)
    ds, _ = standardize(ds)
    return ds


def test_nn_proxy_zero_distance_match():
    ds = prepared_dataset()
    train = ds.split_indices("train")
    valid = ds.split_indices("valid")
    v = valid[0]
    opposite = train[ds.a[train] == 1 - ds.a[v]]
    donor = opposite[0]
    ds.features[v] = ds.features[donor]
    proxies = nn_proxy_counterfactuals(ds)
    hit = next(p for p in proxies if p.subject_index == v)
    assert hit.neighbor_index == donor
    assert hit.distance == 0.0
    assert hit.y_cf == ds.y[donor]
    assert hit.delta_cf == ds.delta[donor]


def test_nn_proxy_tie_breaks_to_lowest_train_index():
    ds = prepared_dataset()
    train = ds.split_indices("train")
    valid = ds.split_indices("valid")
    v = valid[1]
    opposite = train[ds.a[train] == 1 - ds.a[v]]
    first, second = opposite[0], opposite[1]
    ds.features[first] = ds.features[v]
    ds.features[second] = ds.features[v]
    hit = next(p for p in nn_proxy_counterfactuals(ds) if p.subject_index == v)
    assert hit.neighbor_index == min(first, second)


def test_nn_proxy_requires_opposite_arm():
    ds = prepared_dataset()
    train = ds.split_indices("train")
    ds.a[train] = 1  # no controls left in training
    valid = ds.split_indices("valid")
    ds.a[valid[0]] = 1
    with pytest.raises(DataError):
        nn_proxy_counterfactuals(ds)


def test_nn_proxy_distance_never_increases_with_more_training_data():
    ds = prepared_dataset(200, seed=10)
    proxies_full = {p.subject_index: p.distance for p in nn_proxy_counterfactuals(ds)}
    smaller = ds.copy()
    train = smaller.split_indices("train")
    drop = train[::2]
    smaller.split[drop] = "test"  # shrink the training pool
    proxies_small = {p.subject_index: p.distance
                     for p in nn_proxy_counterfactuals(smaller)}
    for idx, dist in proxies_small.items():
        assert proxies_full[idx] <= dist + 1e-12


def test_records_view():
    ds = prepared_dataset(60, seed=11)
    rec = ds.record(0)
    assert rec.x.shape == (3,)
    assert rec.y == ds.y[0]
    assert len(ds.records) == 60
