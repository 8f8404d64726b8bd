import numpy as np
import numpy.testing as npt
import pytest

from pta.data import (SyntheticUniverse, TaskDataset, export_task_csv,
                      generate_universe, load_csv_task, split_assignment,
                      universe_spec)


class TestSplitAssignment:
    def test_sizes_match_exactly_divisible_ratio(self):
        a = split_assignment(100, (0.5, 0.2, 0.3), seed=0)
        assert [int(np.sum(a == s)) for s in (0, 1, 2)] == [50, 20, 30]

    def test_every_sample_lands_in_exactly_one_split(self):
        a = split_assignment(97, (0.5, 0.2, 0.3), seed=1)
        assert a.shape == (97,)
        assert set(np.unique(a)) <= {0, 1, 2}
        assert sum(int(np.sum(a == s)) for s in (0, 1, 2)) == 97

    def test_stable_across_calls(self):
        npt.assert_array_equal(split_assignment(64, (0.5, 0.2, 0.3), seed=7),
                               split_assignment(64, (0.5, 0.2, 0.3), seed=7))

    def test_bad_ratios_rejected(self):
        with pytest.raises(ValueError, match="ratios"):
            split_assignment(10, (0.5, 0.2, 0.2), seed=0)


class TestSyntheticUniverse:
    def test_full_mixing_with_tied_head_seeds_gives_identical_label_functions(self):
        spec = universe_spec(2, 8, 50, mixing=1.0)
        uni = SyntheticUniverse(spec, seed=0, head_seeds=[7, 7])
        x = np.random.default_rng(1).normal(size=(200, 8))
        npt.assert_array_equal(uni.label(0, x), uni.label(1, x))

    def test_zero_mixing_gives_chance_level_agreement(self):
        # higher input_dim keeps the two random label functions near-orthogonal
        spec = universe_spec(2, 64, 50, mixing=0.0, classes=4, teacher_hidden=64)
        uni = SyntheticUniverse(spec, seed=0)
        x = np.random.default_rng(2).normal(size=(10_000, 64))
        y0, y1 = uni.label(0, x), uni.label(1, x)
        agreement = np.mean(y0 == y1)
        # independent labelings agree at the product-of-marginals rate
        p0 = np.bincount(y0, minlength=4) / y0.size
        p1 = np.bincount(y1, minlength=4) / y1.size
        chance = float(p0 @ p1)
        assert abs(agreement - chance) < 0.05
        # contrast: full mixing with tied heads agrees everywhere
        tied = SyntheticUniverse(universe_spec(2, 64, 50, mixing=1.0, classes=4,
                                               teacher_hidden=64), seed=0, head_seeds=[7, 7])
        assert np.mean(tied.label(0, x) == tied.label(1, x)) == 1.0

    def test_same_seed_gives_byte_identical_datasets(self):
        spec = universe_spec(3, 5, (20, 30, 40), label_kind="regression", noise=0.1)
        a = generate_universe(spec, seed=9)
        b = generate_universe(spec, seed=9)
        for da, db in zip(a, b):
            assert da.features.tobytes() == db.features.tobytes()
            assert da.labels.tobytes() == db.labels.tobytes()
            assert da.split.tobytes() == db.split.tobytes()

    def test_per_task_sample_counts_respected(self):
        spec = universe_spec(2, 4, (20, 50))
        tasks = generate_universe(spec, seed=0)
        assert [t.features.shape[0] for t in tasks] == [20, 50]

    def test_degenerate_specs_rejected(self):
        with pytest.raises(ValueError, match="mixing"):
            universe_spec(1, 4, 20, mixing=1.5)
        with pytest.raises(ValueError, match="10 samples"):
            universe_spec(1, 4, 5)
        with pytest.raises(ValueError, match="classes"):
            universe_spec(1, 4, 20, classes=1)


def write_csv(path, rows, header="a,b,c,label"):
    path.write_text("\n".join([header] + rows) + "\n")


class TestCsvLoader:
    def test_exact_split_sizes_on_100_rows(self, tmp_path):
        rng = np.random.default_rng(0)
        rows = [f"{rng.normal()},{rng.normal()},{rng.normal()},{rng.normal()}"
                for _ in range(100)]
        path = tmp_path / "task.csv"
        write_csv(path, rows)
        ds = load_csv_task(path, "label", kind="regression", seed=0)
        assert [ds.split_size(s) for s in ("train", "val", "test")] == [50, 20, 30]

    def test_constant_column_standardizes_to_zeros(self, tmp_path):
        rows = [f"5.0,{i},{i * 2},{i % 2}" for i in range(40)]
        path = tmp_path / "task.csv"
        write_csv(path, rows)
        ds = load_csv_task(path, "label", kind="classification", seed=0)
        npt.assert_array_equal(ds.features[:, 0], 0.0)
        assert ds.output_dim == 2

    def test_standardization_uses_training_statistics_only(self, tmp_path):
        # crafted so train and train+val statistics differ markedly
        rows = [f"{i},{i},{i},{float(i)}" for i in range(40)]
        path = tmp_path / "task.csv"
        write_csv(path, rows)
        ds = load_csv_task(path, "label", kind="regression", seed=3)
        x_train, _ = ds.split_arrays("train")
        npt.assert_allclose(x_train.mean(axis=0), 0.0, atol=1e-12)
        npt.assert_allclose(x_train.std(axis=0), 1.0, rtol=1e-9)
        x_trainval = np.vstack([x_train, ds.split_arrays("val")[0]])
        assert abs(x_trainval.mean()) > 1e-6 or abs(x_trainval.std() - 1.0) > 1e-6

    def test_reload_with_same_seed_gives_same_membership(self, tmp_path):
        rng = np.random.default_rng(5)
        rows = [f"{rng.normal()},{rng.normal()},{rng.normal()},{rng.normal()}"
                for _ in range(30)]
        path = tmp_path / "task.csv"
        write_csv(path, rows)
        a = load_csv_task(path, "label", seed=11)
        b = load_csv_task(path, "label", seed=11)
        npt.assert_array_equal(a.split, b.split)

    def test_malformed_row_reports_line_number(self, tmp_path):
        path = tmp_path / "task.csv"
        write_csv(path, ["1,2,3,0", "1,2,0"])
        with pytest.raises(ValueError, match="line 3"):
            load_csv_task(path, "label")

    def test_non_numeric_feature_names_column(self, tmp_path):
        path = tmp_path / "task.csv"
        write_csv(path, ["1,2,3,0", "1,x,3,0"])
        with pytest.raises(ValueError, match="'b'"):
            load_csv_task(path, "label")

    def test_missing_label_column(self, tmp_path):
        path = tmp_path / "task.csv"
        write_csv(path, ["1,2,3,0"])
        with pytest.raises(ValueError, match="'y'"):
            load_csv_task(path, "y")


class TestExport:
    def test_round_trip_classification(self, tmp_path):
        spec = universe_spec(1, 4, 30, classes=3)
        ds = generate_universe(spec, seed=2)[0]
        path = tmp_path / "exported.csv"
        export_task_csv(ds, path)
        loaded = load_csv_task(path, "label", kind="classification", seed=5)
        assert loaded.features.shape == ds.features.shape
        npt.assert_array_equal(loaded.labels, ds.labels)
        assert loaded.output_dim == 3
