import numpy as np
import pytest

from jmpgcf import DatasetFormatError, load_dataset, save_dataset, split_validation
from jmpgcf.data import InteractionDataset

from conftest import assert_datasets_equal, make_random_dataset


def write(path, text):
    path.write_text(text)
    return str(path)


class TestLoadDataset:
    def test_direct_transcription(self, tmp_path):
        train = write(tmp_path / "train.txt", "0 1 2\n1 0\n")
        test = write(tmp_path / "test.txt", "")
        ds = load_dataset(train, test)
        assert ds.num_users == 2
        assert ds.num_items == 3
        np.testing.assert_array_equal(ds.train[0], [1, 2])
        np.testing.assert_array_equal(ds.train[1], [0])
        assert ds.num_train_interactions == 3

    def test_uid_only_line_is_empty_list(self, tmp_path):
        train = write(tmp_path / "train.txt", "0 1\n1\n")
        test = write(tmp_path / "test.txt", "")
        ds = load_dataset(train, test)
        assert ds.num_users == 2
        assert len(ds.train[1]) == 0

    def test_empty_test_file_gives_vacuous_split(self, tmp_path):
        train = write(tmp_path / "train.txt", "0 0\n1 1\n")
        test = write(tmp_path / "test.txt", "")
        ds = load_dataset(train, test)
        assert all(len(items) == 0 for items in ds.test)

    def test_counts_span_both_files(self, tmp_path):
        train = write(tmp_path / "train.txt", "0 0\n1 1\n")
        test = write(tmp_path / "test.txt", "1 7\n")
        ds = load_dataset(train, test)
        assert ds.num_items == 8
        np.testing.assert_array_equal(ds.test[1], [7])

    def test_malformed_token_names_file_and_line(self, tmp_path):
        train = write(tmp_path / "train.txt", "0 0\n1 2x\n")
        test = write(tmp_path / "test.txt", "")
        with pytest.raises(DatasetFormatError, match=r"train\.txt:2"):
            load_dataset(train, test)

    def test_negative_index_rejected(self, tmp_path):
        train = write(tmp_path / "train.txt", "0 -3\n")
        test = write(tmp_path / "test.txt", "")
        with pytest.raises(DatasetFormatError, match="negative"):
            load_dataset(train, test)

    def test_repeated_user_rejected(self, tmp_path):
        train = write(tmp_path / "train.txt", "0 1\n0 2\n")
        test = write(tmp_path / "test.txt", "")
        with pytest.raises(DatasetFormatError, match="multiple lines"):
            load_dataset(train, test)

    def test_train_test_overlap_rejected(self, tmp_path):
        train = write(tmp_path / "train.txt", "0 1 2\n")
        test = write(tmp_path / "test.txt", "0 2\n")
        with pytest.raises(DatasetFormatError, match="both train and test"):
            load_dataset(train, test)

    def test_test_only_user_rejected(self, tmp_path):
        train = write(tmp_path / "train.txt", "0 1\n")
        test = write(tmp_path / "test.txt", "4 0\n")
        with pytest.raises(DatasetFormatError, match="only in the test file"):
            load_dataset(train, test)

    def test_missing_file(self, tmp_path):
        train = write(tmp_path / "train.txt", "0 1\n")
        with pytest.raises(DatasetFormatError, match="not found"):
            load_dataset(train, str(tmp_path / "nope.txt"))

    def test_duplicate_items_within_line_are_deduped(self, tmp_path):
        train = write(tmp_path / "train.txt", "0 1 1 2\n")
        test = write(tmp_path / "test.txt", "")
        ds = load_dataset(train, test)
        np.testing.assert_array_equal(ds.train[0], [1, 2])


class TestRemap:
    def test_dense_renumbering_and_mapping_files(self, tmp_path):
        train = write(tmp_path / "train.txt", "5 100\n9 100 200\n")
        test = write(tmp_path / "test.txt", "9 300\n")
        ds = load_dataset(train, test, remap=True, mapping_dir=str(tmp_path))
        assert ds.num_users == 2
        assert ds.num_items == 3
        np.testing.assert_array_equal(ds.train[0], [0])
        np.testing.assert_array_equal(ds.train[1], [0, 1])
        np.testing.assert_array_equal(ds.test[1], [2])
        user_map = (tmp_path / "user_id_map.txt").read_text().splitlines()
        item_map = (tmp_path / "item_id_map.txt").read_text().splitlines()
        assert user_map == ["5 0", "9 1"]
        assert item_map == ["100 0", "200 1", "300 2"]

    def test_without_remap_gaps_become_empty_users(self, tmp_path):
        train = write(tmp_path / "train.txt", "0 0\n3 1\n")
        test = write(tmp_path / "test.txt", "")
        ds = load_dataset(train, test)
        assert ds.num_users == 4
        assert len(ds.train[1]) == 0


def test_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    ds = make_random_dataset(rng, 17, 11, with_test=True)
    save_dataset(ds, tmp_path / "train.txt", tmp_path / "test.txt")
    reloaded = load_dataset(str(tmp_path / "train.txt"), str(tmp_path / "test.txt"))
    assert_datasets_equal(ds, reloaded)


def test_interaction_count_matches_lists():
    rng = np.random.default_rng(6)
    ds = make_random_dataset(rng, 23, 9)
    assert ds.num_train_interactions == sum(len(items) for items in ds.train)


def test_from_lists_rejects_overlap():
    with pytest.raises(DatasetFormatError):
        InteractionDataset.from_lists(1, 3, [[0, 1]], [[1]])


class TestSplitValidation:
    def test_ceil_one_of_ten(self):
        ds = InteractionDataset.from_lists(1, 12, [list(range(1, 11))])
        main, holdout = split_validation(ds, 0.1, seed=0)
        assert len(holdout.test[0]) == 1
        assert len(main.train[0]) == 9

    def test_half_of_four_is_a_partition(self):
        ds = InteractionDataset.from_lists(1, 6, [[0, 2, 3, 5]])
        main, holdout = split_validation(ds, 0.5, seed=1)
        assert len(holdout.test[0]) == 2
        merged = np.union1d(main.train[0], holdout.test[0])
        np.testing.assert_array_equal(merged, [0, 2, 3, 5])
        assert np.intersect1d(main.train[0], holdout.test[0]).size == 0

    def test_deterministic_for_fixed_seed(self):
        rng = np.random.default_rng(2)
        ds = make_random_dataset(rng, 30, 20, max_degree=8)
        a_main, a_hold = split_validation(ds, 0.25, seed=42)
        b_main, b_hold = split_validation(ds, 0.25, seed=42)
        assert_datasets_equal(a_main, b_main)
        assert_datasets_equal(a_hold, b_hold)

    def test_single_item_user_is_never_emptied(self):
        ds = InteractionDataset.from_lists(2, 4, [[3], [0, 1]])
        main, holdout = split_validation(ds, 0.9, seed=0)
        np.testing.assert_array_equal(main.train[0], [3])
        assert len(holdout.test[0]) == 0
        # even at fraction 0.9 the other user keeps one item
        assert len(main.train[1]) == 1

    def test_fraction_bounds(self, tiny_dataset):
        for bad in (0.0, 1.0, -0.2, 1.5):
            with pytest.raises(ValueError):
                split_validation(tiny_dataset, bad, seed=0)

    def test_holdout_shares_reduced_train_lists(self):
        rng = np.random.default_rng(3)
        ds = make_random_dataset(rng, 10, 15, max_degree=6)
        main, holdout = split_validation(ds, 0.34, seed=7)
        for u in range(ds.num_users):
            np.testing.assert_array_equal(main.train[u], holdout.train[u])
            assert np.intersect1d(holdout.train[u], holdout.test[u]).size == 0
