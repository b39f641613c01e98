"""Data generators and pipeline: reproducibility, construction guarantees,
windowing/leakage contracts, noise injection, and CSV round trips."""

import numpy as np
import pytest

from covgram.data import (
    DataError,
    InsufficientLengthError,
    ParseError,
    generate_toy_classification,
    generate_traffic_like,
    grid_graph,
    inject_node_noise,
    load_csv_series,
    random_geometric_graph,
    ring_graph,
    window_and_split,
    write_csv_series,
)


class TestGraphBuilders:
    def test_ring_degrees(self):
        g = ring_graph(6)
        np.testing.assert_array_equal(g.adjacency.sum(axis=1), np.full(6, 2.0))

    def test_grid_twenty_nodes_is_4x5(self):
        g = grid_graph(20)
        # corner nodes have degree 2, interior degree 4
        degrees = g.adjacency.sum(axis=1)
        assert degrees.min() == 2 and degrees.max() == 4

    def test_random_geometric_symmetric_no_self_loops(self):
        g = random_geometric_graph(15, seed=3)
        assert np.array_equal(g.adjacency, g.adjacency.T)
        assert np.all(np.diag(g.adjacency) == 0)

    def test_too_few_nodes(self):
        with pytest.raises(DataError):
            ring_graph(1)


class TestTrafficGenerator:
    def test_noiseless_undiffused_series_is_exactly_periodic(self):
        d = generate_traffic_like(4, 864, seed=0, noise_sigma=0.0, diffusion=0.0, daily_period=288)
        np.testing.assert_array_equal(d.values[:288], d.values[288:576])
        series = d.values[:, 0, 0]
        lag = 288
        autocorr = np.corrcoef(series[:-lag], series[lag:])[0, 1]
        assert autocorr == pytest.approx(1.0, abs=1e-12)

    def test_same_phase_nodes_strongly_correlated(self):
        d = generate_traffic_like(8, 1440, seed=1, noise_sigma=0.0, n_phase_groups=4)
        groups = np.asarray(d.metadata["phase_group"])
        same = np.flatnonzero(groups == groups[0])
        a, b = d.values[:, same[0], 0], d.values[:, same[1], 0]
        assert np.corrcoef(a, b)[0, 1] > 0.99
        assert (int(same[0]), int(same[1])) in [tuple(p) for p in d.metadata["correlated_pairs"]]

    def test_true_correlation_recorded(self):
        d = generate_traffic_like(5, 600, seed=2)
        corr = d.metadata["true_correlation"]
        assert corr.shape == (5, 5)
        np.testing.assert_allclose(np.diag(corr), 1.0, atol=1e-12)

    def test_bitwise_reproducibility(self):
        a = generate_traffic_like(6, 600, seed=42)
        b = generate_traffic_like(6, 600, seed=42)
        assert np.array_equal(a.values, b.values)
        c = generate_traffic_like(6, 600, seed=43)
        assert not np.array_equal(a.values, c.values)

    def test_parameter_validation(self):
        with pytest.raises(DataError):
            generate_traffic_like(1, 600)
        with pytest.raises(DataError):
            generate_traffic_like(4, 100, daily_period=288)
        with pytest.raises(DataError):
            generate_traffic_like(4, 600, graph_kind="torus")


class TestToyClassification:
    def test_vanishing_spread_is_linearly_separable(self):
        blobs = generate_toy_classification(3, 30, spread=1e-9, seed=0)
        # nearest-class-mean classifier is exact
        dists = ((blobs.x[:, None, :] - blobs.class_means[None]) ** 2).sum(-1)
        assert np.array_equal(np.argmin(dists, axis=1), blobs.labels)

    def test_one_hot_label_gram_structure(self):
        blobs = generate_toy_classification(4, 10, spread=0.5, seed=1)
        gram = blobs.labels_onehot @ blobs.labels_onehot.T
        same = np.equal.outer(blobs.labels, blobs.labels)
        assert np.all(gram[same] == 1.0)
        assert np.all(gram[~same] == 0.0)

    def test_ambiguous_indices_reproducible(self):
        a = generate_toy_classification(3, 20, spread=1.0, seed=5)
        b = generate_toy_classification(3, 20, spread=1.0, seed=5)
        np.testing.assert_array_equal(a.ambiguous_idx, b.ambiguous_idx)
        np.testing.assert_array_equal(a.x, b.x)
        assert a.ambiguous_idx.size == 3 * 3  # ceil(0.15 * 20) per class

    def test_validation(self):
        with pytest.raises(DataError):
            generate_toy_classification(1, 10, spread=1.0)


class TestNoiseInjection:
    def make(self):
        return generate_traffic_like(6, 2000, seed=3, noise_sigma=0.2)

    def test_empty_selection_is_bitwise_identity(self):
        d = self.make()
        out = inject_node_noise(d, [], seed=0)
        assert np.array_equal(out.values, d.values)

    def test_replaced_node_has_near_zero_lag1_autocorrelation(self):
        d = self.make()
        out = inject_node_noise(d, [2], mode="replace_white", seed=0)
        series = out.values[:, 2, 0]
        rho = np.corrcoef(series[:-1], series[1:])[0, 1]
        assert abs(rho) < 0.1

    def test_only_selected_nodes_change(self):
        d = self.make()
        out = inject_node_noise(d, [1, 4], seed=0)
        changed = {n for n in range(6) if not np.array_equal(out.values[:, n], d.values[:, n])}
        assert changed == {1, 4}
        assert np.array_equal(out.valid_mask, d.valid_mask)

    def test_add_mode_adds(self):
        d = self.make()
        out = inject_node_noise(d, [0], mode="add_white", sigma=0.5, seed=1)
        delta = out.values[:, 0, 0] - d.values[:, 0, 0]
        assert delta.std() == pytest.approx(0.5, rel=0.1)

    def test_out_of_range_node(self):
        with pytest.raises(DataError):
            inject_node_noise(self.make(), [17])

    def test_input_not_mutated(self):
        d = self.make()
        before = d.values.copy()
        inject_node_noise(d, [0], seed=0)
        assert np.array_equal(d.values, before)


class TestWindowing:
    def make(self, t_total=400):
        return generate_traffic_like(4, t_total, seed=7, noise_sigma=0.3)

    def test_all_train_ratio(self):
        splits = window_and_split(self.make(), t_in=6, t_out=2, ratios=(1.0, 0.0, 0.0))
        assert splits.n_windows("train") > 0
        assert splits.n_windows("val") == 0 and splits.n_windows("test") == 0

    def test_chronological_split_no_boundary_crossing(self):
        splits = window_and_split(self.make(), t_in=6, t_out=2, ratios=(0.7, 0.1, 0.2))
        window = 6 + 2
        train_end = splits.offsets["train"].max() + window
        val_start = splits.offsets["val"].min()
        test_start = splits.offsets["test"].min()
        assert train_end <= val_start
        assert splits.offsets["val"].max() + window <= test_start

    def test_scaler_fit_on_train_only(self):
        d = self.make()
        splits = window_and_split(d, t_in=6, t_out=2, ratios=(0.7, 0.1, 0.2))
        n_train = int(400 * 0.7)
        expected_mean = d.values[:n_train, :, 0].mean()
        expected_std = d.values[:n_train, :, 0].std()
        assert splits.mean[0] == pytest.approx(expected_mean, abs=1e-12)
        assert splits.std[0] == pytest.approx(expected_std, abs=1e-12)

    def test_scaler_round_trip(self, rng):
        splits = window_and_split(self.make(), t_in=6, t_out=2)
        y = rng.normal(size=(5, 4, 2))
        np.testing.assert_allclose(
            splits.transform_targets(splits.inverse_transform_targets(y)), y, atol=1e-12
        )

    def test_target_alignment(self):
        d = self.make()
        splits = window_and_split(d, t_in=6, t_out=2, ratios=(1.0, 0.0, 0.0))
        t0 = int(splits.offsets["train"][0])
        scaled = (d.values[t0 + 6 : t0 + 8, :, 0] - splits.mean[0]) / splits.std[0]
        np.testing.assert_allclose(splits.y["train"][0], scaled.T, atol=1e-12)

    def test_train_shuffle_is_seeded_per_epoch(self):
        splits = window_and_split(self.make(), t_in=6, t_out=2, batch_size=4, seed=9)
        first = [b.indices.tolist() for b in splits.train_batches(epoch=0)]
        again = [b.indices.tolist() for b in splits.train_batches(epoch=0)]
        other = [b.indices.tolist() for b in splits.train_batches(epoch=1)]
        assert first == again
        assert first != other

    def test_eval_batches_chronological(self):
        splits = window_and_split(self.make(), t_in=6, t_out=2)
        offsets = np.concatenate([b.indices for b in splits.eval_batches("test")])
        assert np.all(np.diff(offsets) > 0)

    def test_insufficient_length(self):
        with pytest.raises(InsufficientLengthError):
            window_and_split(self.make(400), t_in=300, t_out=10, ratios=(0.7, 0.1, 0.2))

    def test_bad_ratios(self):
        with pytest.raises(DataError):
            window_and_split(self.make(), t_in=4, t_out=1, ratios=(0.5, 0.5, 0.5))


class TestCsv:
    def write(self, tmp_path, series_text, adjacency_text="0,1\n1,0\n"):
        series = tmp_path / "series.csv"
        series.write_text(series_text)
        adjacency = tmp_path / "adjacency.csv"
        adjacency.write_text(adjacency_text)
        return series, adjacency

    def test_well_formed_shape(self, tmp_path):
        series, adjacency = self.write(tmp_path, "1,2\n3,4\n5,6\n")
        d = load_csv_series(series, adjacency)
        assert d.values.shape == (3, 2, 1)
        assert d.valid_mask.all()

    def test_nan_cell_masked(self, tmp_path):
        series, adjacency = self.write(tmp_path, "1,2\nNaN,4\n5,\n")
        d = load_csv_series(series, adjacency)
        assert not d.valid_mask[1, 0]
        assert not d.valid_mask[2, 1]
        assert d.valid_mask[0].all()

    def test_adjacency_size_mismatch(self, tmp_path):
        series, adjacency = self.write(
            tmp_path, "1,2\n3,4\n", adjacency_text="0,1,0\n1,0,1\n0,1,0\n"
        )
        with pytest.raises(ParseError, match="3x3"):
            load_csv_series(series, adjacency)

    def test_ragged_rows_name_line(self, tmp_path):
        series, adjacency = self.write(tmp_path, "1,2\n3\n")
        with pytest.raises(ParseError, match="line 2"):
            load_csv_series(series, adjacency)

    def test_non_numeric_cell_names_position(self, tmp_path):
        series, adjacency = self.write(tmp_path, "1,2\n3,velocity\n")
        with pytest.raises(ParseError, match="line 2, column 2"):
            load_csv_series(series, adjacency)

    def test_round_trip(self, tmp_path):
        d = generate_traffic_like(3, 600, seed=11, noise_sigma=0.1)
        d.valid_mask[5, 1] = False
        series = tmp_path / "out.csv"
        adjacency = tmp_path / "adj.csv"
        write_csv_series(d, series, adjacency)
        back = load_csv_series(series, adjacency)
        assert np.array_equal(back.valid_mask, d.valid_mask)
        mask = d.valid_mask
        np.testing.assert_array_equal(back.values[mask], d.values[mask])
        np.testing.assert_array_equal(back.graph.adjacency, d.graph.adjacency)
