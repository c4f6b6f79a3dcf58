"""Verification metrics: threshold sweep, TAR@FAR, range overlap."""

import numpy as np
import pytest

from quantdistill.bench_eval import (
    build_pairs,
    best_threshold_accuracy,
    interval_iou,
    range_correlation,
    tar_at_far,
    verify,
    write_range_csv,
)
from quantdistill.errors import DimensionError, DomainError, StateError
from quantdistill.graph import build_embedding_net, forward_embed
from quantdistill.quantizer import RangeObserver
from quantdistill.synth import make_identity_space
from quantdistill.tensor_core import Tensor


def _space(seed=0, noise=0.15):
    return make_identity_space(20, 8, 12, noise, seed)


def _brute_force_best_accuracy(scores, same):
    """Oracle: try every midpoint of adjacent sorted scores plus sentinels."""
    xs = np.sort(np.unique(scores))
    cands = [xs[0] - 1] + [(xs[i] + xs[i + 1]) / 2 for i in range(len(xs) - 1)] + [xs[-1] + 1]
    return max(np.mean((scores >= t) == same) for t in cands)


class TestBuildPairs:
    def test_balanced_counts(self):
        pairs = build_pairs(_space(), 4, seed=0)
        assert pairs.n_pairs == 4
        assert pairs.same.sum() == 2

    def test_same_seed_identical(self):
        a = build_pairs(_space(), 20, seed=1)
        b = build_pairs(_space(), 20, seed=1)
        assert np.array_equal(a.first.data, b.first.data)
        assert np.array_equal(a.second.data, b.second.data)

    def test_zero_noise_genuine_pairs_identical_inputs(self):
        pairs = build_pairs(_space(noise=0.0), 10, seed=2)
        genuine = pairs.same
        assert np.array_equal(pairs.first.data[genuine], pairs.second.data[genuine])

    def test_imposter_pairs_use_distinct_identities(self):
        pairs = build_pairs(_space(noise=0.0), 200, seed=3)
        imposter = ~pairs.same
        diffs = np.abs(pairs.first.data[imposter] - pairs.second.data[imposter]).max(axis=1)
        assert np.all(diffs > 0)

    def test_odd_count_rejected(self):
        with pytest.raises(DomainError):
            build_pairs(_space(), 5, seed=0)


class TestThresholdSweep:
    def test_perfectly_separated(self):
        scores = np.array([1.0, 1.0, -1.0, -1.0])
        same = np.array([True, True, False, False])
        acc, _ = best_threshold_accuracy(scores, same)
        assert acc == 1.0
        assert tar_at_far(scores, same, 0.5) == 1.0
        assert tar_at_far(scores, same, 0.01) == 1.0

    def test_identical_distributions_chance_level(self):
        rng = np.random.default_rng(0)
        scores = np.concatenate([rng.uniform(0, 1, 500), rng.uniform(0, 1, 500)])
        same = np.concatenate([np.ones(500, bool), np.zeros(500, bool)])
        acc, _ = best_threshold_accuracy(scores, same)
        assert abs(acc - 0.5) < 0.05

    def test_hand_worked_four_scores(self):
        # oracle: exhaustive sweep over {0.9, 0.8 genuine; 0.1, 0.95 imposter}
        scores = np.array([0.9, 0.8, 0.1, 0.95])
        same = np.array([True, True, False, False])
        acc, thr = best_threshold_accuracy(scores, same)
        assert acc == 0.75
        assert 0.1 < thr < 0.8

    @pytest.mark.parametrize("trial", range(10))
    def test_matches_brute_force_oracle(self, trial):
        rng = np.random.default_rng(trial)
        n = 101
        scores = np.round(rng.standard_normal(n), 2)
        same = rng.uniform(size=n) < 0.5
        if not same.any() or same.all():
            same[0] = True
            same[-1] = False
        acc, _ = best_threshold_accuracy(scores, same)
        assert acc == pytest.approx(_brute_force_best_accuracy(scores, same))


class TestTarAtFar:
    def test_monotone_in_far(self):
        rng = np.random.default_rng(1)
        scores = np.concatenate([rng.normal(0.7, 0.2, 400), rng.normal(0.0, 0.2, 400)])
        same = np.concatenate([np.ones(400, bool), np.zeros(400, bool)])
        fars = [0.001, 0.01, 0.05, 0.1, 0.5]
        tars = [tar_at_far(scores, same, f) for f in fars]
        assert all(a <= b + 1e-12 for a, b in zip(tars, tars[1:]))

    def test_achieved_far_within_target(self):
        rng = np.random.default_rng(2)
        scores = np.concatenate([rng.normal(0.7, 0.2, 300), rng.normal(0.0, 0.2, 1000)])
        same = np.concatenate([np.ones(300, bool), np.zeros(1000, bool)])
        for far in (0.01, 0.1):
            k = int(np.floor(far * 1000))
            imposter = np.sort(scores[~same])[::-1]
            thr = imposter[k]
            achieved = np.mean(scores[~same] > thr)
            assert achieved <= far


class TestVerify:
    def _trained_pairs(self):
        space = _space(seed=4)
        net = build_embedding_net(12, (16,), 8, seed=5)
        pairs = build_pairs(space, 60, seed=6)
        return net, pairs

    def test_report_fields_and_determinism(self):
        net, pairs = self._trained_pairs()
        a = verify(net, pairs, [0.1])
        b = verify(net, pairs, [0.1])
        assert a == b
        assert 0.0 <= a.accuracy <= 1.0
        assert set(a.tar_at_far) == {0.1}

    def test_scale_invariance_before_normalization(self):
        # scaling all weights of the last layer scales embeddings before
        # normalization; verification must not change
        net, pairs = self._trained_pairs()
        base = verify(net, pairs, [0.1])
        from quantdistill.graph import Linear

        last = net.linear_layers[-1]
        net.layers[net.layers.index(last)] = Linear(
            weight=Tensor(last.weight.data * np.float32(7.0)),
            bias=Tensor(last.bias.data * np.float32(7.0)))
        scaled = verify(net, pairs, [0.1])
        assert scaled.accuracy == pytest.approx(base.accuracy)

    def test_uncalibrated_net_defaults_to_fp(self):
        net, pairs = self._trained_pairs()
        assert verify(net, pairs, [0.1]) == verify(net, pairs, [0.1], quantized=False)


class TestRangeCorrelation:
    def _calibrated(self, data_seed, net_seed=7, bits=8):
        net = build_embedding_net(12, (16,), 8, seed=net_seed)
        net.set_quantization(bits)
        rng = np.random.default_rng(data_seed)
        observers = [RangeObserver() for _ in range(net.activation_site_count)]
        for _ in range(6):
            forward_embed(net, Tensor(rng.standard_normal((16, 12)).astype(np.float32)),
                          quantized=False, observers=observers)
        net.activation_params = [o.freeze(bits) for o in observers]
        return net

    def test_net_against_itself_all_ones(self):
        net = self._calibrated(1)
        rep = range_correlation(net, net)
        assert rep.iou == tuple([1.0] * net.activation_site_count)
        assert rep.mean_iou == 1.0

    def test_interval_iou_cases(self):
        assert interval_iou((0.0, 2.0), (1.0, 3.0)) == pytest.approx(1 / 3)
        assert interval_iou((0.0, 1.0), (2.0, 3.0)) == 0.0
        assert interval_iou((1.0, 1.0), (1.0, 1.0)) == 1.0

    def test_architecture_mismatch(self):
        a = self._calibrated(1)
        b = build_embedding_net(12, (8,), 8, seed=1)
        with pytest.raises(DimensionError):
            range_correlation(a, b)

    def test_uncalibrated_rejected(self):
        a = self._calibrated(1)
        b = build_embedding_net(12, (16,), 8, seed=7)
        with pytest.raises(StateError):
            range_correlation(a, b)

    def test_csv_export_parses(self, tmp_path):
        import csv

        a = self._calibrated(1)
        b = self._calibrated(2)
        rep = range_correlation(a, b)
        path = tmp_path / "ranges.csv"
        write_range_csv(path, rep, source_a="real", source_b="synthetic")
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 * net_sites(a)
        assert {r["source"] for r in rows} == {"real", "synthetic"}
        for r in rows:
            assert float(r["lo"]) <= float(r["hi"])


def net_sites(net):
    return net.activation_site_count
