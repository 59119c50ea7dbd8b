import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eamap.errors import (
    CounterOverflowError,
    DimensionError,
    EmptyCalibrationError,
    MagicError,
    RangeError,
    TruncationError,
    VersionError,
)
from eamap.stats import (
    HistogramBank,
    bin_index,
    calibration_indices,
    dumps_bank,
    entropy_map,
    kl_map,
    load_bank,
    loads_bank,
    mean_map,
    merge,
    run_calibration,
    save_bank,
)

from oracles import brute_entropy, brute_kl, record_attention


def _bank_from_counts(counts, bits):
    """A (1, 1, 1, 1) bank with the given per-bin counts."""
    c = np.zeros((1, 1, 1, 1, 2**bits), np.uint32)
    for k, v in counts.items():
        c[0, 0, 0, 0, k] = v
    return HistogramBank(bits, c, np.zeros((5, 1, 1, 1, 1)), int(sum(counts.values())))


def _random_stochastic(rng, n, shape):
    x = rng.random((n,) + shape) ** 3
    return x / x.sum(-1, keepdims=True)


class TestBinIndex:
    @pytest.mark.parametrize("value,expected", [(0.0, 0), (1.0, 255), (0.5, 128), (0.9999, 255), (1 / 256, 1)])
    def test_examples(self, value, expected):
        assert bin_index(value, 8) == expected

    def test_slack_and_range(self):
        assert bin_index(1 + 5e-7, 8) == 255
        assert bin_index(-5e-7, 8) == 0
        with pytest.raises(RangeError):
            bin_index(1.01, 8)
        with pytest.raises(RangeError):
            bin_index(-0.1, 8)


class TestAccumulate:
    def test_single_image(self, rng):
        rec = _random_stochastic(rng, 1, (2, 3, 4, 4))[0]
        bank = HistogramBank.zeros(rec.shape, 8).accumulate(rec)
        assert np.all(bank.counts.sum(-1) == 1)
        assert bank.images == 1
        assert mean_map(bank).tobytes() == rec.astype(np.float64).tobytes()

    def test_float32_record_mean_exact(self, rng):
        rec = _random_stochastic(rng, 1, (1, 2, 5, 5))[0].astype(np.float32)
        bank = HistogramBank.zeros(rec.shape, 8).accumulate(rec)
        assert mean_map(bank).tobytes() == rec.astype(np.float64).tobytes()

    def test_same_record_twice_gives_even_counts(self, rng):
        rec = _random_stochastic(rng, 1, (1, 2, 4, 4))[0]
        bank = HistogramBank.zeros(rec.shape, 8).accumulate(rec).accumulate(rec)
        assert np.all(bank.counts % 2 == 0)

    def test_batch_equals_sequential(self, rng):
        recs = _random_stochastic(rng, 6, (2, 2, 3, 3))
        a = HistogramBank.zeros(recs.shape[1:], 8).accumulate(recs)
        b = HistogramBank.zeros(recs.shape[1:], 8)
        for r in recs:
            b.accumulate(r)
        assert dumps_bank(a) == dumps_bank(b)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            HistogramBank.zeros((1, 1, 2, 2), 8).accumulate(np.full((1, 1, 3, 3), 1 / 3))

    def test_counter_saturation(self):
        bank = HistogramBank.zeros((1, 1, 1, 1), 2)
        bank.counts[...] = np.iinfo(np.uint32).max
        with pytest.raises(CounterOverflowError):
            bank.accumulate(np.ones((1, 1, 1, 1)))

    def test_merge_saturation(self):
        a = HistogramBank.zeros((1, 1, 1, 1), 2)
        a.counts[..., 0] = np.iinfo(np.uint32).max
        with pytest.raises(CounterOverflowError):
            merge(a, a)


class TestMerge:
    def test_identity_and_commutativity(self, rng):
        shape = (2, 2, 3, 3)
        a = HistogramBank.zeros(shape).accumulate(_random_stochastic(rng, 4, shape))
        b = HistogramBank.zeros(shape).accumulate(_random_stochastic(rng, 3, shape))
        assert dumps_bank(merge(a, HistogramBank.zeros(shape))) == dumps_bank(a)
        assert dumps_bank(merge(a, b)) == dumps_bank(merge(b, a))

    def test_associative_and_shard_invariant(self, rng):
        shape = (1, 2, 4, 4)
        recs = _random_stochastic(rng, 10, shape)
        seq = HistogramBank.zeros(shape)
        for r in recs:
            seq.accumulate(r)
        a = HistogramBank.zeros(shape).accumulate(recs[:3])
        b = HistogramBank.zeros(shape).accumulate(recs[3:])
        assert dumps_bank(merge(a, b)) == dumps_bank(seq)
        parts = [HistogramBank.zeros(shape).accumulate(recs[i : i + 2]) for i in range(0, 10, 2)]
        left = merge(merge(merge(merge(parts[0], parts[1]), parts[2]), parts[3]), parts[4])
        right = merge(parts[0], merge(parts[1], merge(parts[2], merge(parts[3], parts[4]))))
        assert dumps_bank(left) == dumps_bank(right) == dumps_bank(seq)

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            merge(HistogramBank.zeros((1, 1, 2, 2), 8), HistogramBank.zeros((1, 1, 2, 2), 4))


class TestEntropy:
    def test_single_bin(self):
        assert entropy_map(_bank_from_counts({17: 9}, 8))[0, 0, 0, 0] == 0.0

    def test_uniform_over_all_bins(self):
        assert entropy_map(_bank_from_counts({k: 3 for k in range(256)}, 8))[0, 0, 0, 0] == 8.0

    def test_three_to_one(self):
        h = entropy_map(_bank_from_counts({4: 3, 200: 1}, 8))[0, 0, 0, 0]
        assert h == pytest.approx(-(0.75 * math.log2(0.75) + 0.25 * math.log2(0.25)), abs=1e-15)
        assert round(h, 4) == 0.8113

    def test_bin_permutation_invariant(self, rng):
        counts = {int(k): int(v) for k, v in zip(rng.choice(256, 20, replace=False), rng.integers(1, 9, 20))}
        perm = rng.permutation(256)
        moved = {int(perm[k]): v for k, v in counts.items()}
        a = entropy_map(_bank_from_counts(counts, 8))[0, 0, 0, 0]
        b = entropy_map(_bank_from_counts(moved, 8))[0, 0, 0, 0]
        assert a == pytest.approx(b, abs=1e-12)

    def test_empty_bank(self):
        with pytest.raises(EmptyCalibrationError):
            entropy_map(HistogramBank.zeros((1, 1, 2, 2)))
        with pytest.raises(EmptyCalibrationError):
            mean_map(HistogramBank.zeros((1, 1, 2, 2)))

    def test_matches_brute_force_on_model(self, tiny_cfg, tiny_trained, shapes_small):
        params, norm = tiny_trained
        x = norm.apply(shapes_small[0].images[:12])
        bank = run_calibration(x, params, tiny_cfg, 8)
        assert entropy_map(bank).tobytes() == brute_entropy(record_attention(x, params, tiny_cfg), 8).tobytes()

    @settings(max_examples=150, deadline=None)
    @given(st.integers(1, 8), st.lists(st.integers(0, 40), min_size=1, max_size=40), st.randoms(use_true_random=False))
    def test_bounds_and_zero_iff_single_bin(self, bits, raw, rnd):
        nb = 2**bits
        counts = {rnd.randrange(nb): c for c in raw if c}
        if not counts:
            counts = {0: 1}
        h = entropy_map(_bank_from_counts(counts, bits))[0, 0, 0, 0]
        assert 0.0 <= h <= bits
        assert (h == 0.0) == (sum(1 for v in counts.values() if v) == 1)


class TestMeanMap:
    def test_symmetric_pair(self):
        bank = HistogramBank.zeros((1, 1, 2, 2))
        bank.accumulate(np.array([[[[1.0, 0.0], [0.0, 1.0]]]]))
        bank.accumulate(np.array([[[[0.0, 1.0], [1.0, 0.0]]]]))
        assert mean_map(bank)[0, 0].tolist() == [[0.5, 0.5], [0.5, 0.5]]

    def test_against_direct_average(self, rng):
        recs = _random_stochastic(rng, 100, (1, 2, 6, 6))
        bank = HistogramBank.zeros(recs.shape[1:]).accumulate(recs)
        m = mean_map(bank)
        np.testing.assert_allclose(m, recs.mean(0), rtol=0, atol=1e-15)
        np.testing.assert_allclose(m.sum(-1), 1.0, atol=1e-6)


class TestKL:
    def test_self_is_zero(self, rng):
        shape = (1, 2, 3, 3)
        bank = HistogramBank.zeros(shape).accumulate(_random_stochastic(rng, 9, shape))
        assert np.all(kl_map(bank, bank).values == 0.0)

    def test_two_bins(self):
        p = _bank_from_counts({0: 2, 1: 2}, 1)
        q = _bank_from_counts({0: 1, 1: 3}, 1)
        v = kl_map(p, q).values[0, 0, 0, 0]
        assert v == pytest.approx(0.5 * math.log2(2) + 0.5 * math.log2(2 / 3), abs=1e-12)
        assert round(v, 4) == 0.2075

    def test_zero_p_bin_contributes_nothing(self):
        p = _bank_from_counts({0: 4}, 1)
        q = _bank_from_counts({0: 2, 1: 2}, 1)
        assert kl_map(p, q).values[0, 0, 0, 0] == pytest.approx(1.0)

    def test_q_floor(self):
        p = _bank_from_counts({0: 2, 1: 2}, 2)
        q = _bank_from_counts({0: 4}, 2)
        expected = brute_kl([2, 2, 0, 0], [4, 0, 0, 0], 4, 4, 2)
        assert kl_map(p, q).values[0, 0, 0, 0] == pytest.approx(expected, abs=1e-12)
        assert np.isfinite(expected)

    def test_summaries(self, rng):
        shape = (2, 2, 3, 3)
        p = HistogramBank.zeros(shape).accumulate(_random_stochastic(rng, 5, shape))
        q = HistogramBank.zeros(shape).accumulate(_random_stochastic(rng, 5, shape))
        d = kl_map(p, q)
        np.testing.assert_allclose(d.head_mean, d.values.mean(axis=(2, 3)))
        np.testing.assert_allclose(d.cls_max, d.values[:, :, 0].max(-1))

    @settings(max_examples=150, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 12), st.randoms(use_true_random=False))
    def test_non_negative_equal_m(self, bits, m, rnd):
        nb = 2**bits
        pc = np.bincount([rnd.randrange(nb) for _ in range(m)], minlength=nb)
        qc = np.bincount([rnd.randrange(nb) for _ in range(m)], minlength=nb)
        p = _bank_from_counts(dict(enumerate(pc)), bits)
        q = _bank_from_counts(dict(enumerate(qc)), bits)
        v = kl_map(p, q).values[0, 0, 0, 0]
        assert v >= 0.0
        assert v == pytest.approx(brute_kl(pc, qc, m, m, bits), abs=1e-12)


class TestCalibration:
    def test_indices(self):
        idx = calibration_indices(1000, 0.05, 0)
        assert len(idx) == 50 and len(set(idx.tolist())) == 50
        assert calibration_indices(1000, 0.05, 0).tolist() == idx.tolist()
        assert len(calibration_indices(50, 1.0)) == 50
        with pytest.raises(ValueError):
            calibration_indices(10, 0.0)

    def test_full_fraction_counts(self, tiny_cfg, tiny_params):
        x = np.random.default_rng(0).standard_normal((50, 28, 28, 1)).astype(np.float32)
        bank = run_calibration(x[calibration_indices(50, 1.0)], tiny_params, tiny_cfg)
        assert bank.images == 50
        assert np.all(bank.counts.sum(-1) == 50)

    def test_empty(self, tiny_cfg, tiny_params):
        with pytest.raises(EmptyCalibrationError):
            run_calibration(np.zeros((0, 28, 28, 1), np.float32), tiny_params, tiny_cfg)

    def test_two_workers_match_sequential(self, tiny_cfg, tiny_params):
        x = np.random.default_rng(1).standard_normal((10, 28, 28, 1)).astype(np.float32)
        a = run_calibration(x, tiny_params, tiny_cfg, workers=1)
        b = run_calibration(x, tiny_params, tiny_cfg, workers=2)
        assert dumps_bank(a) == dumps_bank(b)

    def test_quantised_mode_matches_recorded_passes(self, tiny_cfg, tiny_trained, shapes_small):
        from eamap.quant import calibrate_model

        params, norm = tiny_trained
        x = norm.apply(shapes_small[0].images[:10])
        q = calibrate_model(params, tiny_cfg, x, 4, 4, 32)
        fp = run_calibration(x, params, tiny_cfg)
        qb = run_calibration(x, params, tiny_cfg, quant=q)
        rec_fp = record_attention(x, params, tiny_cfg)
        rec_q = record_attention(x, params, tiny_cfg, quant=q)
        assert not np.array_equal(rec_fp, rec_q)
        ref_fp = HistogramBank.zeros(fp.shape)
        ref_q = HistogramBank.zeros(fp.shape)
        for a, b in zip(rec_fp, rec_q):
            ref_fp.accumulate(a)
            ref_q.accumulate(b)
        assert dumps_bank(fp) == dumps_bank(ref_fp)
        assert dumps_bank(qb) == dumps_bank(ref_q)
        assert dumps_bank(fp) != dumps_bank(qb)


class TestBankFile:
    def test_round_trip(self, tmp_path, rng):
        shape = (2, 1, 3, 3)
        bank = HistogramBank.zeros(shape, 6).accumulate(_random_stochastic(rng, 7, shape))
        save_bank(bank, tmp_path / "b.eams")
        back = load_bank(tmp_path / "b.eams")
        assert dumps_bank(back) == dumps_bank(bank)
        assert entropy_map(back).tobytes() == entropy_map(bank).tobytes()
        assert back.images == 7 and back.bits == 6

    def test_header_layout(self, rng):
        bank = HistogramBank.zeros((1, 1, 2, 2), 8).accumulate(np.full((1, 1, 2, 2), 0.5))
        data = dumps_bank(bank)
        assert data[:4] == b"EAMS"
        assert int.from_bytes(data[4:8], "little") == 1
        assert int.from_bytes(data[8:12], "little") == 8
        assert int.from_bytes(data[12:20], "little") == 1

    def test_errors(self):
        data = dumps_bank(HistogramBank.zeros((1, 1, 2, 2), 4).accumulate(np.full((1, 1, 2, 2), 0.5)))
        with pytest.raises(MagicError):
            loads_bank(b"XXXX" + data[4:])
        with pytest.raises(VersionError):
            loads_bank(data[:4] + (7).to_bytes(4, "little") + data[8:])
        with pytest.raises(TruncationError) as err:
            loads_bank(data[:-3])
        assert err.value.offset is not None
