import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lioncomm.errors import ConfigError, PackFormatError, PackRangeError
from lioncomm.quant import (INF, PackedBits, QuantSpec, SignPolicy, apply_sign,
                            dequantize, lp_mean_norm, pack, quantize, sround,
                            unpack)


class TestLpMeanNorm:
    def test_l1_of_unit_signs(self):
        assert lp_mean_norm(np.array([1, -1, 1, -1]), 1) == 1.0

    def test_max_norm(self):
        assert lp_mean_norm(np.array([3, 4]), INF) == 4.0

    def test_p_zero_is_geometric_mean(self):
        assert lp_mean_norm(np.array([1.0, 4.0]), 0) == pytest.approx(2.0)
        # cross-check: the p -> 0 limit of the finite-p formula
        assert lp_mean_norm(np.array([1.0, 4.0]), 1e-4) == pytest.approx(2.0, rel=1e-3)

    def test_p_zero_excludes_exact_zeros(self):
        assert lp_mean_norm(np.array([0.0, 4.0]), 0) == pytest.approx(4.0)
        assert lp_mean_norm(np.zeros(3), 0) == 0.0

    def test_empty_vector_rejected(self):
        with pytest.raises(ConfigError):
            lp_mean_norm(np.array([]), 1)

    def test_large_p_does_not_overflow(self):
        x = np.array([1e200, 1e-200])
        assert np.isfinite(lp_mean_norm(x, 64.0))


class TestQuantize:
    def test_unit_signs_4bit_l1(self):
        q = quantize(np.array([1.0, -1, 1, -1]), QuantSpec(bits=4, norm_p=1))
        assert q.tolist() == [4, -4, 4, -4]

    def test_clamp_branch(self):
        q = quantize(np.array([7.0, 1, 1, 1]), QuantSpec(bits=4, norm_p=1))
        assert q.tolist() == [7, 1, 1, 1]

    def test_qinf_outlier_collapse(self):
        # small entries scale to 0.007 under the max norm: almost surely 0
        spec = QuantSpec(bits=4, norm_p=INF, rounding="stochastic")
        rng = np.random.default_rng(0)
        hits = 0
        for _ in range(200):
            q = quantize(np.array([1000.0, 1, 1, 1]), spec, rng=rng)
            hits += q.tolist() == [7, 0, 0, 0]
        assert hits / 200 >= 0.97 - 0.04

    def test_all_zero_input(self):
        q = quantize(np.zeros(5), QuantSpec(bits=8, norm_p=1))
        assert not q.any()

    def test_scale_invariance_finite_p(self):
        rng = np.random.default_rng(1)
        x = rng.laplace(size=257)
        spec = QuantSpec(bits=8, norm_p=1)
        for c in (1e-6, 0.5, 3.0, 1e7):
            assert np.array_equal(quantize(c * x, spec), quantize(x, spec))

    def test_sign_preservation(self):
        rng = np.random.default_rng(2)
        x = rng.standard_cauchy(size=1000)
        for spec in (QuantSpec(bits=8, norm_p=1),
                     QuantSpec(bits=8, norm_p=INF, rounding="stochastic"),
                     QuantSpec(bits=4, norm_p=0),
                     QuantSpec(bits=8, norm_p=1, log_transform=True)):
            q = quantize(x, spec, rng=rng)
            assert not np.any(np.sign(q) == -np.sign(x))

    def test_outlier_robustness(self):
        rng = np.random.default_rng(3)
        x = np.concatenate([[1e4], rng.laplace(0, 1, size=1000)])
        q1 = quantize(x, QuantSpec(bits=8, norm_p=1))
        assert np.count_nonzero(q1) / x.size >= 0.9
        qinf = quantize(x, QuantSpec(bits=8, norm_p=INF, rounding="stochastic"),
                        rng=rng)
        assert np.count_nonzero(qinf) / x.size <= 0.1

    def test_no_zero_maps_small_values_to_sign(self):
        x = np.array([1e3, 0.5, -0.5, 0.0])
        spec = QuantSpec(bits=8, norm_p=INF, rounding="nearest", no_zero=True)
        q = quantize(x, spec)
        assert q[1] == 1 and q[2] == -1
        assert q[3] == 0  # true zeros stay zero

    def test_log_transform_roundtrip(self):
        rng = np.random.default_rng(4)
        x = rng.laplace(size=500)
        spec = QuantSpec(bits=8, norm_p=INF, rounding="nearest",
                         log_transform=True)
        s = lp_mean_norm(x, 1.0)
        y = np.sign(x) * np.log1p(np.abs(x) / s)
        q = quantize(x, spec)
        back = dequantize(q, spec, lp_mean_norm(y, INF), log_scale=s)
        # coarse reconstruction: same sign, bounded relative error on large entries
        big = np.abs(x) > s
        assert np.all(np.sign(back[big]) == np.sign(x[big]))

    def test_dequantize_inverts_scaling(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=300)
        spec = QuantSpec(bits=8, norm_p=1)
        q = quantize(x, spec)
        back = dequantize(q, spec, lp_mean_norm(x, 1))
        # quantization error bounded by one step
        step = 2 * lp_mean_norm(x, 1) / spec.qmax
        inside = np.abs(x) < 2 * lp_mean_norm(x, 1)  # not clamped
        assert np.max(np.abs(back[inside] - x[inside])) <= step

    def test_stochastic_requires_rng(self):
        with pytest.raises(ConfigError):
            quantize(np.ones(3), QuantSpec(bits=8, norm_p=INF,
                                           rounding="stochastic"))


class TestSround:
    def test_integer_fixed_point(self):
        rng = np.random.default_rng(0)
        assert np.all(sround(np.full(100, 3.0), rng) == 3)

    def test_unbiasedness(self):
        rng = np.random.default_rng(1)
        n = 100_000
        for v in (0.1, 0.25, 0.5, -0.7):
            draws = sround(np.full(n, v), rng)
            frac = abs(v - np.floor(v))
            se = np.sqrt(frac * (1 - frac) / n)
            assert abs(draws.mean() - v) < 3 * se

    def test_neighbor_values_only(self):
        rng = np.random.default_rng(2)
        draws = sround(np.full(1000, -0.5), rng)
        assert set(np.unique(draws)) <= {-1, 0}


class TestApplySign:
    def test_exact_ternary(self):
        p = SignPolicy(mode="exact-ternary")
        assert apply_sign(np.array([2.5, -0.1, 0.0]), p).tolist() == [1, -1, 0]

    def test_alternating_odd_maps_zero_up(self):
        assert apply_sign(np.array([0.0]),
                          SignPolicy("alternating", 3)).tolist() == [1]

    def test_alternating_even_maps_zero_down(self):
        assert apply_sign(np.array([0.0]),
                          SignPolicy("alternating", 4)).tolist() == [-1]

    def test_parity_flips_only_zeros(self):
        x = np.array([1.0, 0.0, -3.0])
        a = apply_sign(x, SignPolicy("alternating", 5))
        b = apply_sign(x, SignPolicy("alternating", 6))
        assert np.array_equal(a != b, x == 0)


class TestPackUnpack:
    def test_nibbles_low_first(self):
        assert pack(np.array([3, 12]), 4).payload == b"\xc3"

    def test_bits_low_first(self):
        assert pack(np.array([1, 0, 1, 1, 0, 0, 0, 0]), 1).payload == b"\x0d"

    def test_sign_map(self):
        pb = pack(np.array([-1, 1]), 1, 1)
        assert pb.payload == b"\x02"
        assert unpack(pb).tolist() == [-1, 1]

    def test_roundtrip_exhaustive_nibbles(self):
        v = np.arange(16)
        assert unpack(pack(v, 4)).tolist() == v.tolist()

    def test_roundtrip_all_widths_with_offset(self):
        rng = np.random.default_rng(0)
        for width in (1, 2, 4, 8):
            hi = (1 << width) - 1
            off = hi // 2
            v = rng.integers(-off, hi - off + 1, size=123)
            assert np.array_equal(unpack(pack(v, width, off)), v)

    def test_out_of_range_reports_index(self):
        with pytest.raises(PackRangeError) as e:
            pack(np.array([0, 1, 99]), 4)
        assert e.value.index == 2 and e.value.value == 99

    def test_unsupported_width(self):
        with pytest.raises(ConfigError):
            pack(np.array([0]), 3)

    def test_truncated_payload(self):
        pb = pack(np.arange(10), 8)
        with pytest.raises(PackFormatError):
            unpack(PackedBits(width=8, count=10, offset=0,
                              payload=pb.payload[:-1]))

    def test_wire_format_layout(self):
        pb = pack(np.array([5, 6]), 4, offset=2)
        raw = pb.to_bytes()
        assert raw[:4] == (2).to_bytes(4, "little")          # count
        assert raw[4] == 4                                   # width
        assert raw[5:9] == (2).to_bytes(4, "little", signed=True)  # offset
        assert PackedBits.from_bytes(raw) == pb

    def test_wire_format_rejects_bad_length(self):
        raw = pack(np.arange(9), 8).to_bytes()
        with pytest.raises(PackFormatError):
            PackedBits.from_bytes(raw + b"\x00")

    @given(st.lists(st.integers(0, 255), min_size=1, max_size=200))
    @settings(max_examples=60, deadline=None)
    def test_roundtrip_width8_random(self, vals):
        v = np.array(vals)
        assert np.array_equal(unpack(pack(v, 8)), v)
        assert np.array_equal(
            unpack(PackedBits.from_bytes(pack(v, 8).to_bytes())), v)

    @given(st.integers(0, 2), st.lists(st.integers(), min_size=1, max_size=100))
    @settings(max_examples=60, deadline=None)
    def test_roundtrip_subbyte_random(self, wexp, raw):
        width = 1 << wexp
        hi = (1 << width) - 1
        v = np.array([abs(x) % (hi + 1) for x in raw])
        assert np.array_equal(unpack(pack(v, width)), v)
