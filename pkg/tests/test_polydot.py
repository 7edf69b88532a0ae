import numpy as np
import pytest

from streamcoded.polydot import (
    CodeParams,
    compute_task,
    decode_job,
    derive_profile,
    derive_profile_st,
    encode_job,
    enumerate_codes,
    poly_product_coeffs,
    validate_roundtrip,
)


def bf_payload(a, b, s, t, x):
    """Brute-force evaluation of both encoding polynomials at x."""
    n = a.shape[0]
    br, bc = n // t, n // s
    pa = np.zeros((br, bc), dtype=object)
    for i in range(t):
        for j in range(s):
            blk = a[i * br : (i + 1) * br, j * bc : (j + 1) * bc].astype(object)
            pa = pa + blk * (x ** (t * j + i))
    pb = np.zeros((bc, br), dtype=object)
    for k in range(s):
        for l in range(t):
            blk = b[k * bc : (k + 1) * bc, l * br : (l + 1) * br].astype(object)
            pb = pb + blk * (x ** (t * (2 * s - 1) * l + t * (s - 1 - k)))
    return pa, pb


def exact_product(a, b):
    return a.astype(object) @ b.astype(object)


def run_job(a, b, params, num_tasks=None):
    num_tasks = params.k if num_tasks is None else num_tasks
    payloads = encode_job(a, b, params, num_tasks)
    return [(p.eval_point, compute_task(p)) for p in payloads]


class TestEnumerateCodes:
    def test_m50(self):
        assert enumerate_codes(50) == [(1, 50), (2, 25), (5, 10), (10, 5), (25, 2), (50, 1)]

    def test_m1(self):
        assert enumerate_codes(1) == [(1, 1)]

    def test_m12(self):
        codes = enumerate_codes(12)
        assert len(codes) == 6
        assert (3, 4) in codes and (4, 3) in codes
        assert all(s * t == 12 for s, t in codes)

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            enumerate_codes(0)


class TestProfile:
    def test_k_example(self):
        prof = derive_profile(CodeParams(100, 10, 5), 1.0, 1e4, 1e5)
        assert prof.k == 25 * 19 == 475

    def test_degenerate_single_task(self):
        prof = derive_profile(CodeParams(100, 1, 1), 1.0, 1e4, 1e5)
        assert prof.k == 1
        assert prof.i_in == 2e4
        assert prof.i_out == 1e4
        assert prof.c_ops == 1e6
        assert prof.t_enc_mean == 1e4 / 1e4
        assert prof.t_dec_mean == (1e4 + 1) / 1e5

    def test_linear_in_omega(self):
        base = derive_profile(CodeParams(100, 10, 5), 1.0, 1e4, 1e5)
        up = derive_profile(CodeParams(100, 10, 5), 1.2, 1e4, 1e5)
        assert up.i_in == pytest.approx(1.2 * base.i_in)
        assert up.i_out == pytest.approx(1.2 * base.i_out)
        assert up.c_ops == pytest.approx(1.2 * base.c_ops)
        assert up.i_out_purged == base.i_out_purged

    def test_k_nondecreasing_in_s(self):
        ks = [derive_profile_st(100, s, 4, 1.0, 1e4, 1e5).k for s in range(1, 20)]
        assert all(k2 >= k1 for k1, k2 in zip(ks, ks[1:]))

    def test_fractional_t(self):
        prof = derive_profile_st(100, 7, 50 / 7, 1.0, 1e4, 1e5)
        assert prof.k == pytest.approx((50 / 7) ** 2 * 13)

    def test_rejects_omega_below_one(self):
        with pytest.raises(ValueError):
            derive_profile(CodeParams(100, 10, 5), 0.9, 1e4, 1e5)


class TestEncode:
    def test_single_block_is_identity(self):
        rng = np.random.default_rng(1)
        a = rng.integers(-9, 10, (4, 4))
        b = rng.integers(-9, 10, (4, 4))
        for p in encode_job(a, b, CodeParams(4, 1, 1), 3):
            assert np.array_equal(p.a_eval, a)
            assert np.array_equal(p.b_eval, b)

    def test_s2_t1_structure(self):
        rng = np.random.default_rng(2)
        a = rng.integers(-9, 10, (4, 4))
        b = rng.integers(-9, 10, (4, 4))
        a0, a1 = a[:, :2].astype(object), a[:, 2:].astype(object)
        b0, b1 = b[:2, :].astype(object), b[2:, :].astype(object)
        payloads = encode_job(a, b, CodeParams(4, 2, 1), 3)
        for p in payloads:
            x = p.eval_point
            # P_A = A00 + A01 x ; P_B = B00 x^(s-1-0) + B10 x^0, so at the
            # zero exponent only the k = s-1 block of B survives
            assert np.array_equal(p.a_eval, a0 + a1 * x)
            assert np.array_equal(p.b_eval, b0 * x + b1)

    def test_matches_bruteforce_s2t2(self):
        rng = np.random.default_rng(3)
        a = rng.integers(-9, 10, (4, 4))
        b = rng.integers(-9, 10, (4, 4))
        params = CodeParams(4, 2, 2)
        for p in encode_job(a, b, params, params.k):
            pa, pb = bf_payload(a, b, 2, 2, p.eval_point)
            assert np.array_equal(p.a_eval, pa)
            assert np.array_equal(p.b_eval, pb)

    def test_distinct_eval_points(self):
        a = np.ones((6, 6), dtype=int)
        pts = [p.eval_point for p in encode_job(a, a, CodeParams(6, 3, 2), 25)]
        assert len(set(pts)) == 25

    def test_rejects_dim_mismatch(self):
        with pytest.raises(ValueError):
            encode_job(np.ones((4, 4)), np.ones((6, 6)), CodeParams(4, 2, 1), 5)

    def test_rejects_too_few_tasks(self):
        a = np.ones((4, 4), dtype=int)
        with pytest.raises(ValueError):
            encode_job(a, a, CodeParams(4, 2, 2), 11)

    def test_rejects_uneven_tiling(self):
        a = np.ones((10, 10), dtype=int)
        with pytest.raises(ValueError):
            encode_job(a, a, CodeParams(10, 3, 1), 10)


class TestComputeTask:
    def test_product_of_payload(self):
        rng = np.random.default_rng(4)
        a = rng.integers(-9, 10, (6, 6))
        b = rng.integers(-9, 10, (6, 6))
        for p in encode_job(a, b, CodeParams(6, 3, 2), 20):
            assert np.array_equal(compute_task(p), p.a_eval @ p.b_eval)

    def test_zero_payload(self):
        z = np.zeros((4, 4), dtype=int)
        p = encode_job(z, z, CodeParams(4, 2, 2), 12)[0]
        assert not compute_task(p).any()


class TestDecode:
    def test_single_result_is_product(self):
        rng = np.random.default_rng(5)
        a = rng.integers(-9, 10, (5, 5))
        b = rng.integers(-9, 10, (5, 5))
        params = CodeParams(5, 1, 1)
        decoded = decode_job(run_job(a, b, params), params)
        assert np.array_equal(decoded, exact_product(a, b))

    def test_n4_s2t2_exact(self):
        rng = np.random.default_rng(6)
        params = CodeParams(4, 2, 2)
        for _ in range(5):
            a = rng.integers(-9, 10, (4, 4))
            b = rng.integers(-9, 10, (4, 4))
            decoded = decode_job(run_job(a, b, params), params)
            assert np.array_equal(decoded, exact_product(a, b))

    def test_any_k_subset_n6_s3t2(self):
        rng = np.random.default_rng(7)
        params = CodeParams(6, 3, 2)
        k = params.k
        a = rng.integers(-9, 10, (6, 6))
        b = rng.integers(-9, 10, (6, 6))
        results = run_job(a, b, params, num_tasks=k + 2)
        want = exact_product(a, b)
        picks = [list(range(k)), list(range(2, k + 2)), [0] + list(range(2, k + 1))]
        for _ in range(4):
            picks.append(sorted(rng.choice(k + 2, size=k, replace=False)))
        for idx in picks:
            decoded = decode_job([results[i] for i in idx], params)
            assert np.array_equal(decoded, want)

    def test_roundtrip_every_code_n6(self):
        rng = np.random.default_rng(8)
        for s, t in enumerate_codes(6):
            params = CodeParams(6, s, t)
            a = rng.integers(-9, 10, (6, 6))
            b = rng.integers(-9, 10, (6, 6))
            decoded = decode_job(run_job(a, b, params), params)
            assert np.array_equal(decoded, exact_product(a, b))

    def test_roundtrip_n12_sample(self):
        rng = np.random.default_rng(9)
        for s, t in [(3, 4), (6, 2)]:
            params = CodeParams(12, s, t)
            a = rng.integers(-9, 10, (12, 12))
            b = rng.integers(-9, 10, (12, 12))
            decoded = decode_job(run_job(a, b, params), params)
            assert np.array_equal(decoded, exact_product(a, b))

    def test_rejects_duplicate_points(self):
        rng = np.random.default_rng(10)
        params = CodeParams(4, 2, 1)
        a = rng.integers(-9, 10, (4, 4))
        results = run_job(a, a, params)
        results[1] = results[0]
        with pytest.raises(ValueError):
            decode_job(results, params)

    def test_rejects_wrong_count(self):
        rng = np.random.default_rng(11)
        params = CodeParams(4, 2, 1)
        a = rng.integers(-9, 10, (4, 4))
        results = run_job(a, a, params)
        with pytest.raises(ValueError):
            decode_job(results[:-1], params)


class TestPolynomialStructure:
    def test_degree_bound_and_coefficients(self):
        # the product polynomial must fit in K coefficients, and its
        # C-exponent coefficients must be exactly the blocks of A @ B
        rng = np.random.default_rng(12)
        params = CodeParams(6, 3, 2)
        a = rng.integers(-9, 10, (6, 6))
        b = rng.integers(-9, 10, (6, 6))
        coeffs = poly_product_coeffs(a, b, params)
        assert len(coeffs) == params.k
        want = exact_product(a, b)
        t, blk = params.t, 6 // params.t
        for i in range(t):
            for l in range(t):
                e = t * (2 * params.s - 1) * l + t * (params.s - 1) + i
                got = coeffs[e]
                assert np.array_equal(
                    got, want[i * blk : (i + 1) * blk, l * blk : (l + 1) * blk]
                )

    def test_decode_matches_coefficient_oracle(self):
        rng = np.random.default_rng(13)
        params = CodeParams(4, 2, 2)
        a = rng.integers(-9, 10, (4, 4))
        b = rng.integers(-9, 10, (4, 4))
        decoded = decode_job(run_job(a, b, params), params)
        coeffs = poly_product_coeffs(a, b, params)
        t, blk = params.t, 4 // params.t
        for i in range(t):
            for l in range(t):
                e = t * (2 * params.s - 1) * l + t * (params.s - 1) + i
                assert np.array_equal(
                    decoded[i * blk : (i + 1) * blk, l * blk : (l + 1) * blk],
                    coeffs[e],
                )


def test_validate_roundtrip_helper():
    passes, trials = validate_roundtrip(6, 3, 2, trials=3, seed=0)
    assert (passes, trials) == (3, 3)
