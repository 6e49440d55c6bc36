import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gtnscale.errors import FormatError, NumericError, ParameterError
from gtnscale.features import QfmConfig, qfm_encode, qfm_encode_batch, site_gram
from gtnscale.mps import (
    LogAmplitude,
    Mps,
    ProductState,
    canonicalize,
    capped_bond_dims,
    is_canonical,
    log_amplitude,
    log_amplitudes,
    log_norm,
    log_overlap,
    random_mps,
    right_canonicalize,
    sum_probability,
    superposition_mps,
    transfer_dominant_eig,
)
from oracles import brute_sum_probability, dense_product, dense_state


def raw_random(M, d, chi, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    dims = capped_bond_dims(M, d, chi)
    return Mps([scale * rng.standard_normal((d, dims[m], dims[m + 1])) for m in range(M)])


def basis_state(bits):
    vecs = np.zeros((len(bits), 2))
    vecs[np.arange(len(bits)), bits] = 1.0
    return ProductState(vecs)


def left_isometry(d, chi, seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((d * chi, chi)))
    return q.reshape(d, chi, chi)


class TestLogAmplitude:
    def test_product_adds_logs(self):
        p = LogAmplitude(-1, 1.5) * LogAmplitude(-1, -0.25)
        assert p == LogAmplitude(1, 1.25)

    def test_zero_absorbs(self):
        assert (LogAmplitude(1, 3.0) * LogAmplitude.zero()).sign == 0

    def test_sentinel_consistency(self):
        with pytest.raises(ParameterError):
            LogAmplitude(0, 0.0)
        with pytest.raises(ParameterError):
            LogAmplitude(1, -math.inf)

    def test_from_value(self):
        a = LogAmplitude.from_value(-0.5)
        assert a.sign == -1 and a.log_mag == pytest.approx(math.log(0.5))
        assert a.value == pytest.approx(-0.5)


class TestRandomMps:
    def test_bond_cap_two_sites(self):
        assert random_mps(2, 2, 8, seed=7).bond_dims == [1, 2, 1]

    def test_normalized(self):
        psi = random_mps(4, 2, 2, seed=0)
        assert log_overlap(psi, psi).log_mag == pytest.approx(0.0, abs=1e-10)

    def test_dense_norm(self):
        assert np.linalg.norm(dense_state(random_mps(6, 2, 4, seed=1))) == pytest.approx(1.0, abs=1e-10)

    def test_canonical_at_right_end(self):
        psi = random_mps(9, 2, 5, seed=3)
        assert psi.canonical_center == 8
        assert is_canonical(psi, 8)

    def test_deterministic(self):
        a, b = random_mps(7, 2, 3, seed=11), random_mps(7, 2, 3, seed=11)
        assert all(np.array_equal(x, y) for x, y in zip(a.sites, b.sites))

    @pytest.mark.parametrize("args", [(1, 2, 2), (4, 1, 2), (4, 2, 0)])
    def test_invalid(self, args):
        with pytest.raises(ParameterError):
            random_mps(*args)


class TestMpsType:
    def test_bad_boundary(self):
        with pytest.raises(ParameterError):
            Mps([np.ones((2, 2, 1))])

    def test_bond_mismatch(self):
        with pytest.raises(ParameterError):
            Mps([np.ones((2, 1, 2)), np.ones((2, 3, 1))])

    def test_non_finite(self):
        bad = np.ones((2, 1, 1))
        bad[0, 0, 0] = np.nan
        with pytest.raises(NumericError):
            Mps([bad, np.ones((2, 1, 1))])

    def test_immutable(self):
        psi = random_mps(3, 2, 2, seed=0)
        with pytest.raises(ValueError):
            psi.sites[0][0, 0, 0] = 1.0


class TestCanonicalize:
    def test_idempotent(self):
        psi = random_mps(8, 2, 4, seed=2)
        again = canonicalize(psi)
        for a, b in zip(psi.sites, again.sites):
            np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)

    def test_same_state(self):
        raw = raw_random(5, 2, 3, seed=4)
        v_in = dense_state(raw)
        v_in /= np.linalg.norm(v_in)
        v_out = dense_state(canonicalize(raw))
        sign = np.sign(v_in @ v_out)
        np.testing.assert_allclose(v_out, sign * v_in, atol=1e-10, rtol=0)

    def test_absorbs_scale(self):
        psi = random_mps(6, 2, 3, seed=5)
        sites = list(psi.sites)
        sites[2] = 3.0 * sites[2]
        out = canonicalize(Mps(sites))
        assert np.linalg.norm(dense_state(out)) == pytest.approx(1.0, abs=1e-10)
        assert is_canonical(out, 5)

    def test_isometries(self):
        out = canonicalize(raw_random(10, 2, 6, seed=9, scale=50.0))
        assert is_canonical(out, out.M - 1)

    def test_zero_state(self):
        with pytest.raises(NumericError):
            canonicalize(Mps([np.zeros((2, 1, 1)), np.ones((2, 1, 1))]))

    def test_right_canonical_mirror(self):
        raw = raw_random(6, 2, 4, seed=8)
        out = right_canonicalize(raw)
        assert is_canonical(out, 0)
        v_in = dense_state(raw) / np.linalg.norm(dense_state(raw))
        np.testing.assert_allclose(dense_state(out), v_in, atol=1e-10)

    def test_gauge_invariance_of_amplitudes(self, rng):
        raw = raw_random(7, 2, 4, seed=13, scale=0.7)
        can = canonicalize(raw)
        x = qfm_encode_batch(rng.random((100, 7)), QfmConfig(0.8))
        s_raw, l_raw = log_amplitudes(raw, x)
        s_can, l_can = log_amplitudes(can, x)
        np.testing.assert_allclose(l_raw - log_norm(raw), l_can, atol=1e-8, rtol=0)
        flips = s_raw * s_can
        assert np.all(flips == flips[0])


class TestLogOverlap:
    def test_self_overlap(self):
        psi = random_mps(12, 2, 5, seed=3)
        ov = log_overlap(psi, psi)
        assert ov.sign == 1
        assert ov.log_mag == pytest.approx(0.0, abs=1e-10)

    def test_matches_dense(self):
        a, b = random_mps(8, 2, 4, seed=10), random_mps(8, 2, 4, seed=11)
        dot = dense_state(a) @ dense_state(b)
        ov = log_overlap(a, b)
        assert ov.sign == np.sign(dot)
        assert ov.log_mag == pytest.approx(math.log(abs(dot)), abs=1e-8)

    def test_long_chain_stays_finite(self):
        a, b = random_mps(10_000, 2, 8, seed=1), random_mps(10_000, 2, 8, seed=2)
        ov = log_overlap(a, b)
        assert math.isfinite(ov.log_mag) and ov.log_mag < 0

    def test_shape_mismatch(self):
        with pytest.raises(ParameterError):
            log_overlap(random_mps(4, 2, 2, 0), random_mps(5, 2, 2, 0))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 7), st.integers(1, 4), st.integers(0, 10**6), st.integers(0, 10**6))
    def test_exactly_symmetric(self, M, chi, s1, s2):
        a, b = raw_random(M, 2, chi, s1), raw_random(M, 2, chi, s2)
        assert log_overlap(a, b) == log_overlap(b, a)


class TestAmplitudeOfProductState:
    def test_basis_match(self):
        zeros = basis_state([0, 0, 0, 0])
        amp = log_amplitude(zeros.as_mps(), zeros)
        assert amp == LogAmplitude(1, 0.0)

    def test_half_angle(self):
        psi = basis_state([0, 0, 0, 0]).as_mps()
        x = qfm_encode(np.full(4, 0.5), QfmConfig(1.0))
        amp = log_amplitude(psi, x)
        assert amp.sign == 1
        assert amp.log_mag == pytest.approx(4 * math.log(math.sqrt(2) / 2), abs=1e-12)

    def test_matches_dense(self, rng):
        psi = random_mps(6, 2, 3, seed=21)
        vec = dense_state(psi)
        for row in rng.random((5, 6)):
            x = qfm_encode(row, QfmConfig(0.9))
            ref = dense_product(x.site_vectors) @ vec
            amp = log_amplitude(psi, x)
            assert amp.sign == np.sign(ref)
            assert amp.log_mag == pytest.approx(math.log(abs(ref)), abs=1e-8)

    def test_equals_overlap_with_product_mps(self, rng):
        psi = random_mps(9, 2, 4, seed=2)
        x = qfm_encode(rng.random(9), QfmConfig(0.6))
        a, b = log_amplitude(psi, x), log_overlap(x.as_mps(), psi)
        assert a.sign == b.sign and a.log_mag == pytest.approx(b.log_mag, abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ParameterError):
            log_amplitude(random_mps(4, 2, 2, 0), basis_state([0, 1, 0]))


class TestSuperposition:
    def test_single_state(self):
        x = qfm_encode(np.array([0.1, 0.7, 0.3]), QfmConfig(1.0))
        psi = superposition_mps([x])
        assert psi.bond_dims == [1, 1, 1, 1]
        np.testing.assert_allclose(
            np.abs(dense_state(psi)), np.abs(dense_product(x.site_vectors)), atol=1e-12
        )

    def test_orthogonal_pair(self):
        a, b = basis_state([0, 1, 1, 0]), basis_state([1, 1, 0, 0])
        psi = superposition_mps([a, b])
        for x in (a, b):
            amp = log_amplitude(psi, x)
            assert amp.sign == 1
            assert amp.log_mag == pytest.approx(-0.5 * math.log(2), abs=1e-12)

    def test_non_orthogonal_matches_dense(self, rng):
        states = [qfm_encode(row, QfmConfig(0.8)) for row in rng.random((3, 5))]
        ref = sum(dense_product(s.site_vectors) for s in states)
        ref /= np.linalg.norm(ref)
        got = dense_state(superposition_mps(states))
        np.testing.assert_allclose(got * np.sign(got @ ref), ref, atol=1e-8)

    def test_bond_caps(self, rng):
        states = [qfm_encode(row, QfmConfig(0.7)) for row in rng.random((20, 8))]
        psi = superposition_mps(states)
        assert all(b <= c for b, c in zip(psi.bond_dims, capped_bond_dims(8, 2, 20)))
        assert is_canonical(psi, psi.canonical_center)

    def test_basis_bond_caps_and_exact_zero(self, rng):
        bits = np.unique(rng.integers(0, 2, (40, 12)), axis=0)
        psi = superposition_mps([basis_state(b) for b in bits])
        n = len(bits)
        assert all(b <= c for b, c in zip(psi.bond_dims, capped_bond_dims(12, 2, n)))
        assert is_canonical(psi, psi.canonical_center)
        seen = {tuple(b) for b in bits}
        unseen = next(b for b in rng.integers(0, 2, (100, 12)) if tuple(b) not in seen)
        assert log_amplitude(psi, basis_state(unseen)).sign == 0

    def test_duplicates_weighted(self):
        a, b = basis_state([0, 1, 0]), basis_state([1, 1, 1])
        psi = superposition_mps([a, a, b])
        vec = dense_state(psi)
        ref = 2 * dense_product(a.site_vectors) + dense_product(b.site_vectors)
        np.testing.assert_allclose(vec, ref / np.linalg.norm(ref), atol=1e-14)

    def test_parameter_count_linear_in_sites(self, rng):
        n = 16
        bits = np.unique(rng.integers(0, 2, (n, 30)), axis=0)
        psi = superposition_mps([basis_state(b) for b in bits])
        assert psi.max_bond <= len(bits)
        assert psi.n_params <= psi.M * psi.d * psi.max_bond**2

    def test_empty(self):
        with pytest.raises(ParameterError):
            superposition_mps([])


class TestTransfer:
    @pytest.mark.parametrize("method", ["dense", "power"])
    def test_self_transfer_is_one(self, method):
        a = left_isometry(2, 3, seed=0)
        assert transfer_dominant_eig(a, a, method=method) == pytest.approx(1.0, abs=1e-8)

    def test_distinct_isometries_contract(self):
        a, b = left_isometry(2, 3, seed=1), left_isometry(2, 3, seed=2)
        lam = transfer_dominant_eig(a, b)
        assert 0 < lam < 1

    def test_power_matches_dense_oracle(self):
        a, b = left_isometry(2, 2, seed=3), left_isometry(2, 2, seed=4)
        t = np.zeros((4, 4))
        for s in range(2):
            t += np.kron(a[s], b[s])
        ref = np.max(np.abs(np.linalg.eigvals(t)))
        assert transfer_dominant_eig(a, b, method="power") == pytest.approx(ref, abs=1e-8)

    def test_large_bond_uses_power(self):
        a = left_isometry(2, 12, seed=5)
        assert transfer_dominant_eig(a, a) == pytest.approx(1.0, abs=1e-8)

    def test_non_convergence(self):
        a, b = left_isometry(2, 3, seed=6), left_isometry(2, 3, seed=7)
        with pytest.raises(NumericError) as exc:
            transfer_dominant_eig(a, b, method="power", max_iter=2)
        assert exc.value.gap is not None

    def test_shape_checks(self):
        with pytest.raises(ParameterError):
            transfer_dominant_eig(np.ones((2, 2, 3)), np.ones((2, 2, 2)))
        with pytest.raises(ParameterError):
            transfer_dominant_eig(np.ones((2, 2, 2)), np.ones((3, 2, 2)))


class TestSumProbability:
    def test_orthonormal_grid(self):
        psi = random_mps(10, 2, 4, seed=1)
        assert sum_probability(psi, site_gram(QfmConfig(1.0), 2)) == pytest.approx(1.0, abs=1e-10)

    def test_half_theta_exceeds_one_on_data_state(self):
        # a state built from samples; for a random state the expectation is exactly 1
        bits = [[0, 0, 1, 0, 0, 0], [0, 1, 1, 0, 0, 0], [0, 0, 1, 1, 0, 1]]
        psi = canonicalize(superposition_mps([basis_state(b) for b in bits]))
        assert sum_probability(psi, site_gram(QfmConfig(1.0), 2)) == pytest.approx(1.0, abs=1e-10)
        assert sum_probability(psi, site_gram(QfmConfig(0.5), 2)) > 1

    @pytest.mark.parametrize("theta,levels", [(1.0, 2), (0.5, 2), (0.8, 3), (0.3, 4), (1.0, 4)])
    def test_matches_enumeration(self, theta, levels):
        psi = raw_random(4, 2, 3, seed=levels)
        grid = [qfm_encode(np.array([j / (levels - 1)]), QfmConfig(theta)).site_vectors[0] for j in range(levels)]
        ref = brute_sum_probability(dense_state(psi), grid, 4)
        got = sum_probability(psi, site_gram(QfmConfig(theta), levels))
        assert got == pytest.approx(ref, rel=1e-8)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 8), st.integers(1, 4), st.integers(0, 10**6), st.floats(0.1, 5.0))
    def test_identity_gram_is_norm(self, M, chi, seed, scale):
        psi = raw_random(M, 2, chi, seed, scale)
        got = sum_probability(psi, np.eye(2))
        assert got == pytest.approx(math.exp(log_overlap(psi, psi).log_mag), rel=1e-10)

    def test_rejects_non_psd(self):
        with pytest.raises(ParameterError):
            sum_probability(random_mps(3, 2, 2, 0), np.array([[1.0, 2.0], [2.0, 1.0]]))


class TestSerialization:
    def test_round_trip_bit_exact(self):
        psi = random_mps(11, 2, 5, seed=4)
        back = Mps.from_bytes(psi.to_bytes())
        assert all(a.tobytes() == b.tobytes() for a, b in zip(psi.sites, back.sites))
        assert back.canonical_center == psi.M - 1

    def test_header_layout(self):
        blob = random_mps(3, 2, 2, seed=0).to_bytes()
        assert blob[:4] == b"GTN1"
        assert np.frombuffer(blob[4:12], dtype="<u4").tolist() == [3, 2]
        assert np.frombuffer(blob[12:28], dtype="<u4").tolist() == [1, 2, 2, 1]

    def test_file_round_trip(self, tmp_path):
        psi = raw_random(5, 2, 3, seed=1)
        path = str(tmp_path / "psi.gtn")
        psi.save(path)
        back = Mps.load(path)
        assert back.canonical_center is None
        assert psi.to_bytes() == back.to_bytes()
        buf = io.BytesIO()
        psi.save(buf)
        buf.seek(0)
        assert Mps.load(buf).to_bytes() == psi.to_bytes()

    def test_bad_magic(self):
        with pytest.raises(FormatError) as exc:
            Mps.from_bytes(b"XXXX" + bytes(20))
        assert exc.value.offset == 0

    def test_truncated(self):
        blob = random_mps(4, 2, 2, seed=0).to_bytes()
        with pytest.raises(FormatError):
            Mps.from_bytes(blob[:-8])
