import numpy as np
import pytest

from conftest import finite_diff, rel_err
from qisa_lab.errors import CacheMissError, ConfigError, ContractError, DegenerateTokenError
from qisa_lab.qsim import (
    AnsatzParams,
    PauliString,
    amplitude_encode,
    build_cache,
    cached_expectation,
    cnot_chain,
    congruence_expectation,
    expectation,
    hea_unitary,
    hea_unitary_tensors,
    load_cache,
    pauli_matrix,
    save_cache,
    select_observables,
)
from qisa_lab.tensor import Tensor

CNOT = np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=complex)


class TestPauli:
    def test_z(self):
        np.testing.assert_array_equal(pauli_matrix("Z"), np.diag([1, -1]).astype(complex))

    def test_zz(self):
        np.testing.assert_array_equal(pauli_matrix("ZZ"), np.diag([1, -1, -1, 1]).astype(complex))

    def test_y(self):
        np.testing.assert_array_equal(pauli_matrix("Y"), np.array([[0, -1j], [1j, 0]]))

    def test_square_and_hermitian(self, rng):
        for _ in range(30):
            n = int(rng.integers(1, 4))
            word = "".join(rng.choice(list("IXYZ"), size=n))
            m = pauli_matrix(word)
            assert np.abs(m @ m - np.eye(2**n)).max() < 1e-12
            assert np.abs(m - m.conj().T).max() < 1e-12

    def test_invalid_word(self):
        with pytest.raises(ConfigError):
            PauliString("XQ")

    def test_y_parity(self):
        assert PauliString("YY").y_parity == 0
        assert PauliString("XYZ").y_parity == 1


class TestSelectObservables:
    def test_real_congruence_ordering(self):
        # enumerate by hand: lexicographic I<X<Y<Z, drop II and odd-Y words
        obs = select_observables(2, 4, "real_congruence")
        assert [o.word for o in obs] == ["IX", "IZ", "XI", "XX"]

    def test_real_congruence_full_pool(self):
        obs = select_observables(2, 9, "real_congruence")
        assert [o.word for o in obs] == ["IX", "IZ", "XI", "XX", "XZ", "YY", "ZI", "ZX", "ZZ"]

    def test_unitary_single_qubit(self):
        assert [o.word for o in select_observables(1, 3, "unitary")] == ["X", "Y", "Z"]

    def test_pool_exhausted(self):
        for mode in ("real_congruence", "unitary"):
            with pytest.raises(ConfigError):
                select_observables(2, 100, mode)

    def test_bad_mode(self):
        with pytest.raises(ConfigError):
            select_observables(2, 1, "banana")


class TestAmplitudeEncode:
    def test_normalization(self):
        np.testing.assert_allclose(amplitude_encode([3.0, 4.0], 1), [0.6, 0.8])

    def test_basis_state(self):
        np.testing.assert_array_equal(amplitude_encode([1.0, 0, 0, 0], 2), [1, 0, 0, 0])

    def test_zero_vector(self):
        with pytest.raises(DegenerateTokenError):
            amplitude_encode([0.0, 0.0], 1)

    def test_padding(self):
        state = amplitude_encode([1.0, 1.0, 1.0], 2)
        np.testing.assert_allclose(state, [1 / np.sqrt(3)] * 3 + [0.0])

    def test_too_large(self):
        with pytest.raises(ConfigError):
            amplitude_encode(np.ones(5), 2)


class TestHeaUnitary:
    def test_zero_angles_give_cnot(self):
        u = hea_unitary(AnsatzParams(np.zeros((1, 2, 3))))
        np.testing.assert_allclose(u, CNOT, atol=1e-15)

    def test_cnot_chain_three_qubits(self):
        # apply CNOT(0->1) then CNOT(1->2) to |100>: expect |111>
        chain = cnot_chain(3)
        src = np.zeros(8)
        src[0b100] = 1.0
        out = chain @ src
        assert out[0b111] == 1.0

    def test_unitarity_random(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 4))
            p = int(rng.integers(1, 4))
            u = hea_unitary(AnsatzParams.random(rng, n, p))
            assert np.abs(u.conj().T @ u - np.eye(2**n)).max() < 1e-12

    def test_single_qubit_rx_pi(self):
        theta = np.zeros((1, 1, 3))
        theta[0, 0, 0] = np.pi
        u = hea_unitary(AnsatzParams(theta))
        assert abs(abs(u[0, 1]) - 1.0) < 1e-12  # RX(pi) = -iX up to phase

    def test_layers_compose(self, rng):
        params = AnsatzParams.random(rng, 2, 3)
        u_full = hea_unitary(params)
        u_prod = np.eye(4, dtype=complex)
        for layer in range(3):
            u_prod = hea_unitary(AnsatzParams(params.theta[layer][None])) @ u_prod
        assert np.abs(u_full - u_prod).max() < 1e-12

    def test_angle_gradients(self, rng):
        theta0 = rng.uniform(-np.pi, np.pi, size=(2, 2, 3))
        w_re = rng.normal(size=(4, 4))
        w_im = rng.normal(size=(4, 4))

        def loss_data(arr):
            u = hea_unitary(AnsatzParams(arr))
            return float((u.real * w_re).sum() + (u.imag * w_im).sum())

        t = Tensor(theta0.copy(), requires_grad=True)
        re, im = hea_unitary_tensors(t, 2, 2)
        ((re * Tensor(w_re)).sum() + (im * Tensor(w_im)).sum()).backward()
        numeric = finite_diff(loss_data, theta0.copy())
        assert rel_err(t.grad, numeric) < 1e-6


class TestExpectation:
    def test_eigenstate(self):
        assert expectation([1, 0], pauli_matrix("Z")) == 1.0

    def test_superposition(self):
        plus = np.array([1, 1]) / np.sqrt(2)
        assert abs(expectation(plus, pauli_matrix("Z"))) < 1e-12
        assert abs(expectation(plus, pauli_matrix("X")) - 1.0) < 1e-12

    def test_non_hermitian_rejected(self):
        with pytest.raises(ContractError):
            expectation([1, 0], np.array([[0, 1], [0, 0]], dtype=complex))

    def test_unnormalized_rejected(self):
        with pytest.raises(ContractError):
            expectation([1, 1], pauli_matrix("Z"))

    def test_bounds(self, rng):
        for _ in range(50):
            n = int(rng.integers(1, 4))
            word = "".join(rng.choice(list("IXYZ"), size=n))
            v = rng.normal(size=2**n) + 1j * rng.normal(size=2**n)
            v /= np.linalg.norm(v)
            assert -1.0 - 1e-12 <= expectation(v, pauli_matrix(word)) <= 1.0 + 1e-12


class TestCongruenceExpectation:
    def test_identity_map_basis_state(self):
        w = Tensor(np.eye(4))
        val = congruence_expectation(np.array([1.0, 0, 0, 0]), w, "ZZ")
        assert abs(val.item() - 1.0) < 1e-15

    def test_quadratic_scaling(self):
        w = Tensor(2 * np.eye(4))
        val = congruence_expectation(np.array([1.0, 0, 0, 0]), w, "ZZ")
        assert abs(val.item() - 4.0) < 1e-15

    def test_against_dense_oracle(self, rng):
        for _ in range(10):
            w = rng.normal(size=(4, 4))
            x = rng.normal(size=4)
            x /= np.linalg.norm(x)
            for word in ("IX", "XX", "ZZ", "YY"):
                got = congruence_expectation(x, Tensor(w), word).item()
                p = pauli_matrix(word)
                expect = np.real(x @ w.T @ p @ w @ x)
                assert abs(got - expect) < 1e-12

    def test_odd_y_rejected(self):
        with pytest.raises(ConfigError):
            congruence_expectation(np.array([1.0, 0, 0, 0]), Tensor(np.eye(4)), "IY")

    def test_odd_y_strings_vanish_brute_force(self, rng):
        odd = [PauliString("".join(w)) for w in
               ("IY", "YI", "XY", "YX", "ZY", "YZ")]
        for _ in range(100):
            w = rng.normal(size=(4, 4))
            x = rng.normal(size=4)
            for p in odd:
                val = np.real(x @ w.T @ pauli_matrix(p) @ w @ x)
                assert abs(val) < 1e-12

    def test_gradient_wrt_map_and_input(self, rng):
        x0 = rng.normal(size=4)
        x0 /= np.linalg.norm(x0)
        w0 = rng.normal(size=(4, 4))

        w = Tensor(w0.copy(), requires_grad=True)
        congruence_expectation(x0, w, "XZ").backward()
        numeric = finite_diff(lambda arr: congruence_expectation(x0, Tensor(arr), "XZ").item(), w0.copy())
        assert rel_err(w.grad, numeric) < 1e-4

        xt = Tensor(x0.copy(), requires_grad=True)
        congruence_expectation(xt, Tensor(w0), "XZ").backward()
        numeric = finite_diff(lambda arr: congruence_expectation(arr, Tensor(w0), "XZ").item(), x0.copy())
        assert rel_err(xt.grad, numeric) < 1e-4


class TestObservableCache:
    def test_identity_evolution(self):
        obs = select_observables(2, 4, "unitary")
        cache = build_cache("ansatz", {(0, 0): np.eye(4, dtype=complex)}, obs)
        for k, o in enumerate(obs):
            np.testing.assert_allclose(cache.entry(0, 0).value[0, k], pauli_matrix(o), atol=1e-15)

    def test_cached_matches_direct_simulation(self, rng):
        obs = select_observables(2, 6, "unitary")
        u = hea_unitary(AnsatzParams.random(rng, 2, 2))
        cache = build_cache("ansatz", {(0, 0): u}, obs)
        for _ in range(20):
            x = rng.normal(size=4)
            x /= np.linalg.norm(x)
            for k, o in enumerate(obs):
                direct = expectation(u @ x.astype(complex), pauli_matrix(o))
                assert abs(cached_expectation(x, cache, 0, 0, k) - direct) < 1e-10

    def test_congruence_identity(self, rng):
        obs = select_observables(2, 4, "real_congruence")
        cache = build_cache("congruence", {(0, 0): np.eye(4)}, obs)
        x = rng.normal(size=4)
        x /= np.linalg.norm(x)
        for k, o in enumerate(obs):
            direct = congruence_expectation(x, Tensor(np.eye(4)), o).item()
            assert abs(cached_expectation(x, cache, 0, 0, k) - direct) < 1e-12

    def test_congruence_random_map(self, rng):
        obs = select_observables(2, 4, "real_congruence")
        w = rng.normal(size=(4, 4))
        cache = build_cache("congruence", {(0, 0): w}, obs)
        for _ in range(20):
            x = rng.normal(size=4)
            x /= np.linalg.norm(x)
            for k, o in enumerate(obs):
                direct = congruence_expectation(x, Tensor(w), o).item()
                assert abs(cached_expectation(x, cache, 0, 0, k) - direct) < 1e-10

    def test_identity_cache_all_z(self):
        obs = [PauliString("ZZ")]
        cache = build_cache("ansatz", {(0, 0): np.eye(4, dtype=complex)}, obs)
        assert cached_expectation([1.0, 0, 0, 0], cache, 0, 0, 0) == 1.0

    def test_missing_entry(self):
        cache = build_cache("ansatz", {(0, 0): np.eye(2, dtype=complex)}, [PauliString("Z")])
        with pytest.raises(CacheMissError):
            cached_expectation([1.0, 0], cache, 3, 0, 0)

    def test_stale_hash(self):
        cache = build_cache("ansatz", {(0, 0): np.eye(2, dtype=complex)}, [PauliString("Z")],
                            built_from="abc123")
        with pytest.raises(CacheMissError):
            cached_expectation([1.0, 0], cache, 0, 0, 0, params_hash="zzz999")
        assert cached_expectation([1.0, 0], cache, 0, 0, 0, params_hash="abc123") == 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigError):
            build_cache("ansatz", {(0, 0): np.eye(2, dtype=complex)}, [PauliString("ZZ")])

    def test_hermiticity_preserved(self, rng):
        obs = select_observables(2, 4, "unitary")
        u = hea_unitary(AnsatzParams.random(rng, 2, 1))
        cache = build_cache("ansatz", {(0, 0): u}, obs)
        arr = cache.entry(0, 0).value
        assert np.abs(arr - np.conj(np.swapaxes(arr, -1, -2))).max() < 1e-12

    def test_immutable(self, rng):
        cache = build_cache("ansatz", {(0, 0): np.eye(2, dtype=complex)}, [PauliString("Z")])
        with pytest.raises(ValueError):
            cache.entry(0, 0).value[0, 0, 0, 0] = 5.0
        with pytest.raises(TypeError):
            cache.evolved[(1, 1)] = None

    def test_roundtrip_serialization(self, rng, tmp_path):
        obs = select_observables(2, 5, "unitary")
        u1 = hea_unitary(AnsatzParams.random(rng, 2, 2))
        u2 = hea_unitary(AnsatzParams.random(rng, 2, 2))
        cache = build_cache("ansatz", {(0, 0): u1, (1, 0): u2}, obs,
                            variant="qisa_a", p=2, built_from="deadbeef")
        path = tmp_path / "cache.bin"
        save_cache(cache, path)
        loaded = load_cache(path)
        assert loaded.kind == "ansatz"
        assert loaded.variant == "qisa_a"
        assert loaded.built_from == "deadbeef"
        assert loaded.observables == cache.observables
        for key in cache.evolved:
            np.testing.assert_array_equal(loaded.entry(*key).value, cache.entry(*key).value)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a cache")
        with pytest.raises(ConfigError):
            load_cache(path)
