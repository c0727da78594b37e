import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imp_lasso.scm import (
    EnvParams,
    MeasurementErrorSpec,
    ModelError,
    NonlinearitySpec,
    ScmModel,
    derive_rng,
    dump_model,
    load_model,
    perturb_environments,
    population_moments,
    random_model,
    sample_environment,
)


def chain_model():
    """X1 -> Y -> X2 with unit coefficients and standard normal noise."""
    return ScmModel(np.zeros((2, 2)), gamma=[0.0, 1.0], beta=[1.0, 0.0])


def two_x_chain():
    """X1 = e1, Y = 2 X1 + eY, X2 = Y + e2."""
    return ScmModel(np.zeros((2, 2)), gamma=[0.0, 1.0], beta=[2.0, 0.0])


class TestSampling:
    def test_degenerate_constant(self):
        m = ScmModel(np.zeros((1, 1)), [0.0], [1.0], noise_mean=[2.0, 0.0], noise_var=[0.0, 0.0])
        x, y = sample_environment(m, EnvParams("e", [0.0], 0.0), 7, derive_rng(0))
        assert np.all(x == 2.0) and np.all(y == 2.0)

    def test_mean_shift_additive(self):
        m = ScmModel(np.zeros((1, 1)), [0.0], [1.0], noise_mean=[2.0, 0.0], noise_var=[0.0, 0.0])
        _, y = sample_environment(m, EnvParams("e", [0.0], 3.0), 7, derive_rng(0))
        assert np.all(y == 5.0)

    def test_chain_child_variance(self):
        n = 100_000
        x, _ = sample_environment(chain_model(), EnvParams("e", [0.0, 0.0]), n, derive_rng(1))
        v = x[:, 1].var()
        se = 3.0 * np.sqrt(2.0 / (n - 1))  # Gaussian sample variance SE
        assert abs(v - 3.0) < 3 * se

    def test_identity_transform_is_bit_identical(self):
        m = random_model(derive_rng(3), 5)
        m, envs = perturb_environments(m, derive_rng(4), 1, 0, 2.0, 10.0)
        plain = sample_environment(m, envs[0], 50, derive_rng(5))
        same = sample_environment(
            m, envs[0], 50, derive_rng(5), NonlinearitySpec(1.0, enabled=True), MeasurementErrorSpec(0.0)
        )
        for a, b in zip(plain, same):
            assert np.array_equal(a, b)

    def test_nonlinear_wraps_whole_assignment(self):
        m = ScmModel(np.zeros((1, 1)), [0.0], [1.0], noise_mean=[2.0, 0.0], noise_var=[0.0, 0.0])
        _, y = sample_environment(m, EnvParams("e", [0.0], 2.0), 3, derive_rng(0), NonlinearitySpec(0.5, True))
        assert np.allclose(y, 2.0)  # sqrt(2 + 2)

    def test_children_see_latent_response(self):
        m = ScmModel(np.zeros((2, 2)), [0.0, 1.0], [1.0, 0.0], noise_var=[1.0, 0.0, 0.0])
        x, y = sample_environment(m, EnvParams("e", [0.0, 0.0]), 20, derive_rng(0), NonlinearitySpec(0.5, True))
        assert np.allclose(x[:, 1], y)

    def test_measurement_error_spares_test_response(self):
        m = chain_model()
        env = EnvParams("e", [0.0, 0.0])
        me = MeasurementErrorSpec(2.5)
        _, y_lat = sample_environment(m, env, 100, derive_rng(9))
        _, y_test = sample_environment(m, env, 100, derive_rng(9), me=me, is_test=True)
        _, y_train = sample_environment(m, env, 100, derive_rng(9), me=me, is_test=False)
        assert np.array_equal(y_lat, y_test)
        assert not np.allclose(y_lat, y_train)

    def test_measurement_error_variance(self):
        n = 100_000
        x, _ = sample_environment(chain_model(), EnvParams("e", [0.0, 0.0]), n, derive_rng(2),
                                  me=MeasurementErrorSpec(2.5))
        assert abs(x[:, 0].var() - 3.5) < 5 * 3.5 * np.sqrt(2.0 / n)

    def test_nonfinite_raises(self):
        m = ScmModel(np.zeros((1, 1)), [0.0], [1.0], noise_mean=[1e308, 0.0], noise_var=[0.0, 0.0])
        with pytest.raises(FloatingPointError):
            sample_environment(m, EnvParams("e", [0.0], 1e308), 2, derive_rng(0))

    def test_n_must_be_positive(self):
        with pytest.raises(ValueError):
            sample_environment(chain_model(), EnvParams("e", [0.0, 0.0]), 0, derive_rng(0))

    def test_intervention_locality(self):
        m = random_model(derive_rng(21), 6)
        m, envs = perturb_environments(m, derive_rng(22), 2, 0, 5.0, 5.0)
        nondesc = [j for j in range(m.d) if j not in m.descendants_of_response()]
        assert nondesc
        n = 50_000
        xa, _ = sample_environment(m, envs[0], n, derive_rng(23))
        xb, _ = sample_environment(m, envs[1], n, derive_rng(24))
        for j in nondesc:
            va, vb = xa[:, j].var(), xb[:, j].var()
            se = np.sqrt(va / n + vb / n)
            assert abs(xa[:, j].mean() - xb[:, j].mean()) < 5 * se
            assert abs(va - vb) < 5 * np.sqrt(2 * (va**2 + vb**2) / n)


class TestMoments:
    def test_hand_example(self):
        mean, cov = population_moments(two_x_chain(), EnvParams("e", [0.0, 0.0]))
        # order is (X1, X2, Y)
        assert cov[2, 2] == pytest.approx(5.0)
        assert cov[0, 2] == pytest.approx(2.0)
        assert cov[1, 1] == pytest.approx(6.0)
        assert cov[2, 1] == pytest.approx(5.0)
        assert np.allclose(mean, 0.0)

    def test_zero_coefficients(self):
        m = ScmModel(np.zeros((3, 3)), np.zeros(3), [1e-300, 0, 0], noise_mean=[1, 2, 3, 4],
                     noise_var=[1, 2, 3, 4])
        mean, cov = population_moments(m, EnvParams("e", np.zeros(3)))
        assert np.allclose(cov, np.diag([1, 2, 3, 4]))
        assert np.allclose(mean, [1, 2, 3, 4])

    def test_mu_shifts_mean_only(self):
        m = random_model(derive_rng(5), 4)
        m0, c0 = population_moments(m, EnvParams("a", np.zeros(4), 0.0))
        m1, c1 = population_moments(m, EnvParams("b", np.zeros(4), 1.5))
        assert np.allclose(c0, c1)
        assert m1[-1] - m0[-1] == pytest.approx(1.5)

    def test_rejects_nonlinear(self):
        with pytest.raises(ValueError):
            population_moments(chain_model(), EnvParams("e", [0.0, 0.0]), NonlinearitySpec(0.5, True))

    @pytest.mark.parametrize("seed", range(3))
    def test_empirical_agreement(self, seed):
        m = random_model(derive_rng(100, seed), 4)
        m, envs = perturb_environments(m, derive_rng(101, seed), 1, 0, 2.0, 2.0)
        n = 100_000
        x, y = sample_environment(m, envs[0], n, derive_rng(102, seed))
        v = np.column_stack([x, y])
        mean, cov = population_moments(m, envs[0])
        se_mean = np.sqrt(np.diag(cov) / n)
        assert np.all(np.abs(v.mean(axis=0) - mean) < 5 * se_mean)
        se_cov = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov**2) / n)
        assert np.all(np.abs(np.cov(v.T) - cov) < 5 * se_cov)


class TestModel:
    def test_cycle_rejected(self):
        b = np.array([[0.0, 1.0], [1.0, 0.0]])
        with pytest.raises(ModelError):
            ScmModel(b, [0, 0], [1, 0])

    def test_cycle_through_response(self):
        b = np.array([[0.0, 0.0], [1.0, 0.0]])  # X1 -> X2
        with pytest.raises(ModelError):
            ScmModel(b, gamma=[1.0, 0.0], beta=[0.0, 1.0])  # Y -> X1 -> X2 -> Y

    def test_parent_and_child(self):
        with pytest.raises(ModelError):
            ScmModel(np.zeros((2, 2)), [1.0, 0.0], [1.0, 0.0])

    def test_pe_subset(self):
        with pytest.raises(ModelError):
            ScmModel(np.zeros((2, 2)), [0, 1], [1, 0], pe_set=(1,))

    def test_bad_topo_order(self):
        with pytest.raises(ModelError):
            ScmModel(np.zeros((2, 2)), [0, 1], [1, 0], topo_order=(2, 0, 1))

    def test_alpha_outside_pe(self):
        m = ScmModel(np.zeros((2, 2)), [0, 1], [1, 0], pe_set=())
        with pytest.raises(ModelError):
            EnvParams("e", [1.0, 0.0]).check(m)

    def test_nonlinearity_spec(self):
        assert NonlinearitySpec(1.0, True).is_identity
        assert not NonlinearitySpec(0.5, True).is_identity
        with pytest.raises(ValueError):
            NonlinearitySpec(0.0)
        with pytest.raises(ValueError):
            MeasurementErrorSpec(-1.0)

    def test_serialization_roundtrip(self, tmp_path):
        m = random_model(derive_rng(8), 6)
        m, envs = perturb_environments(m, derive_rng(9), 2, 1, 2.0, 10.0)
        path = tmp_path / "m.json"
        dump_model(m, envs, path)
        doc = json.loads(path.read_text())
        assert set(doc) == {"model", "environments"}
        m2, envs2 = load_model(path)
        assert np.array_equal(m2.b_matrix, m.b_matrix)
        assert m2.pe_set == m.pe_set and m2.topo_order == m.topo_order
        assert [e.env_id for e in envs2] == [e.env_id for e in envs]
        assert all(np.array_equal(a.alpha, b.alpha) and a.mu == b.mu for a, b in zip(envs, envs2))


class TestRandomModel:
    def test_d9_structure(self):
        m = random_model(derive_rng(0), 9)
        assert m.d == 9
        assert m.response_parents and m.response_children

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), d=st.integers(3, 9))
    def test_properties(self, seed, d):
        m = random_model(derive_rng(seed), d)
        assert m.response_parents and m.response_children
        a = m.joint_matrix()
        pos = {node: i for i, node in enumerate(m.topo_order)}
        rows, cols = np.nonzero(a)
        assert all(pos[j] < pos[i] for i, j in zip(rows, cols))
        # nilpotent
        assert np.allclose(np.linalg.matrix_power(a, d + 1), 0.0)
        nz = np.abs(a[a != 0])
        assert np.all((nz >= 0.5) & (nz <= 1.5))

    def test_deterministic(self):
        a = random_model(derive_rng(42), 7)
        b = random_model(derive_rng(42), 7)
        assert np.array_equal(a.joint_matrix(), b.joint_matrix())

    def test_small_d_rejected(self):
        with pytest.raises(ValueError):
            random_model(derive_rng(0), 2)


class TestPerturb:
    def test_bounds(self):
        m = random_model(derive_rng(1), 9)
        m, envs = perturb_environments(m, derive_rng(2), 5, 5, 2.0, 10.0)
        assert len(envs) == 10
        assert 1 <= len(m.pe_set) <= len(m.response_parents)
        for e in envs[:5]:
            assert np.all(np.abs(e.alpha) <= 2.0) and abs(e.mu) <= 2.0
        for e in envs[5:]:
            assert np.all(np.abs(e.alpha) <= 10.0) and abs(e.mu) <= 10.0
        for e in envs:
            e.check(m)

    def test_zero_scale(self):
        m = random_model(derive_rng(1), 5)
        _, envs = perturb_environments(m, derive_rng(2), 3, 3, 0.0, 0.0)
        assert all(np.all(e.alpha == 0) and e.mu == 0 for e in envs)

    def test_deterministic(self):
        m = random_model(derive_rng(1), 5)
        _, a = perturb_environments(m, derive_rng(7), 2, 2, 2.0, 10.0)
        _, b = perturb_environments(m, derive_rng(7), 2, 2, 2.0, 10.0)
        assert all(np.array_equal(x.alpha, y.alpha) and x.mu == y.mu for x, y in zip(a, b))

    def test_no_parents(self):
        m = ScmModel(np.zeros((2, 2)), [1.0, 0.0], [0.0, 0.0])
        with pytest.raises(ModelError):
            perturb_environments(m, derive_rng(0), 1, 1, 1.0, 1.0)

    def test_fixed_pe(self):
        m = random_model(derive_rng(3), 6)
        pa = m.response_parents
        m2, envs = perturb_environments(m, derive_rng(4), 2, 0, 2.0, 2.0, pe_set=pa[:1])
        assert m2.pe_set == pa[:1]


def test_derived_streams_independent_of_later_keys():
    a = derive_rng(5, 0, 2, 1).standard_normal(4)
    b = derive_rng(5, 0, 2, 1).standard_normal(4)
    c = derive_rng(5, 0, 2, 2).standard_normal(4)
    assert np.array_equal(a, b) and not np.array_equal(a, c)
