"""Feature maps, set-membership and Bayesian linear regression estimators."""

import numpy as np
import pytest

from armpc import estimation
from armpc.estimation import (
    AnalyticFeatureMap,
    BLRState,
    EmptyFeasibleSetError,
    LinearParamModel,
    LoadedNetworkFeatureMap,
    SetMembershipState,
    publish_gate,
    residual,
)
from armpc.geometry import Box
from armpc.optimization import chi_square_quantile

A_DI = np.array([[1.0, 0.2], [0.0, 1.0]])
B_DI = np.array([[0.0], [1.0]])


def scalar_feature():
    return AnalyticFeatureMap("one", lambda x: np.atleast_1d(x)[:1] * 0 + 1.0,
                              1, 1)


class TestResidual:
    def test_zero_on_nominal_transition(self):
        x = np.array([1.0, -0.5])
        u = np.array([0.3])
        x_next = A_DI @ x + B_DI @ u
        assert np.allclose(residual(x_next, x, u, A_DI, B_DI), 0.0)

    def test_recovers_unknown_term(self):
        x = np.array([0.2, 0.7])
        u = np.array([-1.0])
        f = np.array([0.0, 0.5 * np.tanh(x[1])])
        x_next = A_DI @ x + B_DI @ u + f
        assert np.allclose(residual(x_next, x, u, A_DI, B_DI), f)


class TestSetMembership:
    def test_interval_intersection(self):
        state = SetMembershipState.from_box_prior(
            np.zeros((1, 1)), 1.0, scalar_feature()
        )
        state.update(np.array([1.0]), np.array([0.6]), Box.centered([0.4]))
        W, r = state.point_estimate()
        assert W[0, 0] == pytest.approx(0.6)
        assert r[0] == pytest.approx(0.4)

    def test_implied_observation_is_noop(self):
        state = SetMembershipState.from_box_prior(
            np.zeros((1, 1)), 1.0, scalar_feature()
        )
        V = Box.centered([2.0])   # wider than the prior box: no new info
        state.update(np.array([1.0]), np.array([0.0]), V)
        W, r = state.point_estimate()
        assert W[0, 0] == pytest.approx(0.0)
        assert r[0] == pytest.approx(1.0)

    def test_radii_non_increasing_and_consistent(self):
        rng = np.random.default_rng(6)
        w_true = np.array([[0.5, 0.5]])
        fmap = AnalyticFeatureMap(
            "pair", lambda x: np.array([np.tanh(x[0]), np.tanh(x[1])]) / np.sqrt(2),
            2, 2,
        )
        state = SetMembershipState.from_box_prior(np.zeros((1, 2)), 1.0, fmap)
        V = Box.centered([0.4])
        prev_r = np.inf
        for _ in range(60):
            x = rng.uniform(-2.0, 2.0, size=2)
            phi = fmap(x)
            y = w_true @ phi + rng.uniform(-0.4, 0.4, size=1)
            state.update(phi, y, V)
            _, r = state.point_estimate()
            assert r[0] <= prev_r + 1e-9
            prev_r = r[0]
        W, r = state.point_estimate()
        assert np.linalg.norm(W - w_true) <= r[0] + 1e-9

    def test_misspecification_collapse_raises(self):
        state = SetMembershipState.from_box_prior(
            np.zeros((1, 1)), 1.0, scalar_feature()
        )
        V = Box.centered([0.1])
        state.update(np.array([1.0]), np.array([0.9]), V)   # w in [0.8, 1.0]
        with pytest.raises(EmptyFeasibleSetError):
            state.update(np.array([1.0]), np.array([-0.9]), V)


class TestBLRUpdate:
    def test_scalar_rank_one_step(self):
        state = BLRState(np.zeros((1, 1)), np.eye(1), 1.0, 0.05,
                         scalar_feature())
        state.update(np.array([1.0]), np.array([1.0]))
        assert state.means[0][0] == pytest.approx(0.5)
        assert state.Lambda_inv[0][0, 0] == pytest.approx(0.5)

    def test_zero_feature_is_noop(self):
        state = BLRState(np.zeros((1, 2)), np.eye(2), 1.0, 0.05,
                         AnalyticFeatureMap("z", lambda x: np.zeros(2), 2, 2))
        state.update(np.zeros(2), np.array([3.0]))
        assert np.allclose(state.means[0], 0.0)
        assert np.allclose(state.Lambda_inv[0], np.eye(2))

    def test_sequential_equals_batch_closed_form(self):
        # [DERIVED] normal-equations oracle: the posterior after T rank-one
        # updates must match Lambda = Lambda0 + Phi'Phi and
        # mean = Lambda^{-1} (Lambda0 w0 + Phi'y) computed directly.
        rng = np.random.default_rng(7)
        for _ in range(25):
            d = int(rng.integers(1, 6))
            T = int(rng.integers(5, 60))
            Phi = rng.normal(size=(T, d))
            Y = rng.normal(size=(T, 1))
            L0 = np.eye(d) * rng.uniform(0.5, 2.0)
            w0 = rng.normal(size=d)
            state = BLRState(w0[None, :], L0, 1.0, 0.05,
                             AnalyticFeatureMap("r", lambda x: x, d, d))
            for phi, y in zip(Phi, Y):
                state.update(phi, y)
            Lam = L0 + Phi.T @ Phi
            mean = np.linalg.solve(Lam, L0 @ w0 + Phi.T @ Y[:, 0])
            assert np.allclose(state.means[0], mean, atol=1e-8)
            assert np.allclose(np.linalg.inv(state.Lambda_inv[0]), Lam,
                               atol=1e-8)

    def test_precision_only_grows(self):
        rng = np.random.default_rng(8)
        state = BLRState(np.zeros((1, 3)), np.eye(3), 1.0, 0.05,
                         AnalyticFeatureMap("r", lambda x: x, 3, 3))
        for _ in range(30):
            state.update(rng.normal(size=3), rng.normal(size=1))
            gap = state.precision(0) - np.eye(3)
            assert np.min(np.linalg.eigvalsh(gap)) >= -1e-9


class TestBLRConfidence:
    def test_prior_formula(self):
        # At t = 0 the determinant ratio is 1 and the eigenvalue ratio is 1,
        # so beta = sqrt(2 log(1/delta')) + sqrt(chi2_d(1 - delta')).
        sigma, delta, lam = 0.3, 0.05, 4.0
        state = BLRState(np.zeros((2, 1)), lam * np.eye(1), sigma, delta,
                         scalar_feature())
        dprime = delta / 2
        beta = np.sqrt(2.0 * np.log(1.0 / dprime)) \
            + np.sqrt(chi_square_quantile(1, 1.0 - dprime))
        expected = sigma * beta / np.sqrt(lam)
        assert np.allclose(state.confidence_max_norm(), expected, atol=1e-9)

    def test_shrinks_with_data(self):
        rng = np.random.default_rng(9)
        state = BLRState(np.zeros((1, 2)), np.eye(2), 0.1, 0.05,
                         AnalyticFeatureMap("r", lambda x: x, 2, 2))
        start = state.confidence_max_norm()[0]
        for _ in range(500):
            state.update(rng.normal(size=2), rng.normal(size=1) * 0.1)
        assert state.confidence_max_norm()[0] < start


class TestPublishGate:
    def model(self, radius):
        return LinearParamModel(np.array([[0.5]]), np.array([radius]),
                                scalar_feature())

    def test_smaller_radius_published(self):
        cand, cur = self.model(0.2), self.model(0.4)
        assert publish_gate(cand, cur) is cand

    def test_grown_radius_retained(self):
        cand, cur = self.model(0.5), self.model(0.4)
        assert publish_gate(cand, cur) is cur

    def test_no_current_publishes(self):
        cand = self.model(1.0)
        assert publish_gate(cand, None) is cand


class TestFeatureMaps:
    def test_analytic_norm_bound_on_constraint_set(self):
        from armpc.simulation import make_double_integrator

        rng = np.random.default_rng(10)
        for matched in (True, False):
            plant = make_double_integrator(matched=matched)
            pts = Box.from_bounds([-4.0, -3.0], [4.0, 3.0]).sample(rng, 2000)
            norms = [np.linalg.norm(plant.feature_map(x)) for x in pts]
            assert max(norms) <= 1.0 + 1e-9

    def test_loaded_network_round_trip(self, tmp_path):
        import armpc

        bundled = (np.array([[[0.5, -0.2]], [[1.0]]], dtype=object),)
        path = tmp_path / "net.json"
        fmap = LoadedNetworkFeatureMap(
            [np.array([[0.5, -0.2], [0.1, 0.3]]), np.array([[1.0, -1.0]])],
            [np.zeros(2), np.zeros(1)],
            ["relu", "sigmoid"],
            1.0,
        )
        fmap.save(path)
        reloaded = LoadedNetworkFeatureMap.load(path)
        x = np.array([0.4, -0.9])
        assert np.allclose(fmap(x), reloaded(x))

    def test_bundled_artifact_loads_and_is_bounded(self):
        from pathlib import Path

        import armpc

        path = Path(armpc.__file__).parent / "data" / \
            "example_network_features.json"
        fmap = LoadedNetworkFeatureMap.load(path)
        rng = np.random.default_rng(11)
        pts = rng.uniform(-5.0, 5.0, size=(2000, fmap.input_dim))
        norms = [np.linalg.norm(fmap(x)) for x in pts]
        assert max(norms) <= 1.0 + 1e-9

    def test_wrong_output_scale_rejected(self):
        with pytest.raises(ValueError):
            LoadedNetworkFeatureMap(
                [np.eye(2)], [np.zeros(2)], ["sigmoid"], 1.0
            )

    def test_wrong_activation_rejected(self):
        with pytest.raises(ValueError):
            LoadedNetworkFeatureMap(
                [np.eye(2)], [np.zeros(2)], ["relu"], 1.0 / np.sqrt(2.0)
            )
