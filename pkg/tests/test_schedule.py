import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sbmce.errors import ParameterError
from sbmce.schedule import build_schedule, initial_step, skip_indices, step_targets


def schedule_formula(k, K, gamma, sigma_min, sigma_max):
    """Oracle: direct scalar evaluation of the power-exponentiated geometric sequence."""
    return sigma_min * (sigma_max / sigma_min) ** (((k - 1) / (K - 1)) ** gamma)


class TestBuildSchedule:
    def test_paper_endpoints(self):
        s = build_schedule(40.0, -22.0, 100, 1.0)
        assert s.sigma_min == pytest.approx(0.01, abs=1e-15)
        assert s.sigma_max == pytest.approx(12.589254117941675, abs=1e-12)
        assert abs(s.sigma_max - 12.6) < 0.011
        assert s.sigma(1) == s.sigma_min and s.sigma(100) == s.sigma_max
        assert s.K == 100

    def test_two_steps_are_endpoints(self):
        s = build_schedule(40.0, -22.0, 2, 1.0)
        np.testing.assert_array_equal(s.sigmas, [s.sigma_min, s.sigma_max])

    def test_gamma_02_step_50_matches_formula(self):
        s = build_schedule(40.0, -22.0, 100, 0.2)
        expected = schedule_formula(50, 100, 0.2, math.sqrt(1e-4), math.sqrt(10**2.2))
        assert s.sigma(50) == pytest.approx(expected, rel=1e-13)

    @pytest.mark.parametrize("gamma", [0.2, 0.6, 1.0, 1.6])
    def test_all_steps_match_formula(self, gamma):
        s = build_schedule(30.0, -10.0, 37, gamma)
        for k in range(1, 38):
            assert s.sigma(k) == pytest.approx(
                schedule_formula(k, 37, gamma, s.sigma_min, s.sigma_max), rel=1e-12
            )

    def test_strictly_increasing(self):
        s = build_schedule(40.0, -22.0, 100, 0.6)
        assert np.all(np.diff(s.sigmas) > 0)

    def test_sigma_zero(self):
        assert build_schedule(40, -22, 10, 1.0).sigma(0) == 0.0

    @pytest.mark.parametrize(
        "args", [(40, -22, 1, 1.0), (40, -22, 100, 0.0), (40, -22, 100, -1.0), (10, 10, 5, 1.0)]
    )
    def test_invalid(self, args):
        with pytest.raises(ParameterError):
            build_schedule(*args)


class TestInitialStep:
    sched = build_schedule(40.0, -22.0, 100, 1.0)

    def test_exact_hit(self):
        assert initial_step(self.sched.sigma(7) ** 2, self.sched) == 7

    def test_clamps(self):
        assert initial_step(10 * self.sched.sigma_max**2, self.sched) == 100
        assert initial_step(0.0, self.sched) == 1
        assert initial_step(self.sched.sigma_min**2 / 10, self.sched) == 1

    def test_zero_db_matches_linear_scan(self):
        table = [self.sched.sigma(k) ** 2 for k in range(1, 101)]
        best_k, best = None, math.inf
        for k, s2 in enumerate(table, start=1):
            if abs(1.0 - s2) < best:
                best_k, best = k, abs(1.0 - s2)
        assert initial_step(1.0, self.sched) == best_k

    def test_tie_goes_to_smaller_k(self):
        s = build_schedule(20.0, 0.0, 2, 1.0)
        mid = 0.5 * (s.sigma(1) ** 2 + s.sigma(2) ** 2)
        assert initial_step(mid, s) == 1

    def test_negative_rejected(self):
        with pytest.raises(ParameterError):
            initial_step(-1.0, self.sched)

    def test_monotone_in_noise(self):
        grid = np.logspace(-6, 3, 400)
        ks = [initial_step(e, self.sched) for e in grid]
        assert all(a <= b for a, b in zip(ks, ks[1:]))

    def test_smaller_gamma_needs_fewer_steps(self):
        scheds = [build_schedule(40.0, -22.0, 100, g) for g in (0.2, 0.6, 1.0, 1.6)]
        for snr_db in np.arange(-15.0, 20.01, 0.5):
            ks = [initial_step(10 ** (-snr_db / 10), s) for s in scheds]
            assert ks == sorted(ks), (snr_db, ks)


class TestSkipIndices:
    def test_delta_one(self):
        assert skip_indices(10, 1) == list(range(10, 0, -1))

    def test_delta_four(self):
        assert skip_indices(10, 4) == [10, 6, 2]

    def test_delta_max_is_single_step(self):
        assert skip_indices(7, 100) == [7]

    def test_exhaustive_length(self):
        for k_hat in range(1, 101):
            for delta in range(1, 101):
                idx = skip_indices(k_hat, delta)
                assert len(idx) == math.ceil(k_hat / delta)
                assert idx[-1] == (k_hat % delta or delta)

    def test_invalid_delta(self):
        with pytest.raises(ParameterError):
            skip_indices(5, 0)

    @given(k_hat=st.integers(1, 100), delta=st.integers(1, 100))
    def test_targets_end_at_zero(self, k_hat, delta):
        pairs = step_targets(k_hat, delta)
        assert pairs[-1][1] == 0
        for (k, nxt), (k2, _) in zip(pairs, pairs[1:]):
            assert nxt == k - delta == k2
