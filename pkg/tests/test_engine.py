import numpy as np
import pytest

from difftraffic import engine
from difftraffic.engine import NO_LEADER, NumericalFailure, WorldState
from difftraffic.idm import IdmParams, InvalidArgument, idm_acceleration

import helpers

DEFAULTS = IdmParams()


def two_car(p=(0.0, 20.0), v=(10.0, 8.0)):
    return WorldState(np.array(p), np.array(v), 5.0, np.array([1, NO_LEADER]), DEFAULTS)


def ring(n, spacing=25.0, v=12.0):
    return WorldState(np.arange(n) * spacing, np.full(n, v), 5.0, np.roll(np.arange(n), -1),
                      DEFAULTS, ring_length=n * spacing)


class TestGather:
    def test_direct_substitution(self):
        dp, dv = engine.gather_leader(two_car())
        assert (dp[0], dv[0]) == (15.0, 2.0)

    def test_leaderless_sentinel(self):
        dp, dv = engine.gather_leader(two_car())
        assert (dp[1], dv[1]) == (engine.D_FREE, 0.0)

    def test_symmetric_ring(self):
        dp, dv = engine.gather_leader(ring(2))
        assert dp[0] == dp[1] == 20.0
        assert dv[0] == dv[1] == 0.0

    def test_ring_wraparound(self):
        s = ring(3)
        s.positions[2] += 3 * 25.0 * 4  # a few laps ahead is the same place
        dp, _ = engine.gather_leader(s)
        np.testing.assert_allclose(dp, 20.0)


class TestStep:
    def test_zero_acceleration(self):
        # at v_targ with an infinite gap the kernel is ~0; check Euler bookkeeping directly
        s = WorldState([0.0], [10.0], 5.0, [NO_LEADER], DEFAULTS)
        out = engine.step(s, 0.1)
        a = idm_acceleration(DEFAULTS, 10.0, engine.D_FREE, 0.0, 0.1)
        assert out.positions[0] == 1.0
        assert out.speeds[0] == 10.0 + 0.1 * a

    def test_floor_hit(self):
        # nearly touching: a* sits on the -10 floor, v=1 -> 0
        s = WorldState([0.0, 5.2], [1.0, 0.0], 5.0, [1, NO_LEADER], DEFAULTS)
        out = engine.step(s, 0.1)
        assert out.speeds[0] == 0.0

    def test_ring_symmetry_preserved(self):
        out = engine.step(ring(4), 0.1)
        np.testing.assert_allclose(np.diff(out.positions), 25.0, rtol=0, atol=1e-12)
        assert np.all(out.speeds == out.speeds[0])

    def test_invalid(self):
        with pytest.raises(InvalidArgument):
            engine.step(two_car(), 0.0)
        with pytest.raises(InvalidArgument):
            engine.step(WorldState([0.0], [-1.0], 5.0, [NO_LEADER], DEFAULTS), 0.1)
        with pytest.raises(InvalidArgument):
            engine.step(WorldState([0.0], [1.0], 5.0, [0], DEFAULTS), 0.1)


class TestRollout:
    def test_one_step_is_step(self):
        s = two_car()
        buf = engine.rollout(s, 1, 0.1)
        out = engine.step(s, 0.1)
        np.testing.assert_array_equal(buf.positions[1], out.positions)
        np.testing.assert_array_equal(buf.speeds[1], out.speeds)

    @pytest.mark.xfail(strict=True, reason="a* at v_targ behind the 1e4 m sentinel is about -2.6e-4, "
                                           "so the drift grows like K^2 and exceeds 1e-6 K")
    def test_free_road_cruise_constant_speed(self):
        k, dt = 200, 0.1
        s = WorldState([3.0], [50.0], 5.0, [NO_LEADER], DEFAULTS)
        buf = engine.rollout(s, k, dt)
        assert abs(buf.positions[-1, 0] - (3.0 + k * dt * 50.0)) < 1e-6 * k

    def test_free_road_cruise_matches_kernel(self):
        k, dt = 200, 0.1
        s = WorldState([3.0], [50.0], 5.0, [NO_LEADER], DEFAULTS)
        buf = engine.rollout(s, k, dt)
        assert abs(idm_acceleration(DEFAULTS, 50.0, engine.D_FREE, 0.0, dt)) < 1e-3
        p, v = 3.0, 50.0
        for _ in range(k):
            a = idm_acceleration(DEFAULTS, v, engine.D_FREE, 0.0, dt)
            p, v = p + dt * v, max(v + dt * a, 0.0)
        assert abs(buf.positions[-1, 0] - p) < 1e-6 * k
        assert abs(buf.positions[-1, 0] - (3.0 + k * dt * 50.0)) < 0.01

    def test_replay_bit_exact(self):
        buf = engine.rollout(helpers.chain_case(np.random.default_rng(3), n=6)[0], 40, 0.1)
        np.testing.assert_array_equal(buf.positions[1:], buf.positions[:-1] + buf.dt * buf.speeds[:-1])
        np.testing.assert_array_equal(buf.speeds[1:],
                                      np.maximum(buf.speeds[:-1] + buf.dt * buf.accelerations, 0.0))

    def test_invariants(self):
        rng = np.random.default_rng(4)
        n = 30
        pos = np.sort(rng.uniform(0, 600, n))
        state = WorldState(pos, rng.uniform(0, 30, n), 4.0, np.append(np.arange(1, n), NO_LEADER),
                           helpers.random_params(rng, n))
        buf = engine.rollout(state, 300, 0.1)
        assert np.all(buf.speeds >= 0)
        assert np.all(np.diff(buf.positions, axis=0) >= 0)

    def test_thread_invariance(self):
        rng = np.random.default_rng(5)
        n = 3 * engine.CHUNK + 17
        state = WorldState(np.arange(n) * 25.0, rng.uniform(5, 20, n), 5.0, np.roll(np.arange(n), -1),
                           helpers.random_params(rng, n), ring_length=25.0 * n)
        bufs = [engine.rollout(state, 5, 0.1, threads=t) for t in (1, 2, 4)]
        grads = [engine.backward(b, b.positions, threads=t) for b, t in zip(bufs, (1, 2, 4))]
        for b, g in zip(bufs[1:], grads[1:]):
            np.testing.assert_array_equal(b.positions, bufs[0].positions)
            np.testing.assert_array_equal(g.params, grads[0].params)
            np.testing.assert_array_equal(g.speeds0, grads[0].speeds0)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(6)
        state, steps, dt = helpers.chain_case(rng, n=7)
        perm = rng.permutation(7)
        inv = np.argsort(perm)
        leader = np.where(state.leader[perm] >= 0, inv[np.maximum(state.leader[perm], 0)], NO_LEADER)
        permuted = WorldState(state.positions[perm], state.speeds[perm], state.lengths[perm], leader,
                              state.params.take(perm))
        a = engine.rollout(state, steps, dt)
        b = engine.rollout(permuted, steps, dt)
        np.testing.assert_array_equal(b.positions, a.positions[:, perm])
        ga = engine.backward(a, a.positions)
        gb = engine.backward(b, b.positions)
        np.testing.assert_allclose(gb.params, ga.params[:, perm], rtol=1e-13)

    def test_numerical_failure_names_step(self):
        s = WorldState([0.0, 20.0], [10.0, 8.0], 5.0, [1, NO_LEADER],
                       IdmParams(a_max=np.array([10.0, 10.0]), v_targ=np.array([50.0, 50.0])))
        buf = engine.rollout(s, 3, 0.1)
        grad = np.zeros_like(buf.positions)
        grad[2, 0] = np.inf
        with pytest.raises(NumericalFailure) as err:
            engine.backward(buf, grad)
        assert err.value.index == 2


class TestVirtualLeader:
    def test_initialization_speeds_rise(self):
        k = 300
        buf = engine.rollout_virtual_leader(0.0, 0.0, DEFAULTS, np.full(k, 10.0), np.zeros(k), 0.1)
        v = buf.speeds
        assert np.all(np.diff(v) >= -1e-12)
        # scalar reference rollout
        p_ref, v_ref = 0.0, 0.0
        for _ in range(k):
            a = idm_acceleration(DEFAULTS, v_ref, 10.0, 0.0, 0.1)
            p_ref, v_ref = p_ref + 0.1 * v_ref, max(v_ref + 0.1 * a, 0.0)
        assert buf.positions[-1] == p_ref and buf.speeds[-1] == v_ref

    def test_empty(self):
        buf = engine.rollout_virtual_leader(1.0, 2.0, DEFAULTS, [], [], 0.1)
        assert buf.positions.tolist() == [1.0] and buf.speeds.tolist() == [2.0]

    def test_matches_two_vehicle_rollout(self):
        state = two_car()
        ref = engine.rollout(state, 60, 0.1)
        buf = engine.rollout_virtual_leader(0.0, 10.0, DEFAULTS, ref.gaps[:, 0], ref.speed_diffs[:, 0], 0.1)
        np.testing.assert_array_equal(buf.positions, ref.positions[:, 0])

    def test_batch_equals_singles(self):
        rng = np.random.default_rng(8)
        cases = [helpers.virtual_leader_case(rng) for _ in range(3)]
        params = IdmParams(**{f: np.array([getattr(c["params"], f) for c in cases])
                              for f in ("a_max", "a_pref", "s_min", "T_pref", "v_targ")})
        batch = engine.rollout_virtual_leader(0.0, np.array([c["v0"] for c in cases]), params,
                                              np.stack([c["dp_seq"] for c in cases], 1),
                                              np.stack([c["dv_seq"] for c in cases], 1), 0.1)
        for j, c in enumerate(cases):
            np.testing.assert_array_equal(batch.positions[:, j], engine.rollout_virtual_leader(**c).positions)

    def test_length_mismatch(self):
        with pytest.raises(InvalidArgument):
            engine.rollout_virtual_leader(0.0, 1.0, DEFAULTS, [10.0, 10.0], [0.0], 0.1)


class TestBackward:
    def test_zero_gradient(self):
        buf = engine.rollout(ring(5), 10, 0.1)
        adj = engine.backward(buf, np.zeros_like(buf.positions))
        for arr in (adj.positions0, adj.speeds0, adj.params, adj.gaps, adj.speed_diffs):
            assert not np.any(arr)

    def test_one_step_position(self):
        buf = engine.rollout_virtual_leader(0.0, 7.0, DEFAULTS, [20.0], [0.0], 0.1)
        adj = engine.backward(buf, np.array([0.0, 1.0]))
        assert adj.speeds0 == 0.1
        assert adj.positions0 == 1.0

    def test_shape_check(self):
        buf = engine.rollout(ring(3), 4, 0.1)
        with pytest.raises(InvalidArgument):
            engine.backward(buf, np.zeros((4, 3)))

    @pytest.mark.parametrize("seed", range(5))
    def test_virtual_leader_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        assert helpers.virtual_leader_fd_error(helpers.virtual_leader_case(rng), rng) < 1e-4

    @pytest.mark.parametrize("seed", range(3))
    def test_coupled_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        assert helpers.chain_fd_error(*helpers.chain_case(rng), rng) < 1e-4

    @pytest.mark.parametrize("kind", ["leader", "chain"])
    def test_matches_high_precision_oracle(self, kind):
        errs = [helpers.oracle_rel_error(c, kind) for c in helpers.ROLLOUT_ORACLE[kind]]
        assert max(errs) < 1e-8

    def test_sentinel_gradient_discarded(self):
        buf = engine.rollout(two_car(), 20, 0.1)
        adj = engine.backward(buf, buf.positions)
        assert not np.any(adj.gaps[:, 1]) and not np.any(adj.speed_diffs[:, 1])
