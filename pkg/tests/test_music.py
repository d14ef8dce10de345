from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from music_som._validation import ContractError, DegenerateRowError
from music_som.geometry import activation, activation_jacobian
from music_som.music import (
    BERNOULLI_REDRAWS,
    MusicConfig,
    MusicController,
    Trajectory,
    TrajectoryError,
    cluster_step,
    free_step,
    gaussian_weights,
    identity_drift,
    informed_step,
    lambda_scan,
    music_solve,
    music_solve_svd,
    perturbation_step,
    radial_baseline_step,
    resolve_trust,
    run_trajectory,
    stack_system,
)
from music_som.som import PrototypeSet

QUIET = MusicConfig(trust="absolute", trust_radius=1e6)


def random_problem(rng, D=6, nS=10, nT=2):
    return rng.normal(size=(nS, D)), rng.normal(size=(nT, D)), rng.normal(size=nT)


# -- solvers ---------------------------------------------------------------------------


def test_gamma_zero_gives_zero():
    A, B, b = random_problem(np.random.default_rng(0))
    assert np.array_equal(music_solve(A, B, b, 0.0, 1e-3), np.zeros(6))


def test_zero_target_gives_zero():
    A, B, _ = random_problem(np.random.default_rng(1))
    assert np.array_equal(music_solve(A, B, np.zeros(2), 0.85, 1e-3), np.zeros(6))


def test_scalar_normal_equation():
    dz = music_solve(np.zeros((0, 1)), [[-1.0]], [-0.1], 1.0, 0.01)
    assert dz[0] == pytest.approx(0.1 / 1.01, rel=1e-14)
    assert dz[0] > 0  # toward a prototype sitting at +infinity along the row sign


def test_svd_identity_filter():
    np.testing.assert_allclose(music_solve_svd(np.eye(4), np.eye(4)[0], 1.0), [0.5, 0, 0, 0], atol=1e-16)


def test_svd_overdamped():
    rng = np.random.default_rng(2)
    M, y = rng.normal(size=(8, 5)), rng.normal(size=8)
    assert np.linalg.norm(music_solve_svd(M, y, 1e9)) < 1e-6 * np.linalg.norm(y)


def test_solver_equivalence_random():
    rng = np.random.default_rng(3)
    for _ in range(100):
        A, B, b = random_problem(rng, D=5, nS=6, nT=2)
        gamma = rng.uniform(0.05, 0.95)
        w_S, w_T = rng.uniform(0.1, 2, 6), rng.uniform(0.1, 2, 2)
        M, y = stack_system(A, B, b, gamma, w_S, w_T)
        assert M.shape == (8, 5)
        np.testing.assert_allclose(music_solve_svd(M, y, 0.1), music_solve(A, B, b, gamma, 0.1, w_S, w_T),
                                   rtol=0, atol=1e-10)


def test_solver_needs_positive_lambda():
    with pytest.raises(ContractError):
        music_solve([[1.0]], [[1.0]], [1.0], 0.5, 0.0)
    with pytest.raises(ContractError):
        music_solve_svd([[1.0]], [1.0], -1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-4, 10.0), st.floats(0.0, 1.0))
def test_norm_bound(seed, lam, gamma):
    A, B, b = random_problem(np.random.default_rng(seed))
    dz = music_solve(A, B, b, gamma, lam)
    r = gamma * B.T @ b
    assert np.linalg.norm(dz) <= np.linalg.norm(r) / lam * (1 + 1e-9)


def test_lambda_scan_monotone():
    A, B, b = random_problem(np.random.default_rng(4))
    scan = lambda_scan(A, B, b, 0.85, np.logspace(-4, 2, 10))
    norms = [n for _, n, _ in scan]
    res = [r for _, _, r in scan]
    assert all(x >= y for x, y in zip(norms, norms[1:]))
    assert all(x <= y + 1e-15 for x, y in zip(res, res[1:]))


def test_sigma_min_of_H():
    A, B, b = random_problem(np.random.default_rng(5))
    _, smin = music_solve(A, B, b, 0.85, 0.3, return_sigma_min=True)
    H = 0.15 * A.T @ A + 0.85 * B.T @ B + 0.3 * np.eye(6)
    assert smin == pytest.approx(np.linalg.eigvalsh(H)[0])


def test_row_normalization_scale_invariance():
    rng = np.random.default_rng(6)
    W = rng.normal(size=(8, 4))
    z = rng.normal(size=4)
    t = 3
    S = [j for j in range(8) if j != t]
    base = None
    for s in (0.1, 1.0, 7.0):
        Ws = z + s * (W - z)
        A = activation_jacobian(z, Ws, S, normalize=True)
        B = activation_jacobian(z, Ws, [t], normalize=True)
        b = -0.04 * activation(z, Ws)[[t]] / s**2
        dz = music_solve(A, B, b, 0.85, 1e-4)
        if base is None:
            base = dz
        np.testing.assert_allclose(dz, base, rtol=1e-9)
        assert np.argmax(np.abs(dz)) == np.argmax(np.abs(base))


# -- config ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "bad",
    [dict(gamma=1.5), dict(lam=0.0), dict(eta=0.0), dict(eta=1.5), dict(trust="x"), dict(trust_radius=0),
     dict(sigma_z=-1), dict(passes=0), dict(subsample="x"), dict(subsample_p=0.0), dict(weight_scheme="x"),
     dict(preserve_scope="x"), dict(b_mode="x"), dict(bandwidth=0.0), dict(subsample_k=0)],
)
def test_config_validation(bad):
    with pytest.raises(ContractError):
        MusicConfig(**bad)


def test_config_round_trip():
    cfg = MusicConfig(gamma=0.5, subsample="bernoulli", seed=11)
    assert MusicConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ContractError, match="unknown"):
        MusicConfig.from_dict({"gama": 0.5})


def test_resolve_trust():
    W = np.array([[0.0, 0.0], [3.0, 0.0]])
    assert resolve_trust([0.0, 2.0], W, MusicConfig()) == pytest.approx(0.04)
    assert resolve_trust([0.0, 2.0], W, MusicConfig(trust="absolute", trust_radius=0.1)) == 0.1


def test_gaussian_weights_median_bandwidth():
    a = np.array([1.0, 4.0, 9.0])
    w = gaussian_weights(a, [0, 2])
    np.testing.assert_allclose(w, np.exp(-np.array([1.0, 9.0]) / 8.0))


# -- free -----------------------------------------------------------------------------


def test_free_step_example():
    cfg = MusicConfig(trust="absolute", trust_radius=0.1)
    r = free_step([0.0, 0.0], [[1.0, 0.0], [-1.0, 0.0]], cfg)
    np.testing.assert_allclose(r.dz, [0.0, 0.1], atol=1e-15)
    r2 = free_step([0.0, 0.0], [[1.0, 0.0], [-1.0, 0.0]], cfg)
    assert np.array_equal(r.dz, r2.dz)


def test_free_step_degenerate():
    with pytest.raises(DegenerateRowError):
        free_step([1.0, 0.0], [[1.0, 0.0], [-1.0, 0.0]], MusicConfig())


def test_free_step_least_disruptive():
    rng = np.random.default_rng(7)
    cfg = MusicConfig(trust="absolute", trust_radius=1e-3)
    for _ in range(100):
        W = rng.normal(size=(6, 5))
        z = rng.normal(size=5)
        dz = free_step(z, W, cfg).dz
        A = activation_jacobian(z, W, normalize=True).rows
        q_max = np.linalg.eigh(A.T @ A)[1][:, -1]
        a0 = activation(z, W)
        free = np.abs(activation(z + dz, W) - a0).max()
        worst = np.abs(activation(z + np.linalg.norm(dz) * q_max, W) - a0).max()
        assert free <= worst


def test_free_step_noise_clipped():
    cfg = MusicConfig(trust="absolute", trust_radius=0.05, sigma_z=1.0)
    rng = np.random.default_rng(0)
    for _ in range(20):
        r = free_step(rng.normal(size=3), np.random.default_rng(1).normal(size=(5, 3)), cfg, rng)
        assert np.linalg.norm(r.dz) <= 0.05 * (1 + 1e-12)
        assert np.linalg.norm(r.dz_deterministic) == pytest.approx(0.05)


# -- informed -------------------------------------------------------------------------


def test_informed_at_target_zero():
    W = np.random.default_rng(8).normal(size=(5, 3))
    r = informed_step(W[2], W, 2, MusicConfig())
    assert np.array_equal(r.dz, np.zeros(3))


def test_informed_one_d_sign():
    W = np.array([[0.0], [5.0]])
    r = informed_step([1.0], W, 1, QUIET)
    assert r.dz[0] > 0
    r = informed_step([4.0], W, 0, QUIET)
    assert r.dz[0] < 0


def test_informed_decreases_target_each_iteration():
    rng = np.random.default_rng(9)
    W = rng.normal(size=(40, 10))
    z = rng.normal(size=10)
    t = 17
    cfg = MusicConfig(gamma=0.85, lam=1e-4, eta=0.04)
    traj = run_trajectory(z, W, "informed", cfg, 50, target=t)
    a_t = np.array([activation(s, W)[t] for s in traj.states])
    assert np.all(np.diff(a_t) < 0)


def test_informed_first_order_accuracy():
    rng = np.random.default_rng(10)
    cfg = MusicConfig(eta=1e-3, lam=1e-4, trust="absolute", trust_radius=1e6)
    for _ in range(20):
        W = rng.normal(size=(15, 6))
        z = rng.normal(size=6)
        dz = informed_step(z, W, 4, cfg).dz
        da = activation(z + dz, W)[4] - activation(z, W)[4]
        pred = 2 * (z - W[4]) @ dz
        assert abs(da - pred) / abs(da) < 0.05


def test_jitter_error_linear():
    rng = np.random.default_rng(11)
    W = rng.normal(size=(12, 5))
    z = rng.normal(size=5)
    clean = informed_step(z, W, 3, replace(QUIET, lam=0.1)).dz
    eps = np.array([1e-7, 1e-6, 1e-5, 1e-4])
    diffs = [np.linalg.norm(informed_step(z, W, 3, replace(QUIET, lam=0.1, jitter=e), np.random.default_rng(0)).dz
                            - clean) for e in eps]
    slope = np.polyfit(np.log10(eps), np.log10(diffs), 1)[0]
    assert slope == pytest.approx(1.0, abs=0.1)


def test_noise_free_step_is_deterministic_part():
    rng = np.random.default_rng(12)
    W = rng.normal(size=(9, 4))
    r = informed_step(rng.normal(size=4), W, 1, MusicConfig())
    assert np.array_equal(r.dz, r.dz_deterministic)


def test_noisy_step_within_trust():
    rng = np.random.default_rng(13)
    W = rng.normal(size=(9, 4))
    cfg = MusicConfig(sigma_z=0.5, sigma_b=0.5, trust="absolute", trust_radius=0.1)
    for seed in range(20):
        r = informed_step(rng.normal(size=4), W, 1, cfg, np.random.default_rng(seed))
        assert np.linalg.norm(r.dz) <= 0.1 * (1 + 1e-12)


def test_ring_preservation_needs_lattice():
    W = np.random.default_rng(14).normal(size=(9, 3))
    cfg = MusicConfig(preserve_scope="ring")
    with pytest.raises(ContractError, match="lattice"):
        informed_step(np.zeros(3), W, 0, cfg)
    r = informed_step(np.zeros(3), PrototypeSet(W, 3, 3), 0, cfg)
    assert np.all(np.isfinite(r.dz))


def test_gaussian_weight_scheme_runs():
    W = np.random.default_rng(15).normal(size=(9, 3))
    r = informed_step(np.ones(3), W, 0, MusicConfig(weight_scheme="gaussian", b_mode="distance"))
    assert np.linalg.norm(r.dz) > 0


# -- cluster --------------------------------------------------------------------------


def test_singleton_cluster_matches_informed():
    rng = np.random.default_rng(16)
    W = rng.normal(size=(10, 4))
    z = rng.normal(size=4)
    cfg = MusicConfig(sigma_z=0.01, sigma_b=0.01)
    a = cluster_step(z, W, [6], cfg, np.random.default_rng(5))
    b = informed_step(z, W, 6, cfg, np.random.default_rng(5))
    assert np.array_equal(a.dz, b.dz)


def test_single_random_uniform():
    rng = np.random.default_rng(17)
    W = rng.normal(size=(12, 3))
    z = rng.normal(size=3) + 5
    T = [1, 3, 5, 7, 9]
    gen = np.random.default_rng(0)
    counts = dict.fromkeys(T, 0)
    cfg = MusicConfig(subsample="single-random")
    for _ in range(10000):
        counts[cluster_step(z, W, T, cfg, gen).selected_targets[0]] += 1
    assert all(abs(c - 2000) <= 150 for c in counts.values())


def test_subsample_rules():
    rng = np.random.default_rng(18)
    W = rng.normal(size=(12, 3))
    z = rng.normal(size=3) + 3
    T = [0, 2, 4, 6]
    r = cluster_step(z, W, T, MusicConfig(subsample="all"))
    assert r.selected_targets == (0, 2, 4, 6)
    r = cluster_step(z, W, T, MusicConfig(subsample="fixed-k", subsample_k=2))
    assert len(r.selected_targets) == 2 and set(r.selected_targets) <= set(T)
    with pytest.raises(ContractError):
        cluster_step(z, W, T, MusicConfig(subsample="fixed-k", subsample_k=5))
    with pytest.raises(ContractError):
        cluster_step(z, W, [], MusicConfig())
    for seed in range(30):
        r = cluster_step(z, W, T, MusicConfig(subsample="bernoulli", subsample_p=0.3, seed=seed))
        assert 1 <= len(r.selected_targets) <= 4


def test_bernoulli_fallback_to_full_set():
    class NeverKeep:
        calls = 0

        def random(self, n):
            NeverKeep.calls += 1
            return np.ones(n)

    from music_som.music import _draw_targets

    T = np.array([1, 2, 3])
    got = _draw_targets(T, MusicConfig(subsample="bernoulli", subsample_p=0.5), NeverKeep())
    assert got.tolist() == [1, 2, 3] and NeverKeep.calls == BERNOULLI_REDRAWS


def test_cluster_run_approaches_cluster():
    rng = np.random.default_rng(19)
    cluster = rng.normal(size=(6, 5)) * 0.3 + 4.0
    others = rng.normal(size=(20, 5)) * 0.3 - 4.0
    W = np.vstack([cluster, others])
    z = np.zeros(5)
    traj = run_trajectory(z, W, "cluster", MusicConfig(lam=0.1), 100, target=range(6))
    mean_d = [np.linalg.norm(s - cluster, axis=1).mean() for s in traj.states]
    assert np.all(np.diff(mean_d) < 0)


# -- baseline / perturbation ----------------------------------------------------------------


def test_radial_baseline_examples():
    W = [[0.0, 0.0]]
    np.testing.assert_array_equal(radial_baseline_step([1.0, 0.0], W, 0, 0.5), [0.5, 0.0])
    np.testing.assert_array_equal(radial_baseline_step([1.0, 0.0], W, 0, -0.5), [-0.5, 0.0])
    with pytest.raises(ContractError):
        radial_baseline_step([0.0, 0.0], W, 0, 0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(-3, 3).filter(lambda v: abs(v) > 1e-6))
def test_radial_baseline_norm(seed, step_len):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(4, 3))
    dz = radial_baseline_step(rng.normal(size=3) + 5, W, 2, step_len)
    assert np.linalg.norm(dz) == pytest.approx(abs(step_len), rel=1e-12)


def test_perturbation_step_length_and_preservation():
    rng = np.random.default_rng(20)
    W = rng.normal(size=(20, 8))
    z = rng.normal(size=8)
    r = perturbation_step(z, W, 11, 1.0, MusicConfig(), 0.01, preserve=[0, 1, 2, 3])
    assert np.linalg.norm(r.dz) == pytest.approx(0.01, rel=1e-12)
    J = activation_jacobian(z, W, [0, 1, 2, 3], normalize=True).rows
    # leakage into preserved rows is of order lam / (1 - gamma) ~ 7e-4 of the step
    assert np.abs(J @ r.dz).max() < 1e-3 * 0.01


def test_identity_drift():
    W = np.array([[0.0, 0.0], [1.0, 0.0]])
    states = np.array([[0.0, 1.0], [0.0, 2.0]])
    np.testing.assert_allclose(identity_drift(states, W, [0, 1]), [0.0, 6.0])


# -- trajectories ------------------------------------------------------------------------


def test_zero_step_trajectory():
    W = np.random.default_rng(21).normal(size=(5, 2))
    traj = run_trajectory([0.1, 0.2], W, "free", MusicConfig(), 0)
    assert traj.states.shape == (1, 2) and traj.n_steps == 0


def test_trajectory_trust_and_consistency():
    rng = np.random.default_rng(22)
    W = PrototypeSet(rng.normal(size=(16, 4)), 4, 4)
    cfg = MusicConfig(eta=0.01, trust="absolute", trust_radius=0.05)
    traj = run_trajectory(rng.normal(size=4), W, "informed", cfg, 60, target=5)
    norms = np.linalg.norm(traj.deltas, axis=1)
    assert np.all(norms <= 0.05 * (1 + 1e-12))
    for t, s in enumerate(traj.steps):
        assert np.array_equal(traj.states[t + 1], traj.states[t] + s.dz)


@pytest.mark.parametrize("mode, target", [("free", None), ("informed", 2), ("cluster", [1, 2, 3])])
def test_trajectory_deterministic(mode, target):
    rng = np.random.default_rng(23)
    W = rng.normal(size=(12, 5))
    z0 = rng.normal(size=5)
    cfg = MusicConfig(sigma_z=0.01, sigma_b=0.01, jitter=0.01, passes=2, subsample="bernoulli", seed=4)
    a = run_trajectory(z0, W, mode, cfg, 25, target=target)
    b = run_trajectory(z0, W, mode, cfg, 25, target=target)
    assert a.states.tobytes() == b.states.tobytes()
    c = run_trajectory(z0, W, mode, replace(cfg, seed=5), 25, target=target)
    assert c.states.tobytes() != a.states.tobytes()


def test_passes_sum():
    rng = np.random.default_rng(24)
    W = rng.normal(size=(12, 5))
    z0 = rng.normal(size=5)
    cfg = MusicConfig(passes=3, trust="absolute", trust_radius=0.02)
    traj = run_trajectory(z0, W, "informed", cfg, 1, target=4)
    z = z0.copy()
    for _ in range(3):
        z = z + informed_step(z, W, 4, cfg).dz
    np.testing.assert_allclose(traj.states[1], z, atol=1e-15)
    assert np.linalg.norm(traj.deltas[0]) <= 3 * 0.02 * (1 + 1e-12)


def test_trajectory_error_carries_step():
    W = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(TrajectoryError) as err:
        run_trajectory([0.0, 0.0], W, "free", MusicConfig(), 3)
    assert err.value.step == 0
    with pytest.raises(ContractError):
        run_trajectory([0.0, 0.0], W, "bogus", MusicConfig(), 3)
    with pytest.raises(ContractError):
        run_trajectory([0.5, 0.5], W, "informed", MusicConfig(), 3)


def test_trajectory_csv_round_trip(tmp_path):
    rng = np.random.default_rng(25)
    W = rng.normal(size=(9, 3))
    traj = run_trajectory(rng.normal(size=3), W, "cluster", MusicConfig(subsample="all"), 10, target=[1, 2])
    traj.to_csv(tmp_path / "t.csv")
    back = Trajectory.from_csv(tmp_path / "t.csv")
    assert back.states.tobytes() == traj.states.tobytes()
    assert back.bmu_per_state.tolist() == traj.bmu_per_state.tolist()
    assert back.steps[0].selected_targets == (1, 2)


def test_controller_api():
    rng = np.random.default_rng(26)
    W = rng.normal(size=(9, 3))
    ctl = MusicController(mode="informed", target=2, n_steps=5, lam=0.1)
    params = ctl.get_params()
    assert params["lam"] == 0.1 and params["n_steps"] == 5
    ctl.set_params(eta=0.1)
    assert ctl.config.eta == 0.1
    with pytest.raises(ValueError):
        ctl.set_params(nonsense=1)
    with pytest.raises(ContractError):
        ctl.trajectory(np.zeros(3))
    X = rng.normal(size=(3, 3))
    out = ctl.fit(W).transform(X)
    assert out.shape == (3, 3)
    expected = run_trajectory(X[1], W, "informed", replace(ctl.config, seed=1), 5, target=2).states[-1]
    np.testing.assert_array_equal(out[1], expected)
