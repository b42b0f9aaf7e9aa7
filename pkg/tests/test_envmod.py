import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2

from fedbandit import envmod
from fedbandit.envmod import DecisionSet, Instance
from fedbandit.numkit import RngStream


@pytest.fixture(scope="module")
def diverse():
    return envmod.generate_instance({"kind": "DiverseMargin", "d": 4, "num_arms": 6, "num_clients": 3, "seed": 11})


@pytest.fixture(scope="module")
def sphere():
    return envmod.make_sphere_hard_instance(6, 2, 0.3, RngStream(5), n_check=20_000)


# --- context laws -------------------------------------------------------------


def test_sphere_hard_second_arm_zero_and_block_structure(sphere):
    X = envmod.sample_contexts(sphere, 0, 5000, RngStream(1))
    assert np.all(X[:, 1] == 0.0)
    arm = X[:, 0]
    nz = arm != 0.0
    assert np.all(nz.sum(axis=1) <= 2)
    assert np.all(np.linalg.norm(arm, axis=1) <= 1.0)
    for row, mask in zip(arm, nz):
        idx = np.flatnonzero(mask)
        if idx.size:
            assert idx[0] % 2 == 0 and idx[-1] - idx[0] <= 1


def test_sphere_hard_block_frequencies(sphere):
    n, d = 100_000, sphere.d
    X = envmod.sample_contexts(sphere, 1, n, RngStream(2))
    block = np.argmax(np.abs(X[:, 0]).reshape(n, d // 2, 2).sum(axis=2), axis=1)
    p = 2.0 / d
    sigma = math.sqrt(n * p * (1 - p))
    counts = np.bincount(block, minlength=d // 2)
    assert np.all(np.abs(counts - n * p) <= 5 * sigma)


def test_axis_decision_sets():
    inst = envmod.make_axis_instance(4)
    first = envmod.sample_context(inst, 0, RngStream(0))
    assert np.array_equal(first.arms, [[0.5, 0.0], [-0.5, 0.0]])
    other = envmod.sample_context(inst, 3, RngStream(0))
    assert np.array_equal(other.arms, [[0.0, 0.5], [0.0, -0.5]])


def test_all_generators_bounded(diverse, sphere):
    axis = envmod.make_axis_instance(3, RngStream(3))
    for inst in (diverse, sphere, axis):
        assert np.linalg.norm(inst.theta_star) <= 1 + 1e-12
        for i in range(inst.num_clients):
            X = envmod.sample_contexts(inst, i, 2000, RngStream(4).child(i))
            assert np.linalg.norm(X, axis=-1).max() <= 1 + 1e-9


def test_contexts_reproducible(diverse):
    a = envmod.sample_contexts(diverse, 1, 50, RngStream(9).child("c"))
    b = envmod.sample_contexts(diverse, 1, 50, RngStream(9).child("c"))
    assert np.array_equal(a, b)


def test_clients_have_different_laws(diverse):
    # per-client maps differ, so the second-moment matrices differ
    m = [np.einsum("nkd,nke->de", X, X) / X.shape[0] for X in
         (envmod.sample_contexts(diverse, i, 20_000, RngStream(i)) for i in range(2))]
    assert np.abs(m[0] - m[1]).max() > 0.05


def test_gap_floor_respected():
    inst = envmod.generate_instance(
        {"kind": "DiverseMargin", "d": 3, "num_arms": 4, "num_clients": 1, "seed": 2, "gap_floor": 0.05}
    )
    X = envmod.sample_contexts(inst, 0, 3000, RngStream(0))
    assert envmod._top_gaps(X, inst.theta_star).min() >= 0.05


def test_decision_set_norm_check():
    with pytest.raises(ValueError):
        DecisionSet(np.array([[1.0, 1.0]]))


# --- rewards and regret ---------------------------------------------------------


def test_reward_moments():
    inst = Instance(2, 2, 1, np.array([1.0, 0.0]), "AxisNecessity", {})
    g = RngStream(0).gen
    zero = envmod.rewards(inst, np.zeros((1_000_000, 2)), g)
    assert abs(zero.mean()) < 0.004
    n = zero.size
    lo, hi = chi2.ppf([0.0005, 0.9995], n - 1) / (n - 1)
    assert 0.994 <= lo and hi <= 1.006  # the stated band is at least as wide as a 99.9% interval
    assert lo <= zero.var(ddof=1) <= hi
    e1 = envmod.rewards(inst, np.tile([1.0, 0.0], (1_000_000, 1)), g)
    assert abs(e1.mean() - 1.0) < 0.004
    assert isinstance(envmod.reward(inst, np.array([1.0, 0.0]), g), float)


def test_instantaneous_regret_examples(sphere):
    r = sphere.meta["sphere_radius"]
    theta = np.zeros(sphere.d)
    theta[:2] = [r, 0.0]
    theta[2:] = sphere.theta_star[2:]
    inst = Instance(sphere.d, 2, 1, theta, "SphereHard", {"sphere_radius": r})
    ds = np.zeros((2, sphere.d))
    ds[0, :2] = [1.0, 0.0]  # z aligned with the block of theta*, ||z|| = 1
    assert envmod.instantaneous_regret(inst, ds, 1) == pytest.approx(r, abs=1e-15)
    assert envmod.instantaneous_regret(inst, ds, 0) == 0.0
    tie = np.array([[0.0, 0.3, 0, 0, 0, 0], [0.0, -0.3, 0, 0, 0, 0]])
    assert envmod.instantaneous_regret(inst, tie, 0) == 0.0
    assert envmod.instantaneous_regret(inst, tie, 1) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6), st.integers(1, 5))
def test_regret_nonnegative_and_zero_iff_best(seed, K, d):
    g = np.random.default_rng(seed)
    theta = g.standard_normal(d)
    theta /= max(1.0, np.linalg.norm(theta))
    X = g.uniform(-0.4, 0.4, size=(20, K, d))
    chosen = g.integers(0, K, size=20)
    reg = envmod.regrets(theta, X, chosen)
    means = X @ theta
    assert np.all(reg >= 0)
    assert np.array_equal(reg == 0, means[np.arange(20), chosen] == means.max(axis=1))


# --- diversity / margin estimators ------------------------------------------------


def test_min_eig_axis_is_zero():
    inst = envmod.make_axis_instance(3)
    for i in range(3):
        assert envmod.estimate_min_eig_optimal(inst, i, 1000, RngStream(0)) == 0.0


def test_min_eig_single_constant_arm(monkeypatch):
    inst = Instance(1, 1, 1, np.array([1.0]), "AxisNecessity", {})
    monkeypatch.setattr(envmod, "_raw_contexts", lambda inst, client, n, rng: np.ones((n, 1, 1)))
    assert envmod.estimate_min_eig_optimal(inst, 0, 1000, RngStream(0)) == pytest.approx(1.0)


def test_min_eig_matches_large_sample_reference():
    inst = envmod.generate_instance({"kind": "DiverseMargin", "d": 2, "num_arms": 16, "num_clients": 1, "seed": 4})
    ests = [envmod.estimate_min_eig_optimal(inst, 0, 20_000, RngStream(100).child(k)) for k in range(8)]
    ref = envmod.estimate_min_eig_optimal(inst, 0, 1_000_000, RngStream(7))
    sigma = np.std(ests, ddof=1)
    assert abs(ests[0] - ref) <= 3 * sigma + 1e-4


def test_diverse_generator_contract(diverse):
    assert diverse.lambda0 >= 0.02 / diverse.d
    assert np.linalg.norm(diverse.theta_star) == pytest.approx(1.0)


def test_axis_generator_theta():
    inst = envmod.make_axis_instance(2, RngStream(8))
    assert np.linalg.norm(inst.theta_star) == pytest.approx(1.0)
    assert np.allclose(np.abs(inst.theta_star), 1 / math.sqrt(2))


def test_sphere_theta_blocks(sphere):
    r = sphere.meta["sphere_radius"]
    assert np.allclose(np.linalg.norm(sphere.theta_star.reshape(-1, 2), axis=1), r, atol=1e-12)
    assert np.linalg.norm(sphere.theta_star) == pytest.approx(r * math.sqrt(sphere.d / 2))


def test_sphere_radius_validation():
    with pytest.raises(ValueError):
        envmod.make_sphere_hard_instance(4, 1, 0.6, RngStream(0), n_check=1000)
    with pytest.raises(ValueError):
        envmod.make_sphere_hard_instance(3, 1, 0.1, RngStream(0), n_check=1000)


def test_margin_hard_gap():
    gaps = np.full(1000, 0.2)
    grid = np.geomspace(1e-3, 0.19, 10)
    assert envmod.margin_constant_from_gaps(gaps, grid) == 0.0
    # grid point beyond every gap contributes exactly 1/eps
    assert envmod.margin_constant_from_gaps(gaps, [0.5]) == pytest.approx(2.0)


def test_margin_grid_validation():
    with pytest.raises(ValueError):
        envmod.margin_constant_from_gaps([0.1], [0.2, 0.1])


def test_sphere_margin_grows_as_r_shrinks():
    est = []
    for r in (0.4, 0.2, 0.1):
        inst = envmod.make_sphere_hard_instance(4, 1, r, RngStream(1), n_check=2000)
        est.append(envmod.estimate_margin_constant(inst, 0, envmod.DEFAULT_EPS_GRID, 100_000, RngStream(2)))
    assert all(np.isfinite(est))
    assert est[0] < est[1] < est[2]
    for a, b in zip(est, est[1:]):
        assert 2 / 1.5 <= b / a <= 2 * 1.5


def test_margin_matches_direct_monte_carlo(sphere):
    # oracle: gaps recomputed from raw draws without the helper functions
    X = envmod.sample_contexts(sphere, 0, 50_000, RngStream(3))
    gaps = np.abs(X[:, 0] @ sphere.theta_star)
    grid = [0.01, 0.05, 0.2]
    direct = max(np.mean(gaps <= e) / e for e in grid)
    assert envmod.estimate_margin_constant(sphere, 0, grid, 50_000, RngStream(3)) == pytest.approx(direct)


def test_instance_report_bands(diverse):
    rep = envmod.instance_report(diverse, 20_000, RngStream(0))
    lo, hi = rep["lambda0_band"]
    assert lo <= rep["lambda0"] <= hi
    assert rep["lambda0"] == min(rep["per_client_lambda0"])
    assert rep["C0"] == max(rep["per_client_C0"])


# --- serialization ---------------------------------------------------------------


def test_instance_roundtrip(tmp_path, diverse):
    p = tmp_path / "inst.json"
    diverse.save(p)
    import json

    doc = json.loads(p.read_text())
    assert set(doc) == {"d", "num_arms", "num_clients", "kind", "theta_star", "meta"}
    back = Instance.load(p)
    assert np.array_equal(back.theta_star, diverse.theta_star)
    X1 = envmod.sample_contexts(diverse, 2, 10, RngStream(1))
    X2 = envmod.sample_contexts(back, 2, 10, RngStream(1))
    assert np.array_equal(X1, X2)


def test_instance_rejects_extra_keys(diverse):
    doc = diverse.to_dict()
    doc["extra"] = 1
    with pytest.raises(ValueError):
        Instance.from_dict(doc)
