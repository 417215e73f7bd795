import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from test_features_policy import fd_check

from loopdrive.env import RewardBreakdown
from loopdrive.errors import IndexOutOfRange, LengthMismatch, MissingOldProbabilities
from loopdrive.policy import LossGraph, PolicyConfig, backward, forward_cache, init_params, zero_params
from loopdrive.rl import (
    DC,
    HD,
    PD,
    SC,
    Batch,
    ClipTrajectory,
    RlConfig,
    RolloutBuffer,
    aux_losses,
    compute_gae,
    composite_loss,
    direction_factors,
    ppo_loss,
    prob_partitions,
    value_loss,
)


def brute_gae(r, v, nv, gamma, lam):
    """O(T^2) sum of discounted TD residuals inside one episode."""
    delta = r + gamma * nv - v
    T = len(r)
    out = np.zeros_like(r)
    for t in range(T):
        for k in range(t, T):
            out[t] += (gamma * lam) ** (k - t) * delta[k]
    return out


# -- GAE -----------------------------------------------------------------------


def test_gae_zero():
    z = np.zeros((5, 4))
    adv = compute_gae(z, z, z, np.eye(5, dtype=bool)[-1], 0.9, 0.95)
    assert np.all(adv.components == 0.0)


def test_gae_single_terminal_step():
    r = np.array([[0.0, 0.0, 0.0, -1.0]])
    adv = compute_gae(r, np.zeros((1, 4)), np.zeros((1, 4)), [True], 0.9, 0.95)
    assert adv.a_dc[0] == -1.0 and adv.a_y[0] == -1.0 and adv.a_x[0] == 0.0


def test_gae_random_episode_matches_brute_force():
    rng = np.random.default_rng(0)
    T = 20
    r, v = rng.normal(size=(T, 4)), rng.normal(size=(T, 4))
    nv = np.vstack([v[1:], np.zeros((1, 4))])
    ends = np.zeros(T, dtype=bool)
    ends[-1] = True
    adv = compute_gae(r, v, nv, ends, 0.9, 0.95)
    assert np.max(np.abs(adv.components - brute_gae(r, v, nv, 0.9, 0.95))) < 1e-10
    assert np.array_equal(adv.returns, adv.components + v)


def test_gae_does_not_leak_across_episodes():
    rng = np.random.default_rng(1)
    r, v, nv = (rng.normal(size=(12, 4)) for _ in range(3))
    ends = np.zeros(12, dtype=bool)
    ends[[4, 11]] = True
    adv = compute_gae(r, v, nv, ends, 0.9, 0.95).components
    assert np.allclose(adv[:5], brute_gae(r[:5], v[:5], nv[:5], 0.9, 0.95), atol=1e-12)
    assert np.allclose(adv[5:], brute_gae(r[5:], v[5:], nv[5:], 0.9, 0.95), atol=1e-12)


def test_gae_length_mismatch():
    with pytest.raises(LengthMismatch):
        compute_gae(np.zeros((3, 4)), np.zeros((2, 4)), np.zeros((3, 4)), [0, 0, 1], 0.9, 0.95)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_decomposition_identities(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(1, 60))
    r = -rng.uniform(size=(T, 4)) * (rng.uniform(size=(T, 4)) < 0.2)
    v, nv = rng.normal(size=(T, 4)), rng.normal(size=(T, 4))
    ends = rng.uniform(size=T) < 0.1
    ends[-1] = True
    adv = compute_gae(r, v, nv, ends, 0.9, 0.95)
    assert np.array_equal(adv.a_y, adv.a_dc)
    assert np.allclose(adv.a_x, adv.a_sc + adv.a_pd + adv.a_hd, rtol=0, atol=1e-12)
    # grouped-reward GAE equals the sum of component GAEs by linearity
    grouped = compute_gae(r[:, :3].sum(1, keepdims=True), v[:, :3].sum(1, keepdims=True), nv[:, :3].sum(1, keepdims=True), ends, 0.9, 0.95)
    assert np.allclose(grouped.components[:, 0], adv.a_x, atol=1e-10)


# -- partitions ----------------------------------------------------------------


def test_partitions_uniform():
    below, above = prob_partitions(np.full(61, 1 / 61), 30)
    assert below == pytest.approx(30 / 61) and above == pytest.approx(30 / 61)


def test_partitions_boundaries():
    d = np.random.default_rng(0).dirichlet(np.ones(9))
    assert prob_partitions(d, 0)[0] == 0.0
    assert prob_partitions(d, 8)[1] == 0.0
    with pytest.raises(IndexOutOfRange):
        prob_partitions(d, 9)
    with pytest.raises(IndexOutOfRange):
        prob_partitions(d, -1)


@given(st.integers(0, 2**32 - 1), st.integers(0, 60))
def test_partition_identity(seed, k):
    d = np.random.default_rng(seed).dirichlet(np.full(61, 0.3))
    below, above = prob_partitions(d, k)
    assert abs(below + d[k] + above - 1.0) < 1e-6


# -- directional factors -------------------------------------------------------


def rb(**kw):
    base = dict(r_dc=0.0, r_sc=0.0, r_pd=0.0, r_hd=0.0)
    base.update(kw)
    return RewardBreakdown(**base)


def test_direction_factors():
    assert np.array_equal(direction_factors(rb()), np.zeros(4))
    assert direction_factors(rb(r_dc=-1.0, collision_direction="ahead"))[DC] == 1.0
    assert direction_factors(rb(r_dc=-1.0, collision_direction="behind"))[DC] == -1.0
    assert direction_factors(rb(r_sc=-1.0, obstacle_side="left"))[SC] == 1.0
    assert direction_factors(rb(r_sc=-1.0, obstacle_side="right"))[SC] == -1.0
    assert direction_factors(rb(r_pd=-1.0, deviation_side="left"))[PD] == 1.0
    assert direction_factors(rb(r_pd=-1.0, deviation_side="right"))[PD] == -1.0
    assert direction_factors(rb(r_hd=-1.0, rotation_dir="counterclockwise"))[HD] == 1.0
    assert direction_factors(rb(r_hd=-1.0, rotation_dir="clockwise"))[HD] == -1.0


# -- losses --------------------------------------------------------------------


def tiny_cfg():
    return PolicyConfig(feature_dim=5, n_x=7, n_y=6, hidden=(8, 6), head_init_scale=1.0)


def make_batch(params, rng, b=6, adv=None, factors=None, old=None):
    x = rng.normal(size=(b, 5))
    c = forward_cache(params, x)
    acts = np.column_stack([rng.integers(0, 7, b), rng.integers(0, 6, b)])
    px, py = (c.p_x, c.p_y) if old is None else old
    return Batch(
        x,
        acts,
        px,
        py,
        c.values,
        np.zeros((b, 4)) if factors is None else factors,
        rng.normal(size=(b, 4)) if adv is None else adv,
        rng.normal(size=(b, 4)),
    )


def single_row_batch(n_x, n_y, action, ratio_x, adv):
    """One transition whose current policy is uniform and whose old probability sets the ratio."""
    px_old = np.full(n_x, (1 - 1 / (n_x * ratio_x)) / (n_x - 1))
    px_old[action[0]] = 1 / (n_x * ratio_x)
    py_old = np.full(n_y, 1 / n_y)
    return Batch(
        np.zeros((1, 3)),
        np.array([action]),
        px_old[None],
        py_old[None],
        np.zeros((1, 4)),
        np.zeros((1, 4)),
        np.array([adv]),
        np.zeros((1, 4)),
    )


def test_ppo_hand_clip_cases():
    cfg = PolicyConfig(feature_dim=3, n_x=4, n_y=4, hidden=())
    p = zero_params(cfg)
    # ratio 1.5, advantage +1 on the x axis (sc component), eps 0.2 -> 1.2
    b = single_row_batch(4, 4, (1, 1), 1.5, [1.0, 0.0, 0.0, 0.0])
    _, diag = ppo_loss(p, b, 0.2, 0.2)
    assert diag["surrogate_x"] == pytest.approx(1.2, abs=1e-12)
    assert diag["clip_frac_x"] == 1.0
    # ratio 0.5, advantage -1 -> -0.8
    b = single_row_batch(4, 4, (2, 0), 0.5, [0.0, -1.0, 0.0, 0.0])
    _, diag = ppo_loss(p, b, 0.2, 0.2)
    assert diag["surrogate_x"] == pytest.approx(-0.8, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 5), st.floats(-3, 3), st.floats(0.05, 0.5))
def test_surrogate_bound(ratio, adv, eps):
    cfg = PolicyConfig(feature_dim=3, n_x=4, n_y=4, hidden=())
    b = single_row_batch(4, 4, (0, 0), ratio, [adv, 0.0, 0.0, 0.0])
    _, diag = ppo_loss(zero_params(cfg), b, eps, eps)
    s = diag["surrogate_x"]
    assert s <= max(ratio * adv, (1 - eps) * adv, (1 + eps) * adv) + 1e-9
    if adv > 0:
        assert s <= ratio * adv + 1e-9


def test_ppo_at_old_policy_equals_vanilla_gradient():
    rng = np.random.default_rng(3)
    cfg = tiny_cfg()
    p = init_params(cfg, rng)
    batch = make_batch(p, rng, b=8)
    g, diag = ppo_loss(p, batch, 0.1, 0.2)
    assert diag["clip_frac_x"] == 0.0 and diag["clip_frac_y"] == 0.0
    c = forward_cache(p, batch.features)
    rows = np.arange(8)
    ax = batch.advantages[:, :3].sum(1)
    ay = batch.advantages[:, 3]
    # vanilla policy gradient of -mean(A * log pi(a))
    dlx = -(np.eye(7)[batch.actions[:, 0]] - c.p_x) * ax[:, None] / 8
    dly = -(np.eye(6)[batch.actions[:, 1]] - c.p_y) * ay[:, None] / 8
    vanilla = backward(p, LossGraph(np.float64(0.0), c, dlx, dly, np.zeros_like(c.values)))
    got = backward(p, g)
    for k in p:
        assert np.max(np.abs(got[k] - vanilla[k])) < 1e-8
    assert diag["surrogate_x"] == pytest.approx(ax.mean()) and diag["surrogate_y"] == pytest.approx(ay.mean())
    assert np.allclose(c.p_x[rows, batch.actions[:, 0]], batch.p_x_old[rows, batch.actions[:, 0]])


def test_ppo_missing_old_probabilities():
    rng = np.random.default_rng(0)
    p = init_params(tiny_cfg(), rng)
    b = make_batch(p, rng)
    b.p_x_old = None
    with pytest.raises(MissingOldProbabilities):
        ppo_loss(p, b, 0.1, 0.2)


def test_aux_no_events_all_zero():
    rng = np.random.default_rng(0)
    p = init_params(tiny_cfg(), rng)
    out = aux_losses(p, make_batch(p, rng))
    assert all(float(g.value) == 0.0 for g in out.values())


def one_step_mass(loss_key, factor, comp, action, head):
    """Corrective-mass change after one descent step from a uniform policy."""
    cfg = PolicyConfig(feature_dim=3, n_x=61, n_y=61, hidden=())
    p = zero_params(cfg)
    adv = np.zeros(4)
    adv[comp] = -1.0
    f = np.zeros(4)
    f[comp] = factor
    batch = Batch(np.ones((1, 3)), np.array([action]), None, None, np.zeros((1, 4)), f[None], adv[None], np.zeros((1, 4)))
    g = aux_losses(p, batch)[loss_key]
    assert float(g.value) == pytest.approx(0.0, abs=1e-12)  # symmetric start
    grads = backward(p, g)
    q = {k: p[k] - 0.5 * grads[k] for k in p}
    c = forward_cache(q, batch.features)
    dist = (c.p_x if head == "x" else c.p_y)[0]
    below, above = prob_partitions(dist, action[0] if head == "x" else action[1])
    return below, above


@pytest.mark.parametrize("key,comp", [("sc", SC), ("pd", PD), ("hd", HD)])
def test_lateral_aux_directional_step(key, comp):
    left, right = one_step_mass(key, +1.0, comp, (30, 30), "x")
    assert right > left
    left, right = one_step_mass(key, -1.0, comp, (30, 30), "x")
    assert left > right


def test_dc_aux_directional_step():
    dec, acc = one_step_mass("dc", +1.0, DC, (30, 30), "y")
    assert dec > acc
    dec, acc = one_step_mass("dc", -1.0, DC, (30, 30), "y")
    assert acc > dec


def test_value_loss_hand_value():
    cfg = PolicyConfig(feature_dim=3, n_x=4, n_y=4, hidden=(5,))
    p = zero_params(cfg)
    b = Batch(np.ones((3, 3)), np.zeros((3, 2), int), None, None, np.zeros((3, 4)), np.zeros((3, 4)), np.zeros((3, 4)), -np.ones((3, 4)))
    assert float(value_loss(p, b).value) == 4.0


def test_value_loss_length_mismatch():
    cfg = PolicyConfig(feature_dim=3, n_x=4, n_y=4, hidden=(5,))
    b = Batch(np.ones((3, 3)), np.zeros((3, 2), int), None, None, np.zeros((3, 4)), np.zeros((3, 4)), np.zeros((3, 4)), np.zeros((2, 4)))
    with pytest.raises(LengthMismatch):
        value_loss(zero_params(cfg), b)


def test_composite_reductions():
    rng = np.random.default_rng(4)
    p = init_params(tiny_cfg(), rng)
    f = rng.choice([-1.0, 0.0, 1.0], size=(6, 4))
    batch = make_batch(p, rng, factors=f)
    ppo, _ = ppo_loss(p, batch, 0.1, 0.2)
    aux = aux_losses(p, batch)
    vl = value_loss(p, batch)
    off = RlConfig(aux_dc=0, aux_sc=0, aux_pd=0, aux_hd=0, value_coef=0)
    assert float(composite_loss(p, batch, off)[0].value) == float(ppo.value)
    full = RlConfig(aux_dc=0.3, aux_sc=0.5, aux_pd=2.0, aux_hd=1.0, value_coef=0.5)
    want = float(ppo.value) + 0.3 * float(aux["dc"].value) + 0.5 * float(aux["sc"].value) + 2.0 * float(aux["pd"].value) + float(aux["hd"].value) + 0.5 * float(vl.value)
    assert float(composite_loss(p, batch, full)[0].value) == pytest.approx(want, rel=1e-12)


def fd_setup(seed):
    rng = np.random.default_rng(seed)
    p = init_params(tiny_cfg(), rng)
    p["Wv"] = rng.normal(size=p["Wv"].shape)
    # old probabilities differ from the current ones so some ratios clip
    old = tuple(rng.dirichlet(np.ones(n), size=6) for n in (7, 6))
    f = rng.choice([-1.0, 0.0, 1.0], size=(6, 4))
    return p, make_batch(p, rng, factors=f, old=old)


def test_composite_gradient_finite_differences():
    p, batch = fd_setup(7)
    cfg = RlConfig(aux_dc=0.7, aux_sc=1.3, aux_pd=0.4, aux_hd=1.0, value_coef=0.5)
    loss = lambda q: float(composite_loss(q, batch, cfg)[0].value)  # noqa: E731
    assert fd_check(p, loss, lambda q: composite_loss(q, batch, cfg)[0]) >= 0.99


@pytest.mark.parametrize("key", ["dc", "sc", "pd", "hd"])
def test_aux_gradient_finite_differences(key):
    p, batch = fd_setup(8)
    assert fd_check(p, lambda q: float(aux_losses(q, batch)[key].value), lambda q: aux_losses(q, batch)[key]) >= 0.99


def test_value_gradient_finite_differences():
    p, batch = fd_setup(9)
    assert fd_check(p, lambda q: float(value_loss(q, batch).value), lambda q: value_loss(q, batch)) >= 0.99


# -- buffer --------------------------------------------------------------------


def clip(counter, T=3):
    z = np.zeros((T, 4))
    return ClipTrajectory(
        f"c{counter}", counter, np.zeros((T, 2)), np.zeros((T, 2), int), np.full((T, 3), 1 / 3), np.full((T, 3), 1 / 3), z, z, z, np.arange(T), np.zeros(4), "clip_end"
    )


def test_buffer_fifo():
    buf = RolloutBuffer(4)
    for k in range(4):
        assert buf.add(clip(k)) is None
    evicted = buf.add(clip(4))
    assert evicted.counter == 0
    assert [c.counter for c in buf.clips] == [1, 2, 3, 4]
    for k in range(5, 20):
        buf.add(clip(k))
        assert len(buf) <= 4
    assert [c.counter for c in buf.clips] == [16, 17, 18, 19]


def test_buffer_batch_bootstraps_per_clip():
    c = clip(0, T=2)
    c.rewards = np.array([[0, 0, 0, 0], [0, 0, 0, -1.0]])
    c.bootstrap = np.zeros(4)
    buf = RolloutBuffer(4)
    buf.add(c)
    b = buf.batch(0.9, 0.95)
    assert b.advantages[1, DC] == -1.0
    assert b.advantages[0, DC] == pytest.approx(-0.9 * 0.95)
