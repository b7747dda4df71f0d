import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fastrainbow.errors import ConfigError, InputError, NotReadyError
from fastrainbow.replay import (
    NStepAssembler,
    PrioritizedReplay,
    ReplayConfig,
    SumTree,
    Transition,
)


def linear_scan(priorities, u):
    """Oracle: first leaf whose inclusive cumulative sum exceeds u."""
    c = 0.0
    for i, p in enumerate(priorities):
        c += p
        if u < c:
            return i
    raise AssertionError("u beyond total")


def make_tree(priorities):
    tree = SumTree(len(priorities))
    tree.update(np.arange(len(priorities)), priorities)
    return tree


def tr(reward, env_id=0, done=False, timeout=False, step=0):
    return Transition(obs=np.array([step], dtype=np.float32), action=0, reward=reward,
                      done=done, timeout=timeout, env_id=env_id,
                      next_obs=np.array([step + 1], dtype=np.float32))


# -- sum tree ---------------------------------------------------------------

@pytest.mark.parametrize("u, leaf", [(0.5, 0), (2.9, 1), (3.0, 2), (9.99, 3)])
def test_prefix_sample_examples(u, leaf):
    assert make_tree([1, 2, 3, 4]).prefix_sample(u) == leaf


def test_single_leaf_prefix_sample():
    tree = make_tree([7.0])
    for u in (0.0, 3.5, 6.999):
        assert tree.prefix_sample(u) == 0


def test_prefix_sample_rejects_out_of_range():
    tree = make_tree([1, 2])
    with pytest.raises(InputError):
        tree.prefix_sample(3.0)
    with pytest.raises(InputError):
        tree.prefix_sample(-0.1)


def test_prefix_sample_matches_linear_scan_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        p = rng.random(n) * rng.choice([1.0, 10.0, 1e-3])
        p[rng.random(n) < 0.1] = 0.0
        if p.sum() == 0:
            p[0] = 1.0
        tree = make_tree(p)
        u = rng.random() * tree.total()
        assert tree.prefix_sample(u) == linear_scan(p, u)


def test_capacity_rounds_up_to_power_of_two():
    assert SumTree(5).capacity == 8
    assert SumTree(8).capacity == 8
    assert SumTree(1).capacity == 1
    with pytest.raises(ConfigError):
        SumTree(0)


def test_update_recomputes_total():
    tree = make_tree([1, 1, 1, 1])
    tree.update(2, 3.0)
    assert tree.total() == 6.0


def test_single_leaf_total_equals_priority():
    tree = SumTree(1)
    tree.update(0, 0.37)
    assert tree.total() == 0.37


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 31), st.floats(0, 100)), min_size=1, max_size=200))
def test_tree_sum_consistency(ops):
    tree = SumTree(32)
    for idx, p in ops:
        tree.update(idx, p)
    nodes = tree.nodes
    for i in range(1, tree.capacity):
        assert nodes[i] == pytest.approx(nodes[2 * i] + nodes[2 * i + 1], rel=1e-6, abs=1e-12)
    total = tree.total()
    tree.rebuild()
    assert tree.total() == pytest.approx(total, rel=1e-6, abs=1e-12)
    assert total == pytest.approx(tree.leaves.sum(), rel=1e-6, abs=1e-12)


# -- n-step assembly ----------------------------------------------------------

def test_nstep_plain_sum_with_unit_discount():
    a = NStepAssembler(n=3, gamma=1.0, num_envs=1)
    assert a.push(tr(1)) == []
    assert a.push(tr(2)) == []
    (e,) = a.push(tr(3))
    assert e.return_n == 6 and e.discount_n == 1.0 and e.bootstrap


def test_nstep_discounted_sum():
    a = NStepAssembler(n=3, gamma=0.99, num_envs=1)
    a.push(tr(1))
    a.push(tr(1))
    (e,) = a.push(tr(1))
    assert e.return_n == pytest.approx(2.9701, abs=1e-12)
    assert e.discount_n == pytest.approx(0.99 ** 3)


def test_nstep_terminal_truncates_window():
    a = NStepAssembler(n=3, gamma=0.99, num_envs=1)
    (e,) = a.push(tr(5, done=True))
    assert e.return_n == 5 and not e.bootstrap and e.discount_n == 0.99


def test_nstep_timeout_keeps_bootstrap():
    a = NStepAssembler(n=3, gamma=0.5, num_envs=1)
    a.push(tr(1, step=0))
    entries = a.push(tr(2, timeout=True, step=1))
    assert [e.bootstrap for e in entries] == [True, True]
    assert entries[0].return_n == 2.0 and entries[0].discount_n == 0.25
    assert entries[1].return_n == 2.0 and entries[1].discount_n == 0.5
    # both windows bootstrap from the final observation of the episode
    assert all(e.next_obs[0] == 2 for e in entries)


def test_unknown_env_id_rejected():
    a = NStepAssembler(n=3, gamma=0.99, num_envs=2)
    with pytest.raises(InputError):
        a.push(tr(1, env_id=2))


def brute_force_windows(rewards, ends, n, gamma):
    """Oracle: recompute every window directly from the raw reward list."""
    T = len(rewards)
    out = []
    for t in range(T):
        m = min(n, T - t)
        ret = sum(gamma ** i * rewards[t + i] for i in range(m))
        terminal = ends == "done" and t + m == T
        out.append((ret, gamma ** m, not terminal))
    return out


def test_nstep_matches_brute_force_enumerator():
    rng = np.random.default_rng(1)
    for _ in range(500):
        n = int(rng.integers(1, 6))
        gamma = float(rng.choice([1.0, 0.99, 0.5]))
        T = int(rng.integers(1, 21))
        rewards = rng.normal(size=T).round(3).tolist()
        ends = str(rng.choice(["done", "timeout", "open"]))
        a = NStepAssembler(n=n, gamma=gamma, num_envs=1)
        got = []
        for t, r in enumerate(rewards):
            last = t == T - 1
            got += a.push(tr(r, done=last and ends == "done",
                             timeout=last and ends == "timeout", step=t))
        want = brute_force_windows(rewards, ends, n, gamma)
        if ends == "open":
            want = want[: max(0, T - n + 1)]
        assert len(got) == len(want)
        for e, (ret, disc, boot) in zip(got, want):
            assert e.return_n == pytest.approx(ret, abs=1e-9)
            assert e.discount_n == pytest.approx(disc, abs=1e-12)
            assert e.bootstrap == boot


def test_interleaved_envs_do_not_mix():
    a = NStepAssembler(n=2, gamma=1.0, num_envs=2)
    a.push(tr(1, env_id=0))
    a.push(tr(10, env_id=1))
    (e0,) = a.push(tr(2, env_id=0))
    (e1,) = a.push(tr(20, env_id=1))
    assert (e0.return_n, e1.return_n) == (3, 30)


# -- prioritized replay ---------------------------------------------------------

def small_replay(capacity=16, n=1, **kw):
    return PrioritizedReplay(ReplayConfig(capacity=capacity, n=n, **kw), num_envs=1, seed=0)


def test_zero_capacity_is_configuration_error():
    with pytest.raises(ConfigError):
        small_replay(capacity=0)


def test_sample_before_ready_raises():
    r = small_replay()
    r.push(tr(1))
    with pytest.raises(NotReadyError):
        r.sample(4)


def test_equal_priorities_give_unit_weights():
    r = small_replay()
    for i in range(10):
        r.push(tr(i, step=i))
    _, _, w = r.sample(8, frame=0)
    assert np.all(w == 1.0)


def test_importance_weight_hand_case():
    r = small_replay(capacity=4)
    for i in range(4):
        r.push(tr(i, step=i))
    r.tree.update(np.arange(4), [0.1, 0.2, 0.3, 0.4])
    w = r.importance_weights(np.array([0.1, 0.2, 0.3, 0.4]), beta=1.0)
    np.testing.assert_allclose(w, [1.0, 0.5, 1 / 3, 0.25], rtol=0, atol=1e-9)


def test_weights_bounded_and_max_is_one():
    r = small_replay(capacity=64)
    rng = np.random.default_rng(0)
    for i in range(64):
        r.push(tr(i, step=i))
    idx, _, _ = r.sample(32)
    r.update_priorities(idx, rng.random(32) * 5)
    for frame in (0, 10**6, 10**8):
        _, _, w = r.sample(16, frame)
        assert np.all(w > 0) and np.all(w <= 1) and w.max() == 1.0


def test_beta_schedule():
    r = small_replay(beta_anneal_frames=1000)
    assert r.beta_at(0) == 0.45
    assert r.beta_at(500) == pytest.approx(0.725)
    assert r.beta_at(1000) == 1.0
    assert r.beta_at(5000) == 1.0


def test_priority_update_formula_and_floor():
    r = small_replay()
    r.push(tr(1))
    (idx,) = r.live_indices()
    r.update_priorities([idx], [0.0])
    assert r.tree[0] == pytest.approx(1e-3, rel=1e-12)
    r.update_priorities([idx], [3.0])
    assert r.tree[0] == pytest.approx((3.0 + 1e-6) ** 0.5)
    assert r.max_priority == pytest.approx((3.0 + 1e-6) ** 0.5)


def test_new_entries_enter_at_running_max():
    r = small_replay()
    r.push(tr(1, step=0))
    r.update_priorities(r.live_indices(), [99.0])
    r.push(tr(2, step=1))
    assert r.tree[1] == pytest.approx(np.sqrt(99.0 + 1e-6))


def test_ring_overwrite_and_stale_updates():
    cap, k = 8, 5
    r = small_replay(capacity=cap)
    for i in range(cap + k):
        r.push(tr(float(i), step=i))
    live = r.live_indices()
    assert len(r) == cap and len(live) == cap
    assert list(live) == list(range(k, cap + k))
    returns = sorted(r.entry(i).return_n for i in live)
    assert returns == [float(i) for i in range(k, cap + k)]
    r.update_priorities([0, 1, live[0]], [1.0, 1.0, 1.0])
    assert r.stale_updates == 2


def test_sampling_distribution_matches_priorities():
    tree = make_tree([1, 2, 3, 4])
    rng = np.random.default_rng(123)
    leaves = tree.prefix_sample(rng.random(100_000) * tree.total())
    counts = np.bincount(leaves, minlength=4)
    assert stats.chisquare(counts, f_exp=np.array([0.1, 0.2, 0.3, 0.4]) * 100_000).pvalue > 0.01


def test_stratified_sample_distribution():
    r = small_replay(capacity=4)
    for i in range(4):
        r.push(tr(i, step=i))
    r.tree.update(np.arange(4), [1, 2, 3, 4])
    counts = np.zeros(4)
    for _ in range(2500):
        idx, _, _ = r.sample(4)
        counts += np.bincount(idx % 4, minlength=4)
    # stratification lowers variance, so the chi-square statistic only gets smaller
    assert stats.chisquare(counts, f_exp=np.array([0.1, 0.2, 0.3, 0.4]) * counts.sum()).pvalue > 0.01


def test_uint8_storage_roundtrip():
    r = PrioritizedReplay(ReplayConfig(capacity=4, n=1), num_envs=1, obs_dtype=np.uint8)
    obs = np.array([[0.0, 128 / 255, 1.0]], dtype=np.float32)
    r.push(Transition(obs, 1, 0.5, False, False, 0, obs))
    _, batch, _ = r.sample(1)
    np.testing.assert_array_equal(batch["obs"][0], obs)
