import numpy as np
import pytest
from scipy import stats

from role_forge.autodiff import Tape
from role_forge.model import forward_batch, step_forward, step_inputs
from role_forge.nn import ParamSet
from role_forge.objectives import td_loss
from role_forge.replay import EpisodeBatch, ReplayBuffer
from role_forge.trainer import (
    TrainConfig,
    Trainer,
    TrainingAborted,
    collect_episodes,
    dissimilarity_gap,
    epsilon,
    evaluate,
    greedy,
    model_spec_for,
    rmsprop_step,
    run_episodes,
    select_actions,
    target_sync,
)


def trainer(kind="sacrifice", **kw):
    return Trainer(TrainConfig(env_kind=kind, single_thread=True, **kw))


# --- schedules and optimizer ------------------------------------------------------------


@pytest.mark.parametrize("t, expected", [(0, 1.0), (25_000, 0.525), (50_000, 0.05), (10**6, 0.05)])
def test_epsilon_schedule(t, expected):
    assert epsilon(t) == pytest.approx(expected, abs=1e-15)


def test_epsilon_rejects_negative():
    with pytest.raises(ValueError):
        epsilon(-1)


def test_rmsprop_first_step():
    p = {"w": np.array([0.0])}
    state = {}
    assert rmsprop_step(p, {"w": np.array([1.0])}, state)
    assert p["w"][0] == pytest.approx(-5e-4 / (0.1 + 1e-5), abs=1e-16)
    assert p["w"][0] == pytest.approx(-4.99950e-3, abs=1e-8)
    assert state["w"][0] == pytest.approx(0.01, abs=1e-16)


def test_rmsprop_zero_gradient_decays_state():
    p = {"w": np.array([1.5])}
    state = {"w": np.array([0.2])}
    rmsprop_step(p, {"w": np.array([0.0])}, state)
    assert p["w"][0] == 1.5
    assert state["w"][0] == pytest.approx(0.99 * 0.2, abs=1e-17)


def test_rmsprop_two_step_unroll():
    g, lr, a, e = 0.7, 5e-4, 0.99, 1e-5
    p = {"w": np.array([0.3])}
    state = {}
    rmsprop_step(p, {"w": np.array([g])}, state)
    rmsprop_step(p, {"w": np.array([g])}, state)
    v1 = (1 - a) * g * g
    v2 = a * v1 + (1 - a) * g * g
    expected = 0.3 - lr * g / (np.sqrt(v1) + e) - lr * g / (np.sqrt(v2) + e)
    assert abs(p["w"][0] - expected) < 1e-15


def test_rmsprop_skips_non_finite():
    p = {"a": np.array([1.0]), "b": np.array([2.0])}
    state = {}
    assert not rmsprop_step(p, {"a": np.array([1.0]), "b": np.array([np.nan])}, state)
    assert p["a"][0] == 1.0 and state == {}


def test_target_sync_period():
    params = ParamSet({"w": np.ones(3)})
    old = ParamSet({"w": np.zeros(3)})
    assert target_sync(params, old, 199) is old
    synced = target_sync(params, old, 200)
    assert synced.equals(params) and synced is not params


# --- acting -----------------------------------------------------------------------------


def test_uniform_exploration_chi_square():
    tr = trainer("harvest")
    rng = np.random.default_rng(0)
    obs = np.random.default_rng(1).standard_normal((4, tr.spec.obs_dim))
    h = np.zeros((4, tr.spec.hidden_dim))
    counts = np.zeros(tr.spec.n_actions)
    for _ in range(2500):
        acts, _, _ = select_actions(tr.spec, tr.params, obs, -np.ones(4, dtype=int), h, 1.0, rng)
        np.add.at(counts, acts, 1)
    assert counts.sum() == 10_000
    assert stats.chisquare(counts).pvalue > 0.01


def test_greedy_is_deterministic():
    tr = trainer("harvest")
    obs = np.random.default_rng(1).standard_normal((4, tr.spec.obs_dim))
    h = np.zeros((4, tr.spec.hidden_dim))
    runs = [
        select_actions(tr.spec, tr.params, obs, -np.ones(4, dtype=int), h, 0.0, np.random.default_rng(s), mode="eval")[0]
        for s in range(5)
    ]
    assert all(np.array_equal(runs[0], r) for r in runs)


def test_ties_go_to_lowest_index():
    assert greedy(np.zeros((3, 4))).tolist() == [0, 0, 0]
    assert greedy(np.array([[1.0, 2.0, 2.0]])).tolist() == [1]


def test_select_actions_rejects_mode():
    tr = trainer()
    with pytest.raises(ValueError):
        select_actions(tr.spec, tr.params, np.zeros((4, 8)), -np.ones(4, dtype=int), np.zeros((4, 64)), 0, None, "test")


def test_mixer_never_consulted_when_acting():
    tr = trainer("harvest")
    poisoned = tr.params.copy()
    for k in poisoned.keys():
        if k.startswith("mixer/"):
            poisoned[k] = np.full_like(poisoned[k], np.nan)
    a = run_episodes("harvest", tr.spec, tr.params, 0.3, [5, 6])
    b = run_episodes("harvest", tr.spec, poisoned, 0.3, [5, 6])
    assert all(x.equals(y) for x, y in zip(a.episodes, b.episodes))


def test_batch_forward_matches_stepwise_acting():
    tr = trainer("harvest")
    spec = tr.spec
    rec = run_episodes("harvest", spec, tr.params, 0.5, [11])
    ep = rec.episodes[0]
    tape = Tape(record=False)
    p = tape.params(tr.params)
    fwd = forward_batch(tape, p, spec, ep.obs[None], ep.actions[None], ep.noise[None])
    n = spec.n_agents
    h = np.zeros((n, spec.hidden_dim))
    last = -np.ones(n, dtype=np.int64)
    for t in range(ep.length):
        inputs = step_inputs(spec, ep.obs[t][None], last[None])
        q, h, _ = step_forward(tape, p, spec, inputs, ep.obs[t], h, noise=ep.noise[t])
        np.testing.assert_allclose(fwd.q_all.data[t * n : (t + 1) * n], q, rtol=0, atol=1e-12)
        last = ep.actions[t]


# --- collection and replay --------------------------------------------------------------


def test_single_thread_collection_is_reproducible():
    tr = trainer()
    a = collect_episodes("sacrifice", tr.spec, tr.params, 0.5, [1, 2, 3])
    b = collect_episodes("sacrifice", tr.spec, tr.params, 0.5, [1, 2, 3])
    assert all(x.equals(y) for x, y in zip(a, b))


def test_parallel_matches_single_thread():
    tr = trainer()
    seeds = list(range(8))
    single = collect_episodes("sacrifice", tr.spec, tr.params, 0.5, seeds, single_thread=True)
    parallel = collect_episodes("sacrifice", tr.spec, tr.params, 0.5, seeds, single_thread=False, n_workers=4)
    assert len(single) == len(parallel) == 8
    assert all(x.equals(y) for x, y in zip(single, parallel))


def test_replay_round_trip_and_fifo():
    tr = trainer()
    eps = collect_episodes("sacrifice", tr.spec, tr.params, 1.0, [1, 2, 3])
    buf = ReplayBuffer(2)
    buf.insert(eps)
    assert len(buf) == 2
    assert buf.episodes[0] is eps[1] and buf.episodes[1] is eps[2]
    got = buf.sample(2, np.random.default_rng(0))
    assert {id(e) for e in got} == {id(eps[1]), id(eps[2])}
    batch = EpisodeBatch.from_episodes([got[0]])
    assert np.array_equal(batch.noise[0], got[0].noise)
    assert np.array_equal(batch.obs[0], got[0].obs)
    with pytest.raises(ValueError):
        buf.sample(3, np.random.default_rng(0))


def test_batch_mask_is_prefix():
    tr = trainer("harvest")
    eps = collect_episodes("harvest", tr.spec, tr.params, 1.0, [1, 2])
    eps[1].obs, eps[1].actions, eps[1].rewards = eps[1].obs[:5], eps[1].actions[:5], eps[1].rewards[:5]
    eps[1].states, eps[1].noise = eps[1].states[:5], eps[1].noise[:5]
    batch = EpisodeBatch.from_episodes(eps)
    assert batch.mask[0].tolist() == [1.0] * 15
    assert batch.mask[1].tolist() == [1.0] * 5 + [0.0] * 10


# --- losses in the loop -----------------------------------------------------------------


def test_bellman_consistent_fixture_has_zero_td():
    tr = trainer("sacrifice", ablation="qmix")
    c, gamma = 2.0, 0.99
    for k in tr.params.keys():
        if k.startswith("mixer/"):
            tr.params[k] = np.zeros_like(tr.params[k])
    tr.params["mixer/hyper_b2/fc2/b"] = np.array([c])
    target = target_sync(tr.params, tr.target, 200)
    ep = collect_episodes("sacrifice", tr.spec, tr.params, 1.0, [4])[0]
    ep.rewards = np.full(ep.length, c - gamma * c)
    ep.rewards[-1] = c
    batch = EpisodeBatch.from_episodes([ep])
    tape = Tape()
    assert abs(td_loss(tape, tape.params(tr.params), target, tr.spec, batch, gamma).item()) < 1e-24


def test_qmix_reports_no_regularizers():
    tr = trainer("harvest", ablation="qmix")
    tr.buffer.insert(collect_episodes("harvest", tr.spec, tr.params, 1.0, [1, 2]))
    tr.cfg.batch_episodes = 2
    br = tr.update(tr.sample_batch())
    assert br.l_i == 0.0 and br.l_d == 0.0 and br.total == br.l_td


@pytest.mark.parametrize("ablation, mode", [("roma", "roles"), ("qmix", "shared_head"), ("qmix_nps", "nps")])
def test_ablation_model_modes(ablation, mode):
    spec = model_spec_for(TrainConfig(env_kind="harvest", ablation=ablation))
    assert spec.mode == mode


def test_nan_loss_aborts():
    tr = trainer()
    tr.buffer.insert(collect_episodes("sacrifice", tr.spec, tr.params, 1.0, [1, 2]))
    tr.cfg.batch_episodes = 2
    batch = tr.sample_batch()
    batch.rewards[:] = np.nan
    before = tr.params.checksum()
    with pytest.raises(TrainingAborted):
        tr.update(batch)
    assert tr.params.checksum() == before


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(ablation="vdn")
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(env_kind="smac")


# --- evaluation -------------------------------------------------------------------------


def test_zero_heads_fail_sacrifice():
    tr = trainer("sacrifice")
    for k in tr.params.keys():
        if k.startswith("role_decoder/"):
            tr.params[k] = np.zeros_like(tr.params[k])
    res = evaluate(tr.spec, tr.params, "sacrifice", episodes=4)
    assert res.success_rate == 0.0 and res.mean_return == 0.0


def test_evaluate_does_not_mutate():
    tr = trainer("harvest")
    before = tr.params.checksum()
    res = evaluate(tr.spec, tr.params, "harvest", episodes=3, seed=1)
    assert tr.params.checksum() == before
    assert len(res.role_record) == 3 * 15 * 4
    assert all(min(r[7:10]) >= 0.1 for r in res.role_record)
    assert {r[3] for r in res.role_record} == {"A", "B"}


def test_gap_values_and_degenerate_partition():
    tr = trainer("harvest")
    between, within = dissimilarity_gap(tr.spec, tr.params, "harvest", episodes=2)
    assert 0 <= between <= 1 and 0 <= within <= 1
    solo = trainer("twostate")
    assert dissimilarity_gap(solo.spec, solo.params, "twostate", episodes=2) == (None, None)


def test_short_run_is_deterministic():
    rows = []
    for _ in range(2):
        tr = trainer("sacrifice", t_max=400, batch_episodes=8, eval_interval=2, eval_episodes=2)
        rows.append(tr.run())
    assert len(rows[0]) == len(rows[1]) > 0
    for a, b in zip(*rows):
        assert repr(a) == repr(b)
