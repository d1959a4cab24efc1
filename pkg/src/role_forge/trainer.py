"""Centralized training, decentralized execution.

Rollouts act with local networks only; the mixer enters through the TD loss.
One collection round gathers ``n_parallel`` episodes, followed by
``updates_per_round`` gradient updates on batches drawn from the replay buffer.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autodiff import Tape
from .envs import ENV_KINDS, StepResult, ground_truth_partition, make_env
from .model import ModelSpec, init_model_params, step_forward, step_inputs
from .nn import ParamSet
from .objectives import LossBreakdown, minmax_normalize, ordered_pairs, total_loss
from .replay import Episode, EpisodeBatch, ReplayBuffer
from .roles import dissimilarity

log = logging.getLogger(__name__)

ABLATIONS = ("roma", "td_only", "td_plus_li", "td_plus_ld", "qmix", "qmix_nps")
METRIC_COLUMNS = (
    "update",
    "env_steps",
    "l_td",
    "l_i",
    "l_d",
    "total",
    "eps",
    "eval_return",
    "eval_success",
    "between_d",
    "within_d",
)


@dataclass
class TrainConfig:
    env_kind: str = "harvest"
    gamma: float = 0.99
    lr: float = 5e-4
    rms_alpha: float = 0.99
    rms_eps: float = 1e-5
    lambda_i: float = 1e-4
    lambda_d: float = 1e-2
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_anneal_steps: int = 50_000
    n_parallel: int = 8
    batch_episodes: int = 32
    buffer_capacity: int = 2000
    target_interval: int = 200
    role_dim: int = 3
    hidden_dim: int = 64
    ablation: str = "roma"
    seed: int = 0
    t_max: int = 200_000
    updates_per_round: int = 1
    eval_interval: int = 50
    eval_episodes: int = 32
    single_thread: bool = False
    last_action_input: bool = True
    agent_id_input: bool = True

    def __post_init__(self):
        if self.env_kind not in ENV_KINDS:
            raise ValueError(f"env_kind must be one of {ENV_KINDS}, got {self.env_kind!r}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool) or f.name in ("env_kind", "ablation", "seed"):
                continue
            if f.name in ("lambda_i", "lambda_d"):
                if v < 0:
                    raise ValueError(f"{f.name} must be non-negative")
            elif v <= 0:
                raise ValueError(f"{f.name} must be positive, got {v}")
        if self.eps_end > self.eps_start:
            raise ValueError("eps_end must not exceed eps_start")

    @property
    def effective_lambdas(self) -> tuple[float, float]:
        return {
            "roma": (self.lambda_i, self.lambda_d),
            "td_only": (0.0, 0.0),
            "td_plus_li": (self.lambda_i, 0.0),
            "td_plus_ld": (0.0, self.lambda_d),
            "qmix": (0.0, 0.0),
            "qmix_nps": (0.0, 0.0),
        }[self.ablation]

    def to_dict(self):
        return asdict(self)


def model_spec_for(cfg: TrainConfig) -> ModelSpec:
    env = make_env(cfg.env_kind)
    mode = {"qmix": "shared_head", "qmix_nps": "nps"}.get(cfg.ablation, "roles")
    return ModelSpec(
        n_agents=env.n_agents,
        obs_dim=env.obs_dim,
        state_dim=env.state_dim,
        n_actions=env.n_actions,
        mode=mode,
        hidden_dim=cfg.hidden_dim,
        role_dim=cfg.role_dim,
        last_action_input=cfg.last_action_input,
        agent_id_input=cfg.agent_id_input,
    )


def epsilon(t, start=1.0, end=0.05, anneal_steps=50_000) -> float:
    """Linear anneal from ``start`` to ``end`` over ``anneal_steps`` env steps, then flat."""
    if t < 0:
        raise ValueError("step count must be non-negative")
    return max(end, start - (start - end) * t / anneal_steps)


def greedy(q):
    """Row-wise argmax; ties go to the lowest action index."""
    return np.argmax(q, axis=-1)


def select_actions(spec: ModelSpec, params, obs, last_actions, hidden, eps, rng, mode="train", noise=None):
    """Joint action for one environment from local networks only.

    Returns ``(actions [n], hidden [n, H], role)``. In ``eval`` mode the role
    mean is used and exploration is off.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    evaluating = mode == "eval"
    tape = Tape(record=False)
    p = tape.params(params, requires_grad=False)
    if noise is None:
        noise = rng.standard_normal((spec.n_agents, spec.role_dim))
    inputs = step_inputs(spec, obs[None], np.asarray(last_actions)[None])
    q, h, role = step_forward(tape, p, spec, inputs, obs, hidden, noise=noise, greedy=evaluating)
    acts = greedy(q)
    if not evaluating:
        for i in range(spec.n_agents):
            if rng.random() < eps:
                acts[i] = rng.integers(spec.n_actions)
    return acts, h, role


@dataclass
class RolloutRecord:
    episodes: list
    mu: list = field(default_factory=list)  # per episode [T, n, role_dim]
    sigma2: list = field(default_factory=list)
    h_prev: list = field(default_factory=list)  # per episode [T, n, H]


def run_episodes(kind, spec: ModelSpec, params, eps, seeds, mode="train") -> RolloutRecord:
    """Roll out one episode per seed, stepping all environments in lock-step.

    Each environment owns a generator built from its seed; per step it draws
    the role noise for every agent, then one uniform per agent for the
    exploration decision (plus an action index when exploring). The result
    therefore does not depend on how environments are grouped.
    """
    evaluating = mode == "eval"
    k = len(seeds)
    n = spec.n_agents
    envs = [make_env(kind) for _ in seeds]
    rngs = [np.random.default_rng(s) for s in seeds]
    env_seeds = [int(r.integers(2**31)) for r in rngs]
    results = [e.reset(s) for e, s in zip(envs, env_seeds)]
    horizon = envs[0].horizon
    obs = np.zeros((k, horizon, n, spec.obs_dim))
    states = np.zeros((k, horizon, envs[0].state_dim))
    actions = np.zeros((k, horizon, n), dtype=np.int64)
    rewards = np.zeros((k, horizon))
    noise = np.zeros((k, horizon, n, spec.role_dim))
    mus = np.zeros((k, horizon, n, spec.role_dim))
    s2s = np.zeros((k, horizon, n, spec.role_dim))
    h_prevs = np.zeros((k, horizon, n, spec.hidden_dim))
    positions = [[r.info["positions"]] for r in results]
    lengths = np.full(k, horizon)
    alive = np.ones(k, dtype=bool)
    h = np.zeros((k * n, spec.hidden_dim))
    last = -np.ones((k, n), dtype=np.int64)
    tape = Tape(record=False)
    p = tape.params(params, requires_grad=False)
    for t in range(horizon):
        cur = np.stack([r.obs for r in results])
        obs[:, t] = cur
        states[:, t] = np.stack([r.state for r in results])
        noise[:, t] = np.stack([r.standard_normal((n, spec.role_dim)) for r in rngs])
        h_prevs[:, t] = h.reshape(k, n, -1)
        inputs = step_inputs(spec, cur, last)
        q, h, role = step_forward(
            tape, p, spec, inputs, cur.reshape(k * n, -1), h, noise=noise[:, t].reshape(k * n, -1), greedy=evaluating
        )
        if role is not None:
            mus[:, t] = role.mu.data.reshape(k, n, -1)
            s2s[:, t] = role.sigma2.data.reshape(k, n, -1)
        acts = greedy(q).reshape(k, n)
        for e in range(k):
            if not alive[e]:
                continue
            if not evaluating:
                for i in range(n):
                    if rngs[e].random() < eps:
                        acts[e, i] = rngs[e].integers(spec.n_actions)
            res = envs[e].step(acts[e])
            results[e] = res
            actions[e, t] = acts[e]
            rewards[e, t] = res.reward
            positions[e].append(res.info["positions"])
            if res.done:
                alive[e] = False
                lengths[e] = t + 1
        last = actions[:, t]
        if not alive.any():
            break
    rec = RolloutRecord([])
    for e in range(k):
        t = lengths[e]
        rec.episodes.append(
            Episode(obs[e, :t], actions[e, :t], rewards[e, :t], states[e, :t], noise[e, :t], np.array(positions[e]), seeds[e])
        )
        rec.mu.append(mus[e, :t])
        rec.sigma2.append(s2s[e, :t])
        rec.h_prev.append(h_prevs[e, :t])
    return rec


def collect_episodes(kind, spec, params, eps, seeds, single_thread=True, n_workers=8) -> list[Episode]:
    """One episode per seed. Parallel mode hands each worker its own env and
    a read-only parameter snapshot; results come back in seed order."""
    if len(seeds) < 1:
        raise ValueError("need at least one episode")
    if single_thread:
        return run_episodes(kind, spec, params, eps, seeds).episodes
    snapshot = params.copy() if isinstance(params, ParamSet) else dict(params)
    out = []
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        futures = [pool.submit(run_episodes, kind, spec, snapshot, eps, [s]) for s in seeds]
        for s, fut in zip(seeds, futures):
            try:
                out.extend(fut.result().episodes)
            except Exception as exc:  # a failed env loses its episode only
                log.warning("episode with seed %s discarded: %s", s, exc)
    return out


def rmsprop_step(params, grads, opt_state, lr=5e-4, alpha=0.99, eps=1e-5) -> bool:
    """v <- alpha v + (1 - alpha) g^2; theta <- theta - lr g / (sqrt(v) + eps).

    Updates ``params`` and ``opt_state`` in place. Returns False (and changes
    nothing) when any gradient is non-finite.
    """
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {params[k].shape}")
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient in %s; update skipped", k)
            return False
    for k, g in grads.items():
        v = opt_state.get(k)
        if v is None:
            v = opt_state[k] = np.zeros_like(g)
        v *= alpha
        v += (1.0 - alpha) * g * g
        params[k] -= lr * g / (np.sqrt(v) + eps)
    if isinstance(params, ParamSet):
        params.version += 1
    return True


def target_sync(params, target_params, step, interval=200):
    """Hard copy of ``params`` every ``interval`` updates; otherwise unchanged."""
    if step > 0 and step % interval == 0:
        return params.copy()
    return target_params


class TrainingAborted(RuntimeError):
    pass


@dataclass
class EvalResult:
    mean_return: float
    success_rate: float
    role_record: list  # rows (episode, t, agent, duty_label, mu[3], sigma2[3])
    between_d: float | None = None
    within_d: float | None = None


def _gap_from_record(spec, params, kind, rec: RolloutRecord):
    """Between-duty and within-duty means of per-step normalized dissimilarity."""
    n = spec.n_agents
    if spec.mode != "roles" or n < 2:
        return None, None
    pi, pj, _ = ordered_pairs(n)
    tape = Tape(record=False)
    p = tape.params(params, names=[k for k in params.keys() if k.startswith("dissim/")], requires_grad=False)
    between, within = [], []
    for ep, h_prev in zip(rec.episodes, rec.h_prev):
        labels = ground_truth_partition(kind, ep.positions)
        same = np.array([labels[i] == labels[j] for i, j in zip(pi, pj)])
        t_len = h_prev.shape[0]
        flat = h_prev.reshape(t_len * n, -1)
        rows_i = (np.arange(t_len)[:, None] * n + pi[None, :]).reshape(-1)
        rows_j = (np.arange(t_len)[:, None] * n + pj[None, :]).reshape(-1)
        d = dissimilarity(tape, p, tape.const(flat[rows_i]), tape.const(flat[rows_j])).data.reshape(t_len, -1)
        for t in range(t_len):
            dn = minmax_normalize(d[t])
            between.extend(dn[~same])
            within.extend(dn[same])
    b = float(np.mean(between)) if between else None
    w = float(np.mean(within)) if within else None
    return b, w


def evaluate(spec: ModelSpec, params, kind, episodes=32, seed=0, with_gap=True) -> EvalResult:
    """Greedy rollouts (role mean, no exploration). Never modifies ``params``."""
    if episodes < 1:
        raise ValueError("need at least one evaluation episode")
    seeds = [int(s) for s in np.random.SeedSequence([seed, 99]).generate_state(episodes)]
    rec = run_episodes(kind, spec, params, 0.0, seeds, mode="eval")
    env = make_env(kind)
    returns, succ, rows = [], [], []
    for e, ep in enumerate(rec.episodes):
        returns.append(ep.ret)
        # success is judged on the final configuration
        succ.append(env.success(StepResult(None, None, 0.0, True, {"positions": ep.positions[-1]})))
        labels = ground_truth_partition(kind, ep.positions)
        if spec.mode == "roles":
            for t in range(ep.length):
                for i in range(spec.n_agents):
                    rows.append((e, t, i, labels[i], *rec.mu[e][t, i], *rec.sigma2[e][t, i]))
    between = within = None
    if with_gap:
        between, within = _gap_from_record(spec, params, kind, rec)
    success = float(np.mean(succ)) if not all(math.isnan(s) for s in succ) else float("nan")
    return EvalResult(float(np.mean(returns)), success, rows, between, within)


def dissimilarity_gap(spec: ModelSpec, params, kind, episodes=32, seed=0):
    """(between-duty mean, within-duty mean) of normalized learned dissimilarity."""
    res = evaluate(spec, params, kind, episodes, seed, with_gap=True)
    return res.between_d, res.within_d


class Trainer:
    """Holds every piece of mutable training state so it can be checkpointed."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.spec = model_spec_for(cfg)
        self.params = init_model_params(self.spec, np.random.default_rng([cfg.seed, 1]))
        self.target = self.params.copy()
        self.opt_state: dict[str, np.ndarray] = {}
        self.sample_rng = np.random.default_rng([cfg.seed, 2])
        self.buffer = ReplayBuffer(cfg.buffer_capacity)
        self.rounds = 0
        self.updates = 0
        self.env_steps = 0
        self.lambdas = cfg.effective_lambdas
        self.last_breakdown: LossBreakdown | None = None

    @property
    def eps(self):
        c = self.cfg
        return epsilon(self.env_steps, c.eps_start, c.eps_end, c.eps_anneal_steps)

    def round_seeds(self):
        c = self.cfg
        return [int(s) for s in np.random.SeedSequence([c.seed, 3, self.rounds]).generate_state(c.n_parallel)]

    def collect(self):
        eps = self.eps
        episodes = collect_episodes(
            self.cfg.env_kind,
            self.spec,
            self.params,
            eps,
            self.round_seeds(),
            single_thread=self.cfg.single_thread,
            n_workers=self.cfg.n_parallel,
        )
        self.rounds += 1
        self.buffer.insert(episodes)
        self.env_steps += sum(e.length for e in episodes)
        return eps

    def loss(self, batch, tape=None, norm=None) -> LossBreakdown:
        tape = tape if tape is not None else Tape()
        p = tape.params(self.params)
        li, ld = self.lambdas
        return total_loss(tape, p, self.target, self.spec, batch, li, ld, self.cfg.gamma, norm=norm)

    def update(self, batch) -> LossBreakdown:
        tape = Tape()
        p = tape.params(self.params)
        li, ld = self.lambdas
        br = total_loss(tape, p, self.target, self.spec, batch, li, ld, self.cfg.gamma)
        if not math.isfinite(br.total):
            raise TrainingAborted(f"non-finite loss at update {self.updates}: {br}")
        tape.backward(br.total_node)
        grads = {k: v.grad for k, v in p.items()}
        c = self.cfg
        rmsprop_step(self.params, grads, self.opt_state, c.lr, c.rms_alpha, c.rms_eps)
        self.updates += 1
        self.target = target_sync(self.params, self.target, self.updates, c.target_interval)
        self.last_breakdown = br
        return br

    def sample_batch(self):
        return EpisodeBatch.from_episodes(self.buffer.sample(self.cfg.batch_episodes, self.sample_rng))

    def evaluate(self, with_gap=True) -> EvalResult:
        return evaluate(self.spec, self.params, self.cfg.env_kind, self.cfg.eval_episodes, self.cfg.seed, with_gap)

    def metrics_row(self, br: LossBreakdown, eps, ev: EvalResult | None):
        nan = float("nan")
        return {
            "update": self.updates,
            "env_steps": self.env_steps,
            "l_td": br.l_td,
            "l_i": br.l_i,
            "l_d": br.l_d,
            "total": br.total,
            "eps": eps,
            "eval_return": ev.mean_return if ev else nan,
            "eval_success": ev.success_rate if ev else nan,
            "between_d": ev.between_d if ev and ev.between_d is not None else nan,
            "within_d": ev.within_d if ev and ev.within_d is not None else nan,
        }

    def run(self, on_row=None):
        """Train until ``t_max`` env steps; ``on_row(row, trainer)`` sees every metrics row."""
        rows = []
        c = self.cfg
        while self.env_steps < c.t_max:
            eps = self.collect()
            if not self.buffer.can_sample(c.batch_episodes):
                continue
            for _ in range(c.updates_per_round):
                br = self.update(self.sample_batch())
                done = self.env_steps >= c.t_max
                ev = self.evaluate() if (self.updates % c.eval_interval == 0 or done) else None
                row = self.metrics_row(br, eps, ev)
                rows.append(row)
                if on_row is not None:
                    on_row(row, self)
        return rows


def train(cfg: TrainConfig, on_row=None):
    """Run a full training loop; returns ``(trainer, metrics_rows)``."""
    trainer = Trainer(cfg)
    rows = trainer.run(on_row)
    return trainer, rows
