"""Multi-seed experiments shared by the acceptance tests and ``scripts/``.

Every run writes its metrics CSV (and, for role models, a roles CSV) under
``out_dir`` so the learning curves can be inspected afterwards.
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import artifacts, plots
from .autodiff import Tape
from .envs import env_reset
from .model import forward_batch
from .objectives import chosen_q_tot
from .oracles import twostate_q_star
from .replay import Episode, EpisodeBatch
from .trainer import TrainConfig, Trainer


@dataclass
class RunSummary:
    env_kind: str
    ablation: str
    seed: int
    updates: int
    env_steps: int
    eval_return: float
    eval_success: float
    between_d: float
    within_d: float
    seconds: float

    @property
    def gap_ratio(self) -> float:
        if not (math.isfinite(self.between_d) and math.isfinite(self.within_d)):
            return math.nan
        return self.between_d / self.within_d if self.within_d > 0 else math.inf


def run_one(cfg: TrainConfig, out_dir=None) -> tuple[RunSummary, Trainer, list[dict]]:
    """Train one configuration; the last metrics row always carries an evaluation."""
    t0 = time.perf_counter()
    tr = Trainer(cfg)
    writer = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").unlink(missing_ok=True)
        writer = artifacts.MetricsWriter(out / "metrics.csv")
    try:
        rows = tr.run(None if writer is None else (lambda row, _: writer.write(row)))
    finally:
        if writer is not None:
            writer.close()
    if out_dir is not None and tr.spec.mode == "roles":
        artifacts.write_roles(tr.evaluate(with_gap=False).role_record, Path(out_dir) / "roles.csv")
    last = rows[-1]
    summary = RunSummary(
        cfg.env_kind,
        cfg.ablation,
        cfg.seed,
        tr.updates,
        tr.env_steps,
        last["eval_return"],
        last["eval_success"],
        last["between_d"],
        last["within_d"],
        time.perf_counter() - t0,
    )
    return summary, tr, rows


def _cfg(env_kind, ablation, seed, t_max, **kw):
    return TrainConfig(env_kind=env_kind, ablation=ablation, seed=seed, t_max=t_max, single_thread=True, **kw)


def gap_experiment(seeds=range(5), t_max=200_000, out_dir=None) -> list[RunSummary]:
    """The full role model on harvest; reports between- and within-duty dissimilarity per seed."""
    out = []
    for s in seeds:
        where = None if out_dir is None else Path(out_dir) / f"roma_seed{s}"
        out.append(run_one(_cfg("harvest", "roma", s, t_max), where)[0])
    return out


def sacrifice_comparison(seeds=range(5), t_max=200_000, out_dir=None) -> dict[str, list[RunSummary]]:
    """The full role model against the qmix ablation on sacrifice with identical seeds and budget."""
    results: dict[str, list[RunSummary]] = {"roma": [], "qmix": []}
    curves = {}
    for ablation in results:
        for s in seeds:
            where = None if out_dir is None else Path(out_dir) / f"{ablation}_seed{s}"
            summary, _, rows = run_one(_cfg("sacrifice", ablation, s, t_max), where)
            results[ablation].append(summary)
            curves[(ablation, s)] = rows
    if out_dir is not None:
        Path(out_dir, "learning_curves.svg").write_text(mean_curve_svg(curves, "sacrifice eval return"))
    return results


def mean_curve_svg(curves: dict, title: str) -> str:
    """Seed-averaged eval return per method, at the evaluation points of each run."""
    series = {}
    for name in sorted({k[0] for k in curves}):
        runs = [[(r["env_steps"], r["eval_return"]) for r in rows if math.isfinite(r["eval_return"])]
                for (m, _), rows in curves.items() if m == name]
        n = min(len(r) for r in runs)
        xs = [float(np.mean([r[i][0] for r in runs])) for i in range(n)]
        ys = [float(np.mean([r[i][1] for r in runs])) for i in range(n)]
        series[name] = (xs, ys)
    return plots.line_chart(series, title, "env steps", "mean eval return")


ABLATION_SET = ("td_only", "td_plus_li", "td_plus_ld", "qmix", "qmix_nps")


def ablation_runs(t_max=50_000, seed=0, out_dir=None) -> list[RunSummary]:
    out = []
    for ablation in ABLATION_SET:
        where = None if out_dir is None else Path(out_dir) / ablation
        out.append(run_one(_cfg("harvest", ablation, seed, t_max), where)[0])
    return out


# --- two-state sanity run ---------------------------------------------------------------


def twostate_config(seed=0) -> TrainConfig:
    """Uniform behaviour policy so every (t, s, a) cell is visited; Q-learning is off-policy."""
    return _cfg(
        "twostate",
        "roma",
        seed,
        t_max=120_000,
        eps_start=1.0,
        eps_end=1.0,
        target_interval=50,
        updates_per_round=2,
        eval_interval=10**9,
    )


def twostate_q_error(tr: Trainer) -> float:
    """Max |Q_tot - Q*| over every (start state, action sequence) of the two-state MDP."""
    q_star = twostate_q_star(tr.cfg.gamma)
    horizon = q_star.shape[0]
    episodes, visited = [], []
    for s0 in (0, 1):
        seed = next(k for k in range(64) if env_reset("twostate", k)[1].info["positions"][0] == s0)
        for acts in itertools.product((0, 1), repeat=horizon):
            env, r = env_reset("twostate", seed)
            obs, states, rewards, path = [], [], [], [s0]
            for a in acts:
                obs.append(r.obs)
                states.append(r.state)
                r = env.step(np.array([a]))
                rewards.append(r.reward)
                path.append(int(r.info["positions"][0]))
            episodes.append(
                Episode(
                    obs=np.array(obs),
                    actions=np.array(acts)[:, None],
                    rewards=np.array(rewards),
                    states=np.array(states),
                    noise=np.zeros((horizon, 1, tr.spec.role_dim)),
                    positions=np.array(path)[:, None],
                )
            )
            visited.append((path, acts))
    batch = EpisodeBatch.from_episodes(episodes)
    tape = Tape(record=False)
    p = tape.params(tr.params)
    fwd = forward_batch(tape, p, tr.spec, batch.obs, batch.actions, batch.noise, greedy=True)
    q = chosen_q_tot(tape, p, tr.spec, batch, fwd).data.reshape(horizon, batch.size)
    return max(
        abs(q[t, b] - q_star[t, path[t], acts[t]]) for b, (path, acts) in enumerate(visited) for t in range(horizon)
    )


def twostate_sanity(seed=0) -> tuple[float, int]:
    """(max Q error, number of updates) after a two-state training run."""
    tr = Trainer(twostate_config(seed))
    tr.run()
    return twostate_q_error(tr), tr.updates
