"""Plain QMIX TD loss written directly in numpy, independent of the package."""
import numpy as np


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def _mlp2(p, pre, x):
    h = np.maximum(x @ p[f"{pre}/fc1/W"] + p[f"{pre}/fc1/b"], 0.0)
    return h @ p[f"{pre}/fc2/W"] + p[f"{pre}/fc2/b"]


def reference_qmix_loss(p, target, spec, batch, gamma):
    """Step-by-step loop over episodes and agents, written without the package."""

    def utilities(q, b):
        t_len, n = batch.actions.shape[1:]
        h = np.zeros((n, spec.hidden_dim))
        out = []
        for t in range(t_len):
            last = np.zeros((n, spec.n_actions))
            if t > 0:
                last[np.arange(n), batch.actions[b, t - 1]] = 1.0
            x = np.concatenate([batch.obs[b, t], last, np.eye(n)], axis=1)
            f = np.maximum(x @ q["utility/fc1/W"] + q["utility/fc1/b"], 0.0)
            g = "utility/gru"
            r = _sig(f @ q[f"{g}/W_r"] + h @ q[f"{g}/U_r"] + q[f"{g}/b_r"])
            z = _sig(f @ q[f"{g}/W_z"] + h @ q[f"{g}/U_z"] + q[f"{g}/b_z"])
            c = np.tanh(f @ q[f"{g}/W_h"] + (r * h) @ q[f"{g}/U_h"] + q[f"{g}/b_h"])
            h = (1 - z) * h + z * c
            out.append(h @ q["utility/head/W"] + q["utility/head/b"])
        return np.array(out)

    def mixer(q, qs, s):
        n = qs.size
        w1 = np.abs(_mlp2(q, "mixer/hyper_w1", s)).reshape(n, -1)
        b1 = s @ q["mixer/hyper_b1/W"] + q["mixer/hyper_b1/b"]
        w2 = np.abs(_mlp2(q, "mixer/hyper_w2", s)).reshape(-1, 1)
        b2 = _mlp2(q, "mixer/hyper_b2", s)
        return (np.maximum(qs @ w1 + b1, 0.0) @ w2 + b2)[0]

    errs = []
    for b in range(batch.size):
        length = int(batch.mask[b].sum())
        q_on, q_tg = utilities(p, b), utilities(target, b)
        for t in range(length):
            chosen = q_on[t][np.arange(spec.n_agents), batch.actions[b, t]]
            y = batch.rewards[b, t]
            if t + 1 < length:
                y += gamma * mixer(target, q_tg[t + 1].max(axis=1), batch.states[b, t + 1])
            errs.append((mixer(p, chosen, batch.states[b, t]) - y) ** 2)
    return float(np.mean(errs))
