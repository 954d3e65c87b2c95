"""Bradley-Terry preferences over trajectories.

Two sources of preference probabilities are compared throughout:

* reward-based: sigma(sum r(win) - sum r(loss))
* policy-based: sigma(sum beta*log(pi/pi_ref)(win) - same for loss)

At the soft optimum for a reward the two coincide, since the value of the
shared initial state cancels from the difference.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .errors import ConvergenceError, MissingEntry, ZeroReferenceProbability
from .mdp import (
    PreferencePair,
    TokenMdp,
    Trajectory,
    check_same_prompt,
    validate_pair,
    validate_trajectory,
)
from .soft_rl import RewardTable, reference_log_table

BANDIT_SCHEMA = "tokdpo.bandit/1"


def log_sigmoid(x):
    """log sigma(x) = -softplus(-x), overflow-free."""
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def sigmoid(x):
    return np.exp(log_sigmoid(x))


def traj_return(reward: RewardTable, tau: Trajectory) -> float:
    mdp = reward.mdp
    validate_trajectory(mdp, tau)
    p = mdp.prompt_index(tau.prompt)
    total = 0.0
    for node, a in mdp.tree.walk(tau.response):
        r = reward.values[p, node, a]
        if np.isnan(r):
            raise MissingEntry(f"no reward for action {a} at node {node}")
        total += r
    return float(total)


def bt_preference(reward: RewardTable, tw: Trajectory, tl: Trajectory) -> float:
    check_same_prompt(tw, tl)
    return float(sigmoid(traj_return(reward, tw) - traj_return(reward, tl)))


def implicit_return(pi, ref, beta: float, tau: Trajectory) -> float:
    """beta * sum_t log(pi/pi_ref) along ``tau``."""
    from .policy import logprob

    lp, _ = logprob(pi, tau)
    lr, lr_tok = logprob(ref, tau)
    if not np.all(np.isfinite(lr_tok)):
        raise ZeroReferenceProbability("reference assigns zero probability to a trajectory token")
    return beta * (lp - lr)


def policy_preference(pi, ref, beta: float, tw: Trajectory, tl: Trajectory) -> float:
    check_same_prompt(tw, tl)
    return float(sigmoid(implicit_return(pi, ref, beta, tw) - implicit_return(pi, ref, beta, tl)))


# -- whole-distribution forms (enumerable instances) --------------------------------


def _by_rank(mdp: TokenMdp, node_values: np.ndarray) -> np.ndarray:
    return node_values[:, mdp.tree.response_nodes]


def response_returns(reward: RewardTable) -> np.ndarray:
    """Trajectory returns, shape (P, R), responses in lexicographic order."""
    mdp = reward.mdp
    tree = mdp.tree
    vals = np.where(np.isnan(reward.values), 0.0, reward.values)
    return _by_rank(mdp, kernels.path_sums(vals, tree.parent, tree.parent_action, mdp.eos_id))


def response_logprobs(mdp: TokenMdp, log_table: np.ndarray) -> np.ndarray:
    tree = mdp.tree
    vals = np.where(tree.allowed, log_table, 0.0)
    return _by_rank(mdp, kernels.path_sums(vals, tree.parent, tree.parent_action, mdp.eos_id))


def response_logratios(pi, ref, beta: float) -> np.ndarray:
    """beta * log(pi(y|x)/pi_ref(y|x)) for every response, shape (P, R)."""
    mdp = pi.mdp
    log_ref = reference_log_table(mdp, ref)
    log_pi = pi if isinstance(pi, np.ndarray) else pi.log_prob_table()
    diff = np.where(mdp.tree.allowed, log_pi - np.where(mdp.tree.allowed, log_ref, 0.0), 0.0)
    return beta * response_logprobs(mdp, diff)


@dataclass
class PreferenceDistribution:
    """p(y_i > y_j | x_p) for every prompt and ordered response pair."""

    mdp: TokenMdp
    probs: np.ndarray  # (P, R, R); diagonal fixed at 1/2

    @classmethod
    def from_scores(cls, mdp: TokenMdp, scores) -> PreferenceDistribution:
        scores = np.asarray(scores, dtype=np.float64)
        return cls(mdp, sigmoid(scores[:, :, None] - scores[:, None, :]))

    @property
    def responses(self):
        return self.mdp.tree.responses()

    def pairs_mask(self) -> np.ndarray:
        R = self.probs.shape[1]
        return ~np.eye(R, dtype=bool)

    def n_pairs(self) -> int:
        """Unordered pairs across all prompts."""
        P, R, _ = self.probs.shape
        return P * R * (R - 1) // 2


def reward_preference_distribution(reward: RewardTable) -> PreferenceDistribution:
    return PreferenceDistribution.from_scores(reward.mdp, response_returns(reward))


def policy_preference_distribution(pi, ref, beta: float) -> PreferenceDistribution:
    return PreferenceDistribution.from_scores(pi.mdp, response_logratios(pi, ref, beta))


def tv_distance(a: PreferenceDistribution, b: PreferenceDistribution) -> float:
    """Largest per-pair total-variation distance |p_a - p_b|."""
    mask = a.pairs_mask()
    if not mask.any():
        return 0.0
    return float(np.abs(a.probs - b.probs)[:, mask].max())


# -- data generation ---------------------------------------------------------------------


def sample_preferences(
    mdp: TokenMdp,
    reward: RewardTable,
    ref,
    n: int,
    seed,
    sampler: str = "ref",
) -> list[PreferencePair]:
    """Draw ``n`` labelled pairs; both responses come from ``ref`` (or uniform).

    The winner is drawn from the Bradley-Terry probability of the returns.
    ``seed`` is an int or a ``numpy.random.Generator``.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tree = mdp.tree
    R = tree.n_nodes
    if R < 2:
        raise ValueError("need at least two responses per prompt to form pairs")
    if sampler == "ref":
        probs = np.exp(response_logprobs(mdp, reference_log_table(mdp, ref)))
    elif sampler == "uniform":
        probs = np.full((mdp.n_prompts, R), 1.0 / R)
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    returns = response_returns(reward)
    responses = tree.responses()
    out = []
    for _ in range(n):
        p = int(rng.integers(mdp.n_prompts))
        w = probs[p] / probs[p].sum()
        i = int(rng.choice(R, p=w))
        w2 = w.copy()
        w2[i] = 0.0
        j = int(rng.choice(R, p=w2 / w2.sum()))
        if rng.random() < sigmoid(returns[p, i] - returns[p, j]):
            win, lose = i, j
        else:
            win, lose = j, i
        out.append(PreferencePair(mdp.prompts[p], responses[win], responses[lose], "sampled"))
    return out


# -- bandit reward model (classical RLHF comparator) -----------------------------------


@dataclass
class BanditFitConfig:
    tol: float = 1e-9
    max_iter: int = 200_000


@dataclass
class BanditRewardModel:
    mdp: TokenMdp
    values: np.ndarray  # (P, R) by response rank, mean-centred per prompt
    l2_strength: float
    iterations: int = 0
    metadata: dict = field(default_factory=lambda: {"centering": "per-prompt mean zero"})

    def reward(self, prompt, response) -> float:
        p = self.mdp.prompt_index(prompt)
        node = self.mdp.tree.response_node(response)
        return float(self.values[p, self.mdp.tree.node_rank[node]])

    def to_reward_table(self) -> RewardTable:
        """Place r(x, y) on the EOS transition of y; zero elsewhere."""
        return RewardTable.terminal(self.mdp, self.values)

    def to_dict(self) -> dict:
        return {
            "schema": BANDIT_SCHEMA,
            "l2_strength": self.l2_strength,
            "iterations": self.iterations,
            "metadata": self.metadata,
            "responses": [list(r) for r in self.mdp.tree.responses()],
            "values": self.values.tolist(),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, mdp: TokenMdp, path) -> BanditRewardModel:
        d = json.loads(Path(path).read_text())
        if d.get("schema") != BANDIT_SCHEMA:
            raise ValueError(f"unsupported bandit model schema {d.get('schema')!r}")
        return cls(mdp, np.asarray(d["values"]), d["l2_strength"], d["iterations"], d["metadata"])


def win_weights(mdp: TokenMdp, data) -> np.ndarray:
    """W[p, i, j]: normalised weight of 'y_i beats y_j' observations."""
    tree = mdp.tree
    R = tree.n_nodes
    if isinstance(data, PreferenceDistribution):
        W = np.where(data.pairs_mask(), data.probs, 0.0)
        return W / max(data.n_pairs(), 1)
    W = np.zeros((mdp.n_prompts, R, R))
    for pair in data:
        validate_pair(mdp, pair)
        p = mdp.prompt_index(pair.prompt)
        i = tree.node_rank[tree.response_node(pair.chosen)]
        j = tree.node_rank[tree.response_node(pair.rejected)]
        W[p, i, j] += 1.0
    if len(data) == 0:
        raise ValueError("empty preference dataset")
    return W / len(data)


def fit_bandit_reward(
    mdp: TokenMdp,
    dataset,
    l2_strength: float = 0.0,
    config: BanditFitConfig | None = None,
) -> BanditRewardModel:
    """Penalised logistic maximum likelihood, one reward per response.

    Plain gradient descent with step 1/L, where L bounds the Hessian of the
    Bradley-Terry log-likelihood.  ``dataset`` is a list of pairs or an
    exact :class:`PreferenceDistribution` (every pair weighted by its
    probability).
    """
    config = config or BanditFitConfig()
    if l2_strength < 0:
        raise ValueError("l2_strength must be non-negative")
    W = win_weights(mdp, dataset)
    degree = (W + W.transpose(0, 2, 1)).sum(axis=2).max()
    step = 1.0 / (0.5 * degree + l2_strength + 1e-12)
    r = np.zeros(W.shape[:2])
    for it in range(1, config.max_iter + 1):
        diff = r[:, :, None] - r[:, None, :]
        s = sigmoid(-diff)
        grad = -(W * s).sum(axis=2) + (W * s).sum(axis=1) + l2_strength * r
        if np.sqrt((grad * grad).sum()) < config.tol:
            break
        r = r - step * grad
    else:
        raise ConvergenceError(
            f"bandit reward fit did not reach gradient norm {config.tol} in {config.max_iter} iterations"
        )
    r = r - r.mean(axis=1, keepdims=True)
    return BanditRewardModel(mdp, r, float(l2_strength), it)
