"""Exact maximum-entropy RL on the token tree.

With no discounting and a finite tree, the KL-regularised Bellman
equations are solved exactly by one backward sweep from the leaves::

    Q(s, a) = r(s, a) + beta * log pi_ref(a|s) + V(s')     (V(terminal) = 0)
    V(s)    = beta * logsumexp_a Q(s, a) / beta
    pi*(a|s) = exp((Q(s, a) - V(s)) / beta)

The sweep is invertible (reward <-> Q), which is what the round-trip
helpers here exercise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

import numpy as np

from . import kernels
from .errors import InvalidPotential, InvalidState, MissingEntry, ZeroReferenceProbability
from .mdp import State, TokenMdp, Tokens

REWARD_SCHEMA = "tokdpo.reward/1"


def _state_key(mdp: TokenMdp, state) -> tuple[int, int]:
    if isinstance(state, State):
        prompt, generated = state.prompt, state.generated
    else:
        prompt, generated = state
    return mdp.prompt_index(prompt), mdp.tree.node(generated)


def _is_terminal(mdp: TokenMdp, generated: Sequence[int]) -> bool:
    return (len(generated) > 0 and generated[-1] == mdp.eos_id) or len(
        generated
    ) >= mdp.max_response_len


class RewardTable:
    """Reward for every reachable (nonterminal state, allowed action).

    ``values`` has shape ``(P, n, A)``; entries for disallowed actions are
    NaN and never read.
    """

    def __init__(self, mdp: TokenMdp, values):
        tree = mdp.tree
        values = np.array(values, dtype=np.float64)
        expected = (mdp.n_prompts, tree.n_nodes, mdp.vocab_size)
        if values.shape != expected:
            raise ValueError(f"reward table shape {values.shape}, expected {expected}")
        mask = np.broadcast_to(tree.allowed, values.shape)
        if not np.all(np.isfinite(values[mask])):
            raise MissingEntry("reward table has missing or non-finite entries")
        values[~mask] = np.nan
        values.setflags(write=False)
        self.mdp = mdp
        self.values = values

    @classmethod
    def zeros(cls, mdp: TokenMdp) -> RewardTable:
        return cls(mdp, np.zeros((mdp.n_prompts, mdp.tree.n_nodes, mdp.vocab_size)))

    @classmethod
    def random(cls, mdp: TokenMdp, rng: np.random.Generator, low=-2.0, high=2.0) -> RewardTable:
        shape = (mdp.n_prompts, mdp.tree.n_nodes, mdp.vocab_size)
        return cls(mdp, rng.uniform(low, high, size=shape))

    @classmethod
    def terminal(cls, mdp: TokenMdp, response_rewards) -> RewardTable:
        """Bandit placement: ``response_rewards[p, rank]`` on each EOS transition."""
        tree = mdp.tree
        vals = np.zeros((mdp.n_prompts, tree.n_nodes, mdp.vocab_size))
        vals[:, tree.response_nodes, mdp.eos_id] = np.asarray(response_rewards, dtype=np.float64)
        return cls(mdp, vals)

    @classmethod
    def from_entries(cls, mdp: TokenMdp, entries) -> RewardTable:
        """Build from ``(prompt_index, prefix, action, value)`` records."""
        tree = mdp.tree
        vals = np.full((mdp.n_prompts, tree.n_nodes, mdp.vocab_size), np.nan)
        for p, prefix, a, r in entries:
            vals[p, tree.node(prefix), a] = r
        return cls(mdp, vals)

    def __getitem__(self, key) -> float:
        state, action = key
        p, i = _state_key(self.mdp, state)
        if not self.mdp.tree.allowed[i, action]:
            raise MissingEntry(f"no reward entry for action {action} at {state}")
        return float(self.values[p, i, action])

    def __len__(self) -> int:
        return self.mdp.n_prompts * self.mdp.tree.n_pairs

    def entries(self) -> Iterator[tuple[int, Tokens, int, float]]:
        tree = self.mdp.tree
        for p in range(self.mdp.n_prompts):
            for i, prefix in enumerate(tree.prefixes):
                for a in np.flatnonzero(tree.allowed[i]):
                    yield p, prefix, int(a), float(self.values[p, i, a])

    def save(self, path) -> None:
        lines = [json.dumps({"schema": REWARD_SCHEMA})]
        for p, prefix, a, r in self.entries():
            lines.append(json.dumps({"prompt": p, "prefix": list(prefix), "action": a, "reward": r}))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, mdp: TokenMdp, path) -> RewardTable:
        entries = []
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if "schema" in rec:
                if rec["schema"] != REWARD_SCHEMA:
                    raise ValueError(f"unsupported reward schema {rec['schema']!r}")
                continue
            entries.append((rec["prompt"], tuple(rec["prefix"]), rec["action"], rec["reward"]))
        return cls.from_entries(mdp, entries)


class Potential:
    """State potential; terminal states are pinned to zero."""

    def __init__(self, mdp: TokenMdp, values):
        values = np.array(values, dtype=np.float64)
        if values.shape != (mdp.n_prompts, mdp.tree.n_nodes):
            raise ValueError(f"potential shape {values.shape} does not match the tree")
        self.mdp = mdp
        self.values = values

    @classmethod
    def from_mapping(cls, mdp: TokenMdp, mapping: Mapping[Any, float]) -> Potential:
        vals = np.zeros((mdp.n_prompts, mdp.tree.n_nodes))
        for state, phi in mapping.items():
            if isinstance(state, State):
                prompt, generated = state.prompt, state.generated
            else:
                prompt, generated = state
            if _is_terminal(mdp, generated):
                if phi != 0:
                    raise InvalidPotential(f"potential {phi} at terminal state {list(generated)}")
                continue
            vals[mdp.prompt_index(prompt), mdp.tree.node(generated)] = phi
        return cls(mdp, vals)

    @classmethod
    def random(cls, mdp: TokenMdp, rng: np.random.Generator, scale=1.0) -> Potential:
        return cls(mdp, rng.normal(0.0, scale, size=(mdp.n_prompts, mdp.tree.n_nodes)))

    def next_values(self) -> np.ndarray:
        """Phi(s') for every (s, a), zero where s' is terminal."""
        child = self.mdp.tree.child
        return np.where(child >= 0, self.values[:, np.maximum(child, 0)], 0.0)


def shape_reward(reward: RewardTable, phi: Potential) -> RewardTable:
    """r'(s, a) = r(s, a) + phi(s') - phi(s)."""
    shaped = reward.values + phi.next_values() - phi.values[:, :, None]
    return RewardTable(reward.mdp, np.where(np.isnan(reward.values), 0.0, shaped))


def reference_log_table(mdp: TokenMdp, ref) -> np.ndarray:
    """Log pi_ref over the whole tree, checked strictly positive."""
    if isinstance(ref, np.ndarray):
        log_ref = np.asarray(ref, dtype=np.float64)
    else:
        log_ref = ref.log_prob_table()
    allowed = np.broadcast_to(mdp.tree.allowed, log_ref.shape)
    if not np.all(np.isfinite(log_ref[allowed])):
        raise ZeroReferenceProbability(
            "reference policy assigns zero probability to an allowed action"
        )
    return log_ref


@dataclass(frozen=True)
class SoftSolution:
    mdp: TokenMdp
    q: np.ndarray
    v: np.ndarray
    log_pi: np.ndarray
    beta: float
    log_ref: np.ndarray
    ref: Any = None

    @property
    def pi_star(self) -> np.ndarray:
        return np.exp(self.log_pi)

    def value(self, state) -> float:
        generated = state.generated if isinstance(state, State) else state[1]
        if _is_terminal(self.mdp, generated):
            return 0.0
        p, i = _state_key(self.mdp, state)
        return float(self.v[p, i])

    def partition(self, prompt) -> float:
        """Z(x) = exp(V(s0) / beta)."""
        return float(np.exp(self.v[self.mdp.prompt_index(prompt), 0] / self.beta))

    def policy(self):
        """Tabular policy whose logits are exactly Q."""
        from .policy import TabularPolicy

        return TabularPolicy.from_logit_table(self.mdp, self.q, beta=self.beta)


def solve_soft(mdp: TokenMdp, reward: RewardTable, ref, beta: float) -> SoftSolution:
    """Exact soft-optimal Q, V and policy for ``reward`` under ``ref``."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    tree = mdp.tree
    log_ref = reference_log_table(mdp, ref)
    r = np.where(np.isnan(reward.values), 0.0, reward.values)
    lr = np.where(np.isfinite(log_ref), log_ref, 0.0)
    q, v = kernels.soft_backup(r, lr, tree.child, tree.allowed, beta)
    log_pi = np.where(tree.allowed, (q - v[:, :, None]) / beta, -np.inf)
    return SoftSolution(mdp, q, v, log_pi, float(beta), log_ref, None if isinstance(ref, np.ndarray) else ref)


def q_to_reward(mdp: TokenMdp, q, ref, beta: float) -> RewardTable:
    """Invert the Bellman backup: r = Q - beta*log pi_ref - V(s')."""
    tree = mdp.tree
    q = np.asarray(q, dtype=np.float64)
    allowed = np.broadcast_to(tree.allowed, q.shape)
    if not np.all(np.isfinite(q[allowed])):
        raise MissingEntry("Q table has missing or non-finite entries")
    log_ref = reference_log_table(mdp, ref)
    lr = np.where(np.isfinite(log_ref), log_ref, 0.0)
    r = kernels.bellman_invert(np.where(allowed, q, 0.0), lr, tree.child, tree.allowed, beta)
    return RewardTable(mdp, r)


def advantage_of(sol: SoftSolution) -> np.ndarray:
    """Optimal advantage ``Q(s, a) - beta*log pi_ref(a|s) - V(s)``.

    Equal to ``beta * log(pi*/pi_ref)`` and to ``r + V(s') - V(s)``.  The
    bare ``Q - V`` is ``beta * log pi*`` (it still carries the reference
    term folded into Q).  NaN on disallowed actions.
    """
    allowed = sol.mdp.tree.allowed
    lr = np.where(allowed, sol.log_ref, 0.0)
    adv = sol.q - sol.beta * lr - sol.v[:, :, None]
    return np.where(allowed, adv, np.nan)


def advantage_from_ratio(sol: SoftSolution) -> np.ndarray:
    """beta * log(pi*/pi_ref)."""
    allowed = sol.mdp.tree.allowed
    return np.where(allowed, sol.beta * (sol.log_pi - np.where(allowed, sol.log_ref, 0.0)), np.nan)


def advantage_from_reward(sol: SoftSolution, reward: RewardTable) -> np.ndarray:
    """r(s, a) + V(s') - V(s)."""
    child = sol.mdp.tree.child
    v_next = np.where(child >= 0, sol.v[:, np.maximum(child, 0)], 0.0)
    return reward.values + v_next - sol.v[:, :, None]
