"""Decoding: sampling, likelihood beam search, value-guided search, proxy tuning.

Beam scores are raw sums (no length normalisation).  Finished hypotheses
stay in the beam and compete with live ones.  Every ordering uses the key
``(-score, tokens)``, so exact score ties go to the lexicographically
smaller token sequence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import MissingEntry, ZeroReferenceProbability
from .mdp import State, TokenMdp, Trajectory
from .soft_rl import RewardTable, SoftSolution


@dataclass(frozen=True)
class Ranked:
    trajectory: Trajectory
    score: float

    @property
    def response(self):
        return self.trajectory.response


@dataclass
class Beam:
    """Bounded beam of ``(tokens, base, score, finished)`` entries."""

    width: int
    entries: list

    def admit(self, candidates) -> None:
        pool = sorted(candidates, key=lambda e: (-e[2], e[0]))
        self.entries = pool[: self.width]

    @property
    def live(self):
        return [e for e in self.entries if not e[3]]

    @property
    def finished(self):
        return [e for e in self.entries if e[3]]


# expand(prefixes) -> per prefix, a list of (action, delta_base, heuristic_of_next_state)
Expander = Callable[[list], list]


def _run_beam(mdp: TokenMdp, prompt, width: int, expand: Expander, root_heuristic: float) -> list[Ranked]:
    if width < 1:
        raise ValueError("beam width must be >= 1")
    prompt = tuple(prompt)
    mdp.prompt_index(prompt)
    beam = Beam(width, [((), 0.0, root_heuristic, False)])
    while beam.live:
        live = beam.live
        expansions = expand([e[0] for e in live])
        candidates = list(beam.finished)
        for (tokens, base, _, _), options in zip(live, expansions):
            for a, delta, h_next in options:
                nb = base + delta
                candidates.append((tokens + (a,), nb, nb + h_next, a == mdp.eos_id))
        beam.admit(candidates)
    return [Ranked(Trajectory(prompt, e[0]), e[2]) for e in beam.entries]


def _policy_rows(pi, prompt, prefixes):
    return pi.log_probs([(prompt, p) for p in prefixes])


def beam_search(pi, prompt, width: int, beta: float = 1.0) -> list[Ranked]:
    """Top-``width`` responses by cumulative ``beta * log pi``."""
    prompt = tuple(prompt)

    def expand(prefixes):
        rows = _policy_rows(pi, prompt, prefixes)
        return [
            [(int(a), beta * row[a], 0.0) for a in np.flatnonzero(np.isfinite(row))]
            for row in rows
        ]

    return _run_beam(pi.mdp, prompt, width, expand, 0.0)


def greedy_decode(pi, prompt) -> Trajectory:
    """Argmax token at every step; ties go to the smallest token id."""
    prompt = tuple(prompt)
    gen = ()
    while not gen or (gen[-1] != pi.mdp.eos_id and len(gen) < pi.mdp.max_response_len):
        row = pi.log_probs([(prompt, gen)])[0]
        gen = gen + (int(np.argmax(row)),)
    return Trajectory(prompt, gen)


def _value_lookup(mdp: TokenMdp, v, prompt) -> Callable:
    p = mdp.prompt_index(prompt)
    tree = mdp.tree
    if isinstance(v, SoftSolution):
        v = v.v
    if isinstance(v, Mapping):
        table = v

        def lookup(prefix):
            if prefix and (prefix[-1] == mdp.eos_id or len(prefix) >= mdp.max_response_len):
                return 0.0
            key = (tuple(prompt), tuple(prefix))
            if key in table:
                return float(table[key])
            state = State(tuple(prompt), tuple(prefix), False)
            if state in table:
                return float(table[state])
            raise MissingEntry(f"value table has no entry for prefix {list(prefix)}")

        return lookup
    arr = np.asarray(v, dtype=np.float64)
    if arr.shape != (mdp.n_prompts, tree.n_nodes):
        raise MissingEntry(f"value table shape {arr.shape} does not cover the tree")

    def lookup(prefix):
        if prefix and (prefix[-1] == mdp.eos_id or len(prefix) >= mdp.max_response_len):
            return 0.0
        val = arr[p, tree.node(prefix)]
        if not np.isfinite(val):
            raise MissingEntry(f"value table has no entry for prefix {list(prefix)}")
        return float(val)

    return lookup


def guided_search(reward: RewardTable, ref, v, prompt, width: int, beta: float) -> list[Ranked]:
    """Beam over sum_t [r + beta * log pi_ref] + V(next state).

    With the exact soft value this ranks exactly like :func:`beam_search`
    over the soft-optimal policy, shifted by ``V(s0)``.  ``v`` may be a
    :class:`SoftSolution`, a ``(P, n)`` array or a state -> value mapping.
    """
    mdp = reward.mdp
    prompt = tuple(prompt)
    p = mdp.prompt_index(prompt)
    tree = mdp.tree
    value = _value_lookup(mdp, v, prompt)

    def expand(prefixes):
        rows = _policy_rows(ref, prompt, prefixes)
        out = []
        for prefix, row in zip(prefixes, rows):
            node = tree.node(prefix)
            opts = []
            for a in np.flatnonzero(tree.allowed[node]):
                if not np.isfinite(row[a]):
                    raise ZeroReferenceProbability("reference assigns zero probability to an allowed action")
                delta = reward.values[p, node, a] + beta * row[a]
                opts.append((int(a), delta, value(prefix + (int(a),))))
            out.append(opts)
        return out

    return _run_beam(mdp, prompt, width, expand, value(()))


# -- sampling -----------------------------------------------------------------------


def sample_responses(pi, prompt, n: int, seed) -> list[Trajectory]:
    """``n`` ancestral samples advanced in lockstep; EOS is forced at T_max."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mdp = pi.mdp
    prompt = tuple(prompt)
    mdp.prompt_index(prompt)
    gens = [()] * n
    active = list(range(n))
    while active:
        rows = pi.log_probs([(prompt, gens[i]) for i in active])
        probs = np.exp(rows)
        cdf = np.cumsum(probs, axis=1)
        u = rng.random(len(active)) * cdf[:, -1]
        # first index whose cdf exceeds u; zero-probability tokens are never picked
        picks = np.minimum((cdf <= u[:, None]).sum(axis=1), mdp.vocab_size - 1)
        still = []
        for i, a in zip(active, picks):
            gens[i] = gens[i] + (int(a),)
            if a != mdp.eos_id and len(gens[i]) < mdp.max_response_len:
                still.append(i)
        active = still
    return [Trajectory(prompt, g) for g in gens]


def sample_response(pi, prompt, seed) -> Trajectory:
    return sample_responses(pi, prompt, 1, seed)[0]


# -- proxy tuning ---------------------------------------------------------------------


def _masked_normalise_log(x):
    m = np.max(x, axis=-1, keepdims=True)
    lse = m + np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True))
    return x - lse


class ComposedPolicy:
    """pi(a|s) proportional to pi_base * (pi_proxy / pi_ref)^beta."""

    kind = "composed"

    def __init__(self, base, proxy, ref, beta: float):
        if beta <= 0:
            raise ValueError("beta must be positive")
        self.base, self.proxy, self.ref = base, proxy, ref
        self.beta = float(beta)
        self.mdp = base.mdp

    def log_probs(self, states) -> np.ndarray:
        lb = self.base.log_probs(states)
        lp = self.proxy.log_probs(states)
        lr = self.ref.log_probs(states)
        allowed = np.isfinite(lb)
        if not np.all(np.isfinite(lr[allowed])):
            raise ZeroReferenceProbability("reference assigns zero probability to an allowed action")
        x = np.where(allowed, lb + self.beta * (lp - np.where(allowed, lr, 0.0)), -np.inf)
        return np.where(allowed, _masked_normalise_log(x), -np.inf)

    def probs_ratio_form(self, states) -> np.ndarray:
        """Same distribution computed in probability space."""
        pb = np.exp(self.base.log_probs(states))
        pp = np.exp(self.proxy.log_probs(states))
        pr = np.exp(self.ref.log_probs(states))
        if np.any((pr == 0) & (pb > 0)):
            raise ZeroReferenceProbability("reference assigns zero probability to an allowed action")
        w = np.where(pb > 0, pb * np.power(np.where(pb > 0, pp / np.where(pr > 0, pr, 1.0), 0.0), self.beta), 0.0)
        return w / w.sum(axis=1, keepdims=True)

    def log_prob_table(self) -> np.ndarray:
        from .mdp import all_states

        mdp = self.mdp
        rows = self.log_probs(all_states(mdp))
        return rows.reshape(mdp.n_prompts, mdp.tree.n_nodes, mdp.vocab_size)


def proxy_compose(base, proxy, ref, beta: float) -> ComposedPolicy:
    return ComposedPolicy(base, proxy, ref, beta)


def compose_with_advantage(base_log_rows, advantage_rows, beta: float) -> np.ndarray:
    """pi proportional to pi_base * exp(beta * A), A in nats (unit temperature)."""
    allowed = np.isfinite(base_log_rows)
    x = np.where(allowed, base_log_rows + beta * np.where(allowed, advantage_rows, 0.0), -np.inf)
    return np.where(allowed, np.exp(_masked_normalise_log(x)), 0.0)
