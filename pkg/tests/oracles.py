"""Brute-force reference computations shared by the tests.

Nothing here touches the tree kernels or the table layout: everything walks
token prefixes with ``step`` and plain ``math``.
"""

import itertools
import math

import numpy as np

from tokdpo.mdp import TokenMdp, initial_state, step
from tokdpo.policy import TabularPolicy
from tokdpo.soft_rl import RewardTable


def responses(mdp: TokenMdp):
    """All responses by explicit listing, sorted lexicographically."""
    normal = [t for t in range(mdp.vocab_size) if t != mdp.eos_id]
    out = []
    for n in range(mdp.max_response_len):
        for body in itertools.product(normal, repeat=n):
            out.append(tuple(body) + (mdp.eos_id,))
    return sorted(out)


def actions(mdp: TokenMdp, prefix):
    if len(prefix) == mdp.max_response_len - 1:
        return [mdp.eos_id]
    return list(range(mdp.vocab_size))


def soft_solve(mdp: TokenMdp, reward, log_ref, beta):
    """Recursive soft backup; ``reward``/``log_ref`` are f(prompt, prefix, a)."""
    V, Q = {}, {}

    def value(prompt, prefix):
        key = (prompt, prefix)
        if key in V:
            return V[key]
        qs = {}
        for a in actions(mdp, prefix):
            nxt = prefix + (a,)
            tail = 0.0 if a == mdp.eos_id or len(nxt) >= mdp.max_response_len else value(prompt, nxt)
            qs[a] = reward(prompt, prefix, a) + beta * log_ref(prompt, prefix, a) + tail
        m = max(qs.values())
        V[key] = m + beta * math.log(sum(math.exp((q - m) / beta) for q in qs.values()))
        for a, q in qs.items():
            Q[(prompt, prefix, a)] = q
        return V[key]

    for prompt in mdp.prompts:
        value(prompt, ())
    return Q, V


def step_return(mdp: TokenMdp, reward_table, prompt, response):
    """Accumulate rewards by stepping the MDP from the initial state."""
    s = initial_state(mdp, prompt)
    total = 0.0
    for a in response:
        total += reward_table[(s, a)]
        s = step(mdp, s, a)
    assert s.terminal
    return total


def seq_logprob(pi, prompt, response):
    """Product of per-step probabilities, one policy call per step."""
    total = 0.0
    for t, a in enumerate(response):
        row = pi.log_probs([(tuple(prompt), tuple(response[:t]))])[0]
        total += math.log(math.exp(row[a]))
    return total


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def central_diff(f, x, eps=1e-5, coords=None):
    x = np.array(x, dtype=np.float64)
    coords = range(x.size) if coords is None else coords
    out = {}
    for c in coords:
        xp, xm = x.copy(), x.copy()
        xp[c] += eps
        xm[c] -= eps
        out[c] = (f(xp) - f(xm)) / (2 * eps)
    return out


def random_logits(mdp: TokenMdp, rng, std=1.0):
    return rng.normal(0.0, std, size=(mdp.n_prompts, mdp.tree.n_nodes, mdp.vocab_size))


def make_instance(seed, vocab=3, max_len=3, prompts=((1,), (2,)), eos=0):
    rng = np.random.default_rng(seed)
    mdp = TokenMdp(vocab, eos, max_len, prompts)
    reward = RewardTable.random(mdp, rng)
    ref = TabularPolicy.from_logit_table(
        mdp, rng.normal(size=(mdp.n_prompts, mdp.tree.n_nodes, vocab))
    )
    return mdp, reward, ref
