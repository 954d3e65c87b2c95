"""Pure numpy tree kernels.

Every table is laid out as ``(P, n, A)``: prompts x nonterminal nodes x
vocabulary.  Nodes are ordered so that a parent always precedes its
children, which lets each pass run level by level.  ``child[i, a]`` is the
node reached by action ``a`` from node ``i`` or ``-1`` when the transition
terminates (or ``a`` is not allowed at ``i``).
"""

import numpy as np

NEG_INF = -np.inf


def _levels(parent):
    """Node indices grouped by depth, root level first."""
    levels = [np.zeros(1, dtype=np.int64)]
    in_level = np.zeros(parent.shape[0], dtype=bool)
    while True:
        in_level[:] = False
        in_level[levels[-1]] = True
        nxt = np.flatnonzero((parent >= 0) & in_level[np.maximum(parent, 0)])
        if nxt.size == 0:
            return levels
        levels.append(nxt)


def _parents_from_child(child):
    n = child.shape[0]
    parent = np.full(n, -1, dtype=np.int64)
    parent_action = np.full(n, -1, dtype=np.int64)
    rows, cols = np.nonzero(child >= 0)
    parent[child[rows, cols]] = rows
    parent_action[child[rows, cols]] = cols
    return parent, parent_action


def _row_lse(x, allowed):
    """Max-subtracted log-sum-exp over allowed entries of the last axis."""
    masked = np.where(allowed, x, NEG_INF)
    m = masked.max(axis=-1, keepdims=True)
    s = np.exp(masked - m).sum(axis=-1)
    return m[..., 0] + np.log(s)


def soft_value(q, allowed, beta):
    allowed = allowed.astype(bool)
    return beta * _row_lse(q / beta, allowed)


def log_softmax(z, allowed, beta):
    allowed = allowed.astype(bool)
    scaled = z / beta
    lse = _row_lse(scaled, allowed)
    return np.where(allowed, scaled - lse[..., None], NEG_INF)


def soft_backup(reward, log_ref, child, allowed, beta):
    allowed = allowed.astype(bool)
    P, n, A = reward.shape
    parent, _ = _parents_from_child(child)
    q = np.full((P, n, A), NEG_INF)
    v = np.zeros((P, n))
    has_child = child >= 0
    safe_child = np.where(has_child, child, 0)
    for idx in reversed(_levels(parent)):
        cont = np.where(has_child[idx], v[:, safe_child[idx]], 0.0)
        qa = reward[:, idx] + beta * log_ref[:, idx] + cont
        q[:, idx] = np.where(allowed[idx], qa, NEG_INF)
        v[:, idx] = beta * _row_lse(q[:, idx] / beta, allowed[idx])
    return q, v


def bellman_invert(q, log_ref, child, allowed, beta):
    allowed = allowed.astype(bool)
    v = soft_value(q, allowed, beta)
    has_child = child >= 0
    cont = np.where(has_child, v[:, np.where(has_child, child, 0)], 0.0)
    r = q - beta * log_ref - cont
    return np.where(allowed, r, np.nan)


def path_sums(vals, parent, parent_action, eos):
    """Sum of ``vals`` along the path to each node's EOS-terminated response."""
    P, n, _ = vals.shape
    cum = np.zeros((P, n))
    for idx in _levels(parent)[1:]:
        cum[:, idx] = cum[:, parent[idx]] + vals[:, parent[idx], parent_action[idx]]
    return cum + vals[:, :, eos]


def subtree_scatter(g_seq, parent, parent_action, eos, n_actions):
    """Adjoint of :func:`path_sums`."""
    P, n = g_seq.shape
    out = np.zeros((P, n, n_actions))
    out[:, :, eos] = g_seq
    acc = g_seq.copy()
    for idx in reversed(_levels(parent)[1:]):
        np.add.at(acc, (slice(None), parent[idx]), acc[:, idx])
    nonroot = np.arange(1, n) if n > 1 else np.zeros(0, dtype=np.int64)
    out[:, parent[nonroot], parent_action[nonroot]] += acc[:, nonroot]
    return out
