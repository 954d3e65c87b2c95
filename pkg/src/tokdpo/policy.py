"""Differentiable policies over the token MDP.

A policy turns per-state logits into action probabilities with a
temperature-``beta`` softmax over the allowed actions.  Two kinds exist:

* :class:`TabularPolicy` keeps one logit per reachable (state, action), so
  it can represent any soft-optimal policy exactly (logits := Q).
* :class:`TinySeqPolicy` is a small windowed MLP over the last ``k`` tokens,
  which generalises to states it never saw in training.

Gradients are hand-written.  Losses hand back ``dL/dlog pi`` for a batch of
encoded states and the policy maps that to a flat parameter gradient.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .errors import CheckpointError, TrainingDiverged
from .mdp import TokenMdp, Trajectory, all_states, validate_trajectory
from .optim import make_optimizer

CHECKPOINT_SCHEMA = "tokdpo.checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Encoded:
    """Policy-specific encoding of a batch of states."""

    keys: np.ndarray
    allowed: np.ndarray

    def __len__(self):
        return self.allowed.shape[0]


def _masked_log_softmax(z, allowed, beta):
    scaled = np.where(allowed, z / beta, -np.inf)
    m = scaled.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(scaled - m).sum(axis=1, keepdims=True))
    return np.where(allowed, scaled - lse, -np.inf)


def logp_to_logit_grad(logp, allowed, g_logp, beta):
    """Backprop dL/dlog pi through the temperature softmax."""
    g = np.where(allowed, g_logp, 0.0)
    probs = np.where(allowed, np.exp(logp), 0.0)
    return (g - probs * g.sum(axis=-1, keepdims=True)) / beta


class Policy:
    kind = "abstract"

    def __init__(self, mdp: TokenMdp, params, beta: float = 1.0):
        if beta <= 0:
            raise ValueError("policy temperature must be positive")
        self.mdp = mdp
        self.params = np.ascontiguousarray(params, dtype=np.float64)
        self.beta = float(beta)

    # -- subclass surface -------------------------------------------------
    def encode(self, states: Sequence[tuple]) -> Encoded:
        raise NotImplementedError

    def logits(self, enc: Encoded) -> np.ndarray:
        raise NotImplementedError

    def logit_backward(self, enc: Encoded, g_logits) -> np.ndarray:
        raise NotImplementedError

    def hyper(self) -> dict:
        return {}

    # -- shared -----------------------------------------------------------
    def with_params(self, params) -> Policy:
        return type(self)(self.mdp, params=params, beta=self.beta, **self.hyper())

    def copy(self) -> Policy:
        return self.with_params(self.params.copy())

    def with_beta(self, beta: float) -> Policy:
        return type(self)(self.mdp, params=self.params.copy(), beta=beta, **self.hyper())

    def _allowed_for(self, states):
        allowed = np.zeros((len(states), self.mdp.vocab_size), dtype=bool)
        for j, (_, generated) in enumerate(states):
            allowed[j, list(self.mdp.allowed_actions(len(generated)))] = True
        return allowed

    def log_probs_enc(self, enc: Encoded) -> np.ndarray:
        return _masked_log_softmax(self.logits(enc), enc.allowed, self.beta)

    def log_probs(self, states: Sequence[tuple]) -> np.ndarray:
        """Rows of log pi(.|s) for (prompt, generated) states; -inf off-support."""
        return self.log_probs_enc(self.encode(states))

    def backward(self, enc: Encoded, g_logp, logp=None) -> np.ndarray:
        if logp is None:
            logp = self.log_probs_enc(enc)
        return self.logit_backward(enc, logp_to_logit_grad(logp, enc.allowed, g_logp, self.beta))

    def _table_encoding(self) -> Encoded:
        cache = self.__dict__.get("_table_enc")
        if cache is None:
            cache = self.encode(all_states(self.mdp))
            self.__dict__["_table_enc"] = cache
        return cache

    def log_prob_table(self) -> np.ndarray:
        """log pi over the whole tree, shape (P, n, A)."""
        P, n, A = self.mdp.n_prompts, self.mdp.tree.n_nodes, self.mdp.vocab_size
        return self.log_probs_enc(self._table_encoding()).reshape(P, n, A)

    def backward_table(self, g_table, logp_table=None) -> np.ndarray:
        A = self.mdp.vocab_size
        enc = self._table_encoding()
        logp = None if logp_table is None else logp_table.reshape(-1, A)
        return self.backward(enc, np.asarray(g_table).reshape(-1, A), logp)

    def content_hash(self) -> str:
        return _payload_hash(_header(self), self.params)


class TabularPolicy(Policy):
    """One logit per reachable (state, action); zero init is uniform."""

    kind = "tabular"

    def __init__(self, mdp: TokenMdp, params=None, beta: float = 1.0):
        tree = mdp.tree
        full_mask = np.broadcast_to(tree.allowed, (mdp.n_prompts, tree.n_nodes, mdp.vocab_size))
        self._flat = np.flatnonzero(full_mask)
        if params is None:
            params = np.zeros(self._flat.size)
        if np.shape(params) != (self._flat.size,):
            raise ValueError(f"tabular policy expects {self._flat.size} parameters")
        super().__init__(mdp, params, beta)

    @classmethod
    def from_logit_table(cls, mdp: TokenMdp, table, beta: float = 1.0) -> TabularPolicy:
        pol = cls(mdp, beta=beta)
        pol.params = np.ascontiguousarray(np.asarray(table, dtype=np.float64).ravel()[pol._flat])
        return pol

    def logit_table(self) -> np.ndarray:
        tree = self.mdp.tree
        full = np.zeros(self.mdp.n_prompts * tree.n_nodes * self.mdp.vocab_size)
        full[self._flat] = self.params
        return full.reshape(self.mdp.n_prompts, tree.n_nodes, self.mdp.vocab_size)

    def encode(self, states) -> Encoded:
        tree = self.mdp.tree
        n = tree.n_nodes
        rows = np.fromiter(
            (self.mdp.prompt_index(p) * n + tree.node(g) for p, g in states),
            dtype=np.int64,
            count=len(states),
        )
        return Encoded(rows, tree.allowed[rows % n])

    def logits(self, enc: Encoded) -> np.ndarray:
        return self.logit_table().reshape(-1, self.mdp.vocab_size)[enc.keys]

    def logit_backward(self, enc: Encoded, g_logits) -> np.ndarray:
        acc = np.zeros((self.mdp.n_prompts * self.mdp.tree.n_nodes, self.mdp.vocab_size))
        np.add.at(acc, enc.keys, g_logits)
        return acc.ravel()[self._flat]

    def log_prob_table(self) -> np.ndarray:
        return kernels.log_softmax(self.logit_table(), self.mdp.tree.allowed, self.beta)

    def backward_table(self, g_table, logp_table=None) -> np.ndarray:
        if logp_table is None:
            logp_table = self.log_prob_table()
        g_logits = logp_to_logit_grad(logp_table, self.mdp.tree.allowed, g_table, self.beta)
        return g_logits.ravel()[self._flat]


class TinySeqPolicy(Policy):
    """Embedding -> last-k window -> tanh hidden layer -> vocab logits."""

    kind = "tiny-seq"

    def __init__(
        self,
        mdp: TokenMdp,
        params=None,
        beta: float = 1.0,
        d: int = 16,
        k: int = 8,
        hidden: int = 32,
        seed: int = 0,
        init_std: float = 0.02,
    ):
        self.d, self.k, self.hidden = int(d), int(k), int(hidden)
        self.seed, self.init_std = int(seed), float(init_std)
        A = mdp.vocab_size
        self._shapes = {
            "emb": (A + 1, self.d),  # last row is the left-padding token
            "w1": (self.hidden, self.k * self.d),
            "b1": (self.hidden,),
            "w2": (A, self.hidden),
            "b2": (A,),
        }
        size = sum(int(np.prod(s)) for s in self._shapes.values())
        if params is None:
            rng = np.random.default_rng(self.seed)
            params = rng.normal(0.0, self.init_std, size=size)
        if np.shape(params) != (size,):
            raise ValueError(f"tiny-seq policy expects {size} parameters")
        super().__init__(mdp, params, beta)

    def hyper(self) -> dict:
        return {
            "d": self.d,
            "k": self.k,
            "hidden": self.hidden,
            "seed": self.seed,
            "init_std": self.init_std,
        }

    def _views(self, flat):
        out, off = {}, 0
        for name, shape in self._shapes.items():
            size = int(np.prod(shape))
            out[name] = flat[off : off + size].reshape(shape)
            off += size
        return out

    def encode(self, states) -> Encoded:
        pad = self.mdp.vocab_size
        win = np.full((len(states), self.k), pad, dtype=np.int64)
        for j, (prompt, generated) in enumerate(states):
            ctx = (tuple(prompt) + tuple(generated))[-self.k :]
            if ctx:
                win[j, self.k - len(ctx) :] = ctx
        return Encoded(win, self._allowed_for(states))

    def _forward(self, win):
        w = self._views(self.params)
        x = w["emb"][win].reshape(win.shape[0], -1)
        h = np.tanh(x @ w["w1"].T + w["b1"])
        z = h @ w["w2"].T + w["b2"]
        return x, h, z

    def logits(self, enc: Encoded) -> np.ndarray:
        return self._forward(enc.keys)[2]

    def logit_backward(self, enc: Encoded, g_logits) -> np.ndarray:
        w = self._views(self.params)
        x, h, _ = self._forward(enc.keys)
        grad = np.zeros_like(self.params)
        g = self._views(grad)
        g["w2"][...] = g_logits.T @ h
        g["b2"][...] = g_logits.sum(axis=0)
        dpre = (g_logits @ w["w2"]) * (1.0 - h * h)
        g["w1"][...] = dpre.T @ x
        g["b1"][...] = dpre.sum(axis=0)
        dx = (dpre @ w["w1"]).reshape(enc.keys.shape[0], self.k, self.d)
        np.add.at(g["emb"], enc.keys, dx)
        return grad


POLICY_KINDS = {TabularPolicy.kind: TabularPolicy, TinySeqPolicy.kind: TinySeqPolicy}


def make_policy(mdp: TokenMdp, kind: str = "tabular", beta: float = 1.0, **hyper) -> Policy:
    try:
        cls = POLICY_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown policy kind {kind!r}") from None
    return cls(mdp, beta=beta, **hyper)


# -- trajectory batches ------------------------------------------------------


@dataclass
class TokenBatch:
    """Trajectories flattened to one row per generated token."""

    states: list
    actions: np.ndarray
    seq_ids: np.ndarray
    n_seqs: int

    @classmethod
    def from_trajectories(cls, trajs: Sequence[Trajectory]) -> TokenBatch:
        states, actions, seq_ids = [], [], []
        for i, t in enumerate(trajs):
            states.extend(t.states())
            actions.extend(t.response)
            seq_ids.extend([i] * len(t.response))
        return cls(
            states,
            np.asarray(actions, dtype=np.int64),
            np.asarray(seq_ids, dtype=np.int64),
            len(trajs),
        )

    def token_logps(self, logp_rows) -> np.ndarray:
        return logp_rows[np.arange(len(self.actions)), self.actions]

    def seq_sums(self, per_token) -> np.ndarray:
        return np.bincount(self.seq_ids, weights=per_token, minlength=self.n_seqs)

    def scatter(self, g_tokens, n_actions) -> np.ndarray:
        """dL/dlog pi rows from per-token gradients."""
        g = np.zeros((len(self.actions), n_actions))
        g[np.arange(len(self.actions)), self.actions] = g_tokens
        return g


def logprob(pi: Policy, traj: Trajectory, beta: float | None = None):
    """(total, per-token) log-probabilities of ``traj`` under ``pi``."""
    validate_trajectory(pi.mdp, traj)
    if beta is not None and beta != pi.beta:
        pi = pi.with_beta(beta)
    rows = pi.log_probs(traj.states())
    per_token = rows[np.arange(len(traj.response)), list(traj.response)]
    return float(per_token.sum()), [float(x) for x in per_token]


def sequence_logprobs(pi: Policy, trajs: Sequence[Trajectory]) -> np.ndarray:
    batch = TokenBatch.from_trajectories(trajs)
    return batch.seq_sums(batch.token_logps(pi.log_probs(batch.states)))


# -- supervised fine-tuning ------------------------------------------------------


@dataclass
class SftConfig:
    optimizer: str = "momentum"
    lr: float | None = None  # None: 1e-2 tabular, 1e-3 tiny-seq
    momentum: float = 0.9
    epochs: int = 200
    batch_size: int | None = None  # None: full batch
    seed: int = 0


def default_lr(pi: Policy) -> float:
    return 1e-2 if pi.kind == "tabular" else 1e-3


def sft_loss_and_grad(pi: Policy, trajs: Sequence[Trajectory], batch: TokenBatch | None = None, enc=None):
    """Negative mean sequence log-likelihood and its gradient."""
    batch = batch or TokenBatch.from_trajectories(trajs)
    enc = enc or pi.encode(batch.states)
    logp = pi.log_probs_enc(enc)
    loss = -batch.seq_sums(batch.token_logps(logp)).mean()
    g_tok = np.full(len(batch.actions), -1.0 / batch.n_seqs)
    grad = pi.backward(enc, batch.scatter(g_tok, pi.mdp.vocab_size), logp)
    return float(loss), grad


def sft_train(pi: Policy, responses: Sequence[Trajectory], config: SftConfig | None = None):
    """Maximum-likelihood fine-tuning; returns (trained policy, per-epoch losses).

    Losses are full-corpus values measured before each epoch's updates, plus
    the final value.
    """
    config = config or SftConfig()
    if not responses:
        raise ValueError("SFT corpus is empty")
    for t in responses:
        validate_trajectory(pi.mdp, t)
    pi = pi.copy()
    opt = make_optimizer(config.optimizer, config.lr or default_lr(pi), config.momentum)
    rng = np.random.default_rng(config.seed)
    full = TokenBatch.from_trajectories(responses)
    full_enc = pi.encode(full.states)
    bs = config.batch_size or len(responses)
    chunks = None
    if bs >= len(responses):
        chunks = [(responses, full, full_enc)]

    losses, last_good = [], None
    for epoch in range(config.epochs + 1):
        loss, grad = sft_loss_and_grad(pi, responses, full, full_enc)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingDiverged(
                f"SFT loss became non-finite at epoch {epoch} (last loss "
                f"{losses[-1] if losses else float('nan')}); lower the step size",
                last_good=last_good,
                step=epoch,
            )
        losses.append(loss)
        last_good = pi.params.copy()
        if epoch == config.epochs:
            break
        if chunks is not None:
            pi.params = opt.step(pi.params, grad)
            continue
        order = rng.permutation(len(responses))
        for start in range(0, len(responses), bs):
            sub = [responses[i] for i in order[start : start + bs]]
            _, g = sft_loss_and_grad(pi, sub)
            pi.params = opt.step(pi.params, g)
    return pi, losses


# -- gradient audit -----------------------------------------------------------------


def grad_check(
    pi: Policy,
    loss: str,
    batch,
    eps: float = 1e-5,
    *,
    ref: Policy | None = None,
    beta: float = 1.0,
    n_coords: int = 100,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Tabular policies are checked on every coordinate; other kinds on
    ``n_coords`` seeded coordinates.  The relative error uses the
    denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError("eps must be in (0, 1e-3]")
    if loss == "sft":
        def f(p):
            return sft_loss_and_grad(pi.with_params(p), batch)
    elif loss == "dpo":
        from .dpo import dpo_loss_and_grad

        if ref is None:
            raise ValueError("the dpo loss needs a reference policy")

        def f(p):
            return dpo_loss_and_grad(pi.with_params(p), ref, batch, beta)
    else:
        raise ValueError(f"unknown loss {loss!r}")

    theta = pi.params
    _, analytic = f(theta)
    if pi.kind == "tabular" or n_coords >= theta.size:
        coords = np.arange(theta.size)
    else:
        coords = np.sort(np.random.default_rng(seed).choice(theta.size, n_coords, replace=False))
    worst = 0.0
    for c in coords:
        up, down = theta.copy(), theta.copy()
        up[c] += eps
        down[c] -= eps
        numeric = (f(up)[0] - f(down)[0]) / (2 * eps)
        denom = max(abs(analytic[c]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[c] - numeric) / denom)
    return worst


# -- checkpoints --------------------------------------------------------------------


def _header(pi: Policy) -> dict:
    return {
        "schema": CHECKPOINT_SCHEMA,
        "version": CHECKPOINT_VERSION,
        "kind": pi.kind,
        "hyper": pi.hyper(),
        "beta": pi.beta,
        "task": pi.mdp.to_dict(),
        "n_params": int(pi.params.size),
    }


def _payload_hash(header: dict, params: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(header, sort_keys=True).encode())
    h.update(np.ascontiguousarray(params, dtype="<f8").tobytes())
    return h.hexdigest()


def save_checkpoint(pi: Policy, path) -> str:
    """Write ``pi`` as JSON with base64 float64 parameters; returns the hash."""
    header = _header(pi)
    digest = _payload_hash(header, pi.params)
    doc = dict(header)
    doc["params"] = base64.b64encode(np.ascontiguousarray(pi.params, dtype="<f8").tobytes()).decode()
    doc["sha256"] = digest
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")
    return digest


def load_checkpoint(path, mdp: TokenMdp | None = None) -> Policy:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"not a policy checkpoint: schema {doc.get('schema')!r}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported version {doc.get('version')!r}")
    try:
        params = np.frombuffer(base64.b64decode(doc["params"], validate=True), dtype="<f8")
    except (ValueError, TypeError) as e:
        raise CheckpointError(f"hash mismatch: undecodable payload ({e})") from e
    header = {k: doc[k] for k in ("schema", "version", "kind", "hyper", "beta", "task", "n_params")}
    if _payload_hash(header, params) != doc.get("sha256"):
        raise CheckpointError("hash mismatch: checkpoint payload was modified")
    task = TokenMdp.from_dict(doc["task"])
    if mdp is not None and mdp != task:
        raise CheckpointError("checkpoint was trained on a different task")
    cls = POLICY_KINDS.get(doc["kind"])
    if cls is None:
        raise CheckpointError(f"unknown policy kind {doc['kind']!r}")
    return cls(mdp or task, params=params.astype(np.float64), beta=doc["beta"], **doc["hyper"])
