"""Token-level DPO.

The loss is ``-log sigma(margin)`` where ``margin`` is the difference of
summed per-token ``beta * log(pi/pi_ref)`` between chosen and rejected
responses.  Two training modes are supported:

``sampled``
    minibatches of labelled :class:`~tokdpo.mdp.PreferencePair`.
``exact``
    the expected loss over every response pair weighted by a known
    :class:`~tokdpo.preference.PreferenceDistribution`; noise-free, so it
    isolates optimisation from sampling error.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .errors import DegeneratePair, TrainingDiverged, ZeroReferenceProbability
from .mdp import PreferencePair, Trajectory, validate_pair, validate_trajectory
from .optim import make_optimizer
from .policy import Policy, TokenBatch, _masked_log_softmax, default_lr, logprob, save_checkpoint
from .preference import (
    PreferenceDistribution,
    log_sigmoid,
    response_logprobs,
    sigmoid,
)
from .soft_rl import reference_log_table

DIAG_COLUMNS = [
    "step",
    "loss",
    "chosen_ir",
    "rejected_ir",
    "margin",
    "expected_logratio",
    "running_chosen_ir",
    "running_rejected_ir",
    "running_margin",
]


@dataclass
class DpoConfig:
    beta: float = 0.1
    optimizer: str = "adam"
    lr: float | None = None
    momentum: float = 0.9
    steps: int = 500
    batch_size: int | None = None
    seed: int = 0
    mode: str = "sampled"  # or "exact"
    grad_tol: float = 0.0  # stop early once the full-batch gradient norm drops below
    checkpoint_every: int = 0
    diag_max_states: int = 50_000

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.mode not in ("sampled", "exact"):
            raise ValueError(f"unknown DPO mode {self.mode!r}")


class PairBatch:
    """Preference pairs flattened for repeated loss evaluation.

    Reference log-probabilities are computed once, at construction.
    """

    def __init__(self, pairs: Sequence[PreferencePair], ref: Policy):
        if len(pairs) == 0:
            raise ValueError("empty preference batch")
        for p in pairs:
            validate_pair(ref.mdp, p)
        trajs = []
        for p in pairs:
            trajs.append(p.winner)
            trajs.append(p.loser)
        self.pairs = list(pairs)
        self.tokens = TokenBatch.from_trajectories(trajs)
        ref_tok = self.tokens.token_logps(ref.log_probs(self.tokens.states))
        if not np.all(np.isfinite(ref_tok)):
            raise ZeroReferenceProbability("reference assigns zero probability to a batch token")
        self.ref_seq = self.tokens.seq_sums(ref_tok)
        self._build_margin_rows()
        self._enc = {}

    def _build_margin_rows(self):
        # The margin only depends on tokens after the shared prefix, and at the
        # first differing state the normaliser cancels.  Rows: suffix tokens of
        # both responses (signed), then one divergence row per pair.
        states, actions, signs, pair_ids = [], [], [], []
        div_states, div_w, div_l = [], [], []
        for i, p in enumerate(self.pairs):
            w, l = p.winner, p.loser
            k = 0
            while w.response[k] == l.response[k]:
                k += 1
            for traj, sign in ((w, 1.0), (l, -1.0)):
                st = traj.states()
                for t in range(k + 1, len(traj.response)):
                    states.append(st[t])
                    actions.append(traj.response[t])
                    signs.append(sign)
                    pair_ids.append(i)
            div_states.append(w.states()[k])
            div_w.append(w.response[k])
            div_l.append(l.response[k])
        self.margin_states = states + div_states
        self.n_suffix = len(states)
        self.suffix_actions = np.asarray(actions, dtype=np.int64)
        self.suffix_signs = np.asarray(signs)
        self.suffix_pairs = np.asarray(pair_ids, dtype=np.int64)
        self.div_w = np.asarray(div_w, dtype=np.int64)
        self.div_l = np.asarray(div_l, dtype=np.int64)
        self.ref_margin = self.ref_seq[0::2] - self.ref_seq[1::2]

    def __len__(self):
        return len(self.pairs)

    def _cached(self, pi: Policy, which: str, states):
        key = (which, pi.kind, tuple(sorted(pi.hyper().items())))
        if key not in self._enc:
            self._enc[key] = pi.encode(states)
        return self._enc[key]

    def encoding(self, pi: Policy):
        return self._cached(pi, "tokens", self.tokens.states)

    def margin_encoding(self, pi: Policy):
        return self._cached(pi, "margin", self.margin_states)


def _pair_terms(pi: Policy, pb: PairBatch, beta: float):
    enc = pb.encoding(pi)
    logp = pi.log_probs_enc(enc)
    seq = pb.tokens.seq_sums(pb.tokens.token_logps(logp))
    ir = beta * (seq - pb.ref_seq)
    return enc, logp, ir[0::2], ir[1::2]


def dpo_loss_and_grad(pi: Policy, ref: Policy, batch, beta: float):
    """Mean ``-log sigma(margin)`` over the batch and its parameter gradient."""
    pb = batch if isinstance(batch, PairBatch) else PairBatch(batch, ref)
    enc = pb.margin_encoding(pi)
    z = pi.logits(enc)
    logp = _masked_log_softmax(z, enc.allowed, pi.beta)
    n, k = len(pb), pb.n_suffix
    rows = np.arange(k)
    suffix = np.bincount(pb.suffix_pairs, weights=pb.suffix_signs * logp[rows, pb.suffix_actions], minlength=n)
    div = z[k + np.arange(n)]
    split = (div[np.arange(n), pb.div_w] - div[np.arange(n), pb.div_l]) / pi.beta
    margin = beta * (suffix + split - pb.ref_margin)
    loss = -log_sigmoid(margin).mean()
    dm = beta * -sigmoid(-margin) / n
    g = np.zeros_like(logp)
    g[rows, pb.suffix_actions] = pb.suffix_signs * dm[pb.suffix_pairs]
    # +c and -c in one row sum to exactly zero, so the softmax backward
    # leaves the divergence rows as plain logit gradients
    g[k + np.arange(n), pb.div_w] = dm
    g[k + np.arange(n), pb.div_l] = -dm
    return float(loss), pi.backward(enc, g, logp)


def bandit_dpo_loss(pi: Policy, ref: Policy, pairs: Sequence[PreferencePair], beta: float) -> float:
    """Same loss from whole-sequence log-probabilities (enumerable tasks)."""
    mdp = pi.mdp
    tree = mdp.tree
    seq_pi = response_logprobs(mdp, pi.log_prob_table())
    seq_ref = response_logprobs(mdp, reference_log_table(mdp, ref))
    total = 0.0
    for pair in pairs:
        p = mdp.prompt_index(pair.prompt)
        w = tree.node_rank[tree.response_node(pair.chosen)]
        l = tree.node_rank[tree.response_node(pair.rejected)]
        m = beta * (seq_pi[p, w] - seq_ref[p, w]) - beta * (seq_pi[p, l] - seq_ref[p, l])
        total += -log_sigmoid(m)
    return float(total / len(pairs))


def expected_loss_and_grad(pi: Policy, log_ref, dist: PreferenceDistribution, beta: float):
    """Expected DPO loss over all pairs weighted by ``dist``; also the implicit returns."""
    mdp = pi.mdp
    tree = mdp.tree
    logp = pi.log_prob_table()
    diff = np.where(tree.allowed, logp - np.where(tree.allowed, log_ref, 0.0), 0.0)
    h = beta * response_logprobs(mdp, diff)
    M = h[:, :, None] - h[:, None, :]
    mask = dist.pairs_mask()
    W = np.where(mask, dist.probs, 0.0)
    n_pairs = dist.n_pairs()
    if n_pairs == 0:
        raise DegeneratePair("every prompt has a single response; no pairs to compare")
    loss = float((W * -log_sigmoid(M)).sum() / n_pairs)
    s = sigmoid(-M)
    g_h = (-(W * s).sum(axis=2) + (W * s).sum(axis=1)) / n_pairs
    g_node = np.empty_like(g_h)
    g_node[:, tree.response_nodes] = beta * g_h
    g_table = kernels.subtree_scatter(g_node, tree.parent, tree.parent_action, mdp.eos_id, mdp.vocab_size)
    grad = pi.backward_table(g_table, logp)
    return loss, grad, h, logp


@dataclass
class TrainingDiagnostics:
    records: list = field(default_factory=list)
    ref_hash: str = ""
    beta: float = 0.0

    def append(self, step, loss, chosen_ir, rejected_ir, expected_lr):
        n = len(self.records) + 1
        prev = self.records[-1] if self.records else None

        def running(key, value):
            return value if prev is None else prev[key] + (value - prev[key]) / n

        margin = chosen_ir - rejected_ir
        self.records.append(
            {
                "step": step,
                "loss": loss,
                "chosen_ir": chosen_ir,
                "rejected_ir": rejected_ir,
                "margin": margin,
                "expected_logratio": expected_lr,
                "running_chosen_ir": running("running_chosen_ir", chosen_ir),
                "running_rejected_ir": running("running_rejected_ir", rejected_ir),
                "running_margin": running("running_margin", margin),
            }
        )

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write(f"# schema=tokdpo.diagnostics/1 beta={self.beta!r} ref_sha256={self.ref_hash}\n")
            w = csv.writer(f, lineterminator="\n")
            w.writerow(DIAG_COLUMNS)
            for r in self.records:
                w.writerow([r["step"]] + [repr(float(r[c])) for c in DIAG_COLUMNS[1:]])


def _mean_expected_logratio(pi: Policy, log_ref, beta: float) -> float:
    seq_ref = response_logprobs(pi.mdp, log_ref)
    seq_pi = response_logprobs(pi.mdp, pi.log_prob_table())
    return float((np.exp(seq_ref) * beta * (seq_pi - seq_ref)).sum(axis=1).mean())


def dpo_train(pi: Policy, ref: Policy, data, config: DpoConfig | None = None, checkpoint_dir=None):
    """Train ``pi`` against frozen ``ref``; returns (policy, diagnostics)."""
    config = config or DpoConfig()
    mdp = pi.mdp
    beta = config.beta
    pi = pi.copy()
    ref = ref.copy()
    ref_hash = ref.content_hash()
    diag = TrainingDiagnostics(ref_hash=ref_hash, beta=beta)
    opt = make_optimizer(config.optimizer, config.lr or default_lr(pi), config.momentum)
    rng = np.random.default_rng(config.seed)

    n_states = mdp.n_prompts * mdp.n_responses
    track_expected = n_states <= config.diag_max_states
    log_ref = reference_log_table(mdp, ref) if (config.mode == "exact" or track_expected) else None

    if config.mode == "exact":
        if not isinstance(data, PreferenceDistribution):
            raise TypeError("exact mode needs a PreferenceDistribution")
        mask = data.pairs_mask()
        W = np.where(mask, data.probs, 0.0)
    else:
        full = PairBatch(data, ref)
        bs = config.batch_size or len(full)

    last_good = pi.params.copy()
    for step in range(config.steps + 1):
        if config.mode == "exact":
            loss, grad, h, _ = expected_loss_and_grad(pi, log_ref, data, beta)
            chosen = float((W * h[:, :, None]).sum() / data.n_pairs())
            rejected = float((W * h[:, None, :]).sum() / data.n_pairs())
        else:
            if bs >= len(full):
                sub = full
            else:
                idx = rng.choice(len(full), size=bs, replace=False)
                sub = PairBatch([full.pairs[i] for i in np.sort(idx)], ref)
            _, _, c_ir, r_ir = _pair_terms(pi, sub, beta)
            loss, grad = dpo_loss_and_grad(pi, ref, sub, beta)
            chosen, rejected = float(c_ir.mean()), float(r_ir.mean())
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingDiverged(
                f"DPO loss became non-finite at step {step}", last_good=last_good, step=step
            )
        last_good = pi.params.copy()
        exp_lr = _mean_expected_logratio(pi, log_ref, beta) if track_expected else float("nan")
        diag.append(step, loss, chosen, rejected, exp_lr)
        if checkpoint_dir and config.checkpoint_every and step % config.checkpoint_every == 0:
            save_checkpoint(pi, Path(checkpoint_dir) / f"step_{step:06d}.json")
        if step == config.steps:
            break
        if config.grad_tol and np.sqrt(grad @ grad) < config.grad_tol:
            break
        pi.params = opt.step(pi.params, grad)

    if ref.content_hash() != ref_hash:
        raise RuntimeError("reference policy changed during training")
    return pi, diag


def implicit_token_rewards(pi: Policy, ref: Policy, beta: float, traj: Trajectory) -> list[float]:
    """Per-token beta * log(pi/pi_ref) along ``traj``."""
    validate_trajectory(pi.mdp, traj)
    _, lp = logprob(pi, traj)
    _, lr = logprob(ref, traj)
    lr = np.asarray(lr)
    if not np.all(np.isfinite(lr)):
        raise ZeroReferenceProbability("reference assigns zero probability to a trajectory token")
    return [float(x) for x in beta * (np.asarray(lp) - lr)]


def expected_logratio(pi: Policy, ref: Policy, beta: float, prompt) -> float:
    """E_{y ~ pi_ref}[beta * log(pi(y|x)/pi_ref(y|x))] by full enumeration."""
    mdp = pi.mdp
    p = mdp.prompt_index(prompt)
    mdp.check_enumerable()
    log_ref = reference_log_table(mdp, ref)
    seq_ref = response_logprobs(mdp, log_ref)[p]
    seq_pi = response_logprobs(mdp, pi.log_prob_table())[p]
    return float(np.sum(np.exp(seq_ref) * beta * (seq_pi - seq_ref)))


def kl_ref_to_policy(pi: Policy, ref: Policy, prompt) -> float:
    """KL(pi_ref || pi) over responses, via the per-state chain rule.

    Walks the tree with reference state-visitation weights; shares no code
    with the sequence-level enumeration in :func:`expected_logratio`.
    """
    mdp = pi.mdp
    tree = mdp.tree
    p = mdp.prompt_index(prompt)
    lr = reference_log_table(mdp, ref)[p]
    lp = pi.log_prob_table()[p]
    reach = np.zeros(tree.n_nodes)
    reach[0] = 1.0
    kl = 0.0
    for i in range(tree.n_nodes):
        for a in np.flatnonzero(tree.allowed[i]):
            pr = np.exp(lr[i, a])
            kl += reach[i] * pr * (lr[i, a] - lp[i, a])
            c = tree.child[i, a]
            if c >= 0:
                reach[c] = reach[i] * pr
    return float(kl)
