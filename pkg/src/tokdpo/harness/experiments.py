"""Longer-running experiments: credit assignment and the beam-width trend."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..decode import beam_search
from ..dpo import DpoConfig, dpo_train, implicit_token_rewards
from ..mdp import TokenMdp
from ..policy import Policy, TabularPolicy
from ..preference import sample_preferences, traj_return
from ..soft_rl import RewardTable, solve_soft
from .tasks import LoadedTask, random_reference


@dataclass
class CorruptionConfig:
    beta: float = 0.1
    lr: float = 1e-2
    steps: int = 300
    batch_size: int = 64
    seed: int = 0


def localization(pi: Policy, ref: Policy, beta: float, pairs) -> tuple[float, list]:
    """Fraction of rejected responses whose corrupted token has the lowest implicit reward."""
    hits, rows = 0, []
    for pair in pairs:
        ir = implicit_token_rewards(pi, ref, beta, pair.loser)
        at = int(np.argmin(ir))  # first minimum on ties
        hits += at == pair.corrupt_index
        rows.append({"corrupt_index": pair.corrupt_index, "argmin": at, "rewards": ir})
    return hits / len(pairs), rows


def run_corruption(task: LoadedTask, config: CorruptionConfig | None = None):
    """DPO from a fresh reference copy; returns (policy, ref, diagnostics, report)."""
    config = config or CorruptionConfig()
    if task.kind != "corruption":
        raise ValueError("run_corruption needs a corruption task")
    ref = task.ref()
    dcfg = DpoConfig(beta=config.beta, lr=config.lr, steps=config.steps, batch_size=config.batch_size, seed=config.seed)
    pi, diag = dpo_train(ref, ref, task.pairs(), dcfg)
    frac, _ = localization(pi, ref, config.beta, task.pairs("heldout"))
    report = {"config": asdict(config), "heldout_localization": frac, "final_loss": diag.records[-1]["loss"]}
    return pi, ref, diag, report


@dataclass
class TrendConfig:
    n_tasks: int = 10
    vocab_size: int = 4
    max_response_len: int = 4
    n_pairs: int = 200
    beta: float = 0.1
    dpo_steps: int = 300
    dpo_lr: float = 0.05
    widths: tuple = (1, 5, 25)
    seed: int = 0


def beam_trend_report(config: TrendConfig | None = None) -> dict:
    """Ground-truth return of the top beam hypothesis at several widths.

    Two policies are decoded per task: a DPO policy trained on finite sampled
    preferences and the exact soft-optimal policy.  Beam scores rank by
    ``sum r + beta * log pi_ref``, not by bare return, so wider beams need
    not raise the return even for the exact policy.
    """
    config = config or TrendConfig()
    totals = {kind: {w: [] for w in config.widths} for kind in ("dpo", "exact")}
    for k in range(config.n_tasks):
        rng = np.random.default_rng([config.seed, k])
        mdp = TokenMdp(config.vocab_size, 0, config.max_response_len, ((1,), (2,)))
        reward = RewardTable.random(mdp, rng)
        ref = random_reference(mdp, rng, 1.0)
        data = sample_preferences(mdp, reward, ref, config.n_pairs, rng)
        init = TabularPolicy.from_logit_table(mdp, ref.log_prob_table())
        dcfg = DpoConfig(beta=config.beta, lr=config.dpo_lr, steps=config.dpo_steps, seed=k)
        policies = {
            "dpo": dpo_train(init, ref, data, dcfg)[0],
            "exact": solve_soft(mdp, reward, ref, config.beta).policy(),
        }
        for kind, pi in policies.items():
            for prompt in mdp.prompts:
                for w in config.widths:
                    top = beam_search(pi, prompt, w, config.beta)[0]
                    totals[kind][w].append(traj_return(reward, top.trajectory))
    means = {kind: {str(w): float(np.mean(v)) for w, v in t.items()} for kind, t in totals.items()}
    return {
        "config": {**asdict(config), "widths": list(config.widths)},
        "mean_return": means,
        "beam5_ge_beam1": {kind: m.get("5", np.nan) >= m.get("1", np.nan) for kind, m in means.items()},
    }
