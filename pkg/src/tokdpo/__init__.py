"""Token-level DPO on exactly solvable token trees."""

from .decode import (
    ComposedPolicy,
    Ranked,
    beam_search,
    greedy_decode,
    guided_search,
    proxy_compose,
    sample_response,
    sample_responses,
)
from .dpo import DpoConfig, dpo_train, expected_logratio, implicit_token_rewards, kl_ref_to_policy
from .mdp import PreferencePair, State, TokenMdp, Trajectory, enumerate_responses, initial_state, step
from .policy import (
    SftConfig,
    TabularPolicy,
    TinySeqPolicy,
    load_checkpoint,
    logprob,
    make_policy,
    save_checkpoint,
    sft_train,
)
from .preference import (
    bt_preference,
    fit_bandit_reward,
    policy_preference,
    sample_preferences,
    traj_return,
)
from .soft_rl import Potential, RewardTable, SoftSolution, advantage_of, q_to_reward, shape_reward, solve_soft

__version__ = "0.1.0"

__all__ = [
    "ComposedPolicy",
    "DpoConfig",
    "Potential",
    "PreferencePair",
    "Ranked",
    "RewardTable",
    "SftConfig",
    "SoftSolution",
    "State",
    "TabularPolicy",
    "TinySeqPolicy",
    "TokenMdp",
    "Trajectory",
    "advantage_of",
    "beam_search",
    "bt_preference",
    "dpo_train",
    "enumerate_responses",
    "expected_logratio",
    "fit_bandit_reward",
    "greedy_decode",
    "guided_search",
    "implicit_token_rewards",
    "initial_state",
    "kl_ref_to_policy",
    "load_checkpoint",
    "logprob",
    "make_policy",
    "policy_preference",
    "proxy_compose",
    "q_to_reward",
    "sample_preferences",
    "sample_response",
    "sample_responses",
    "save_checkpoint",
    "sft_train",
    "shape_reward",
    "solve_soft",
    "step",
    "traj_return",
]
