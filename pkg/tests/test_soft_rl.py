import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import make_instance, random_logits, soft_solve, step_return
from oracles import responses as brute_responses
from tokdpo.errors import InvalidPotential, MissingEntry, ZeroReferenceProbability
from tokdpo.mdp import State
from tokdpo.policy import TabularPolicy
from tokdpo.preference import response_logprobs, response_returns
from tokdpo.soft_rl import (
    Potential,
    RewardTable,
    advantage_from_ratio,
    advantage_from_reward,
    advantage_of,
    q_to_reward,
    shape_reward,
    solve_soft,
)


def _bandit(mdp, r_eos, r_tok):
    return RewardTable.from_entries(mdp, [(0, (), 0, r_eos), (0, (), 1, r_tok), (0, (1,), 0, 0.0)])


def _mask(mdp, arr):
    return np.broadcast_to(mdp.tree.allowed, arr.shape)


@pytest.mark.parametrize("beta", [0.3, 1.0, 2.0])
def test_zero_reward_gives_reference(small_mdp, beta):
    ref = TabularPolicy(small_mdp)
    sol = solve_soft(small_mdp, RewardTable.zeros(small_mdp), ref, beta)
    m = _mask(small_mdp, sol.pi_star)
    assert np.array_equal(sol.pi_star[m], np.exp(ref.log_prob_table())[m])
    assert np.all(sol.v == 0.0)


@pytest.mark.parametrize(
    "beta, expected",
    [(1.0, (0.7310585786300049, 0.2689414213699951)), (2.0, (0.6224593312018546, 0.3775406687981454))],
)
def test_bandit_closed_form(bandit_mdp, beta, expected):
    sol = solve_soft(bandit_mdp, _bandit(bandit_mdp, 1.0, 0.0), TabularPolicy(bandit_mdp), beta)
    assert sol.pi_star[0, 0, 0] == pytest.approx(expected[0], abs=1e-12)
    assert sol.pi_star[0, 0, 1] == pytest.approx(expected[1], abs=1e-12)


@given(st.integers(0, 10**6), st.floats(0.1, 3.0))
def test_solver_matches_recursive_oracle(seed, beta):
    mdp, reward, ref = make_instance(seed)
    tree = mdp.tree
    log_ref = ref.log_prob_table()
    sol = solve_soft(mdp, reward, ref, beta)
    Q, V = soft_solve(
        mdp,
        lambda x, g, a: reward[((x, g), a)],
        lambda x, g, a: log_ref[mdp.prompt_index(x), tree.node(g), a],
        beta,
    )
    for (x, g), v in V.items():
        assert sol.value((x, g)) == pytest.approx(v, abs=1e-10)
    for (x, g, a), q in Q.items():
        assert sol.q[mdp.prompt_index(x), tree.node(g), a] == pytest.approx(q, abs=1e-10)


@given(st.integers(0, 10**6), st.floats(0.1, 3.0))
def test_solution_invariants(seed, beta):
    mdp, reward, ref = make_instance(seed, vocab=4, max_len=3)
    sol = solve_soft(mdp, reward, ref, beta)
    allowed = mdp.tree.allowed
    rows = np.where(allowed, sol.pi_star, 0.0).sum(axis=2)
    assert np.abs(rows - 1.0).max() < 1e-12
    lse = beta * np.log(np.where(allowed, np.exp(np.where(allowed, sol.q, 0.0) / beta), 0.0).sum(axis=2))
    assert np.abs(lse - sol.v).max() < 1e-10
    assert sol.value(State((1,), (0,), True)) == 0.0


def test_partition_function(small_mdp):
    _, reward, ref = make_instance(3, prompts=small_mdp.prompts)
    sol = solve_soft(small_mdp, reward, ref, 0.7)
    assert sol.partition((1,)) == pytest.approx(math.exp(sol.v[0, 0] / 0.7))


@given(st.integers(0, 10**6), st.floats(0.2, 2.0))
def test_initial_value_by_enumeration(seed, beta):
    mdp, reward, ref = make_instance(seed, vocab=4, max_len=3)
    sol = solve_soft(mdp, reward, ref, beta)
    for p, prompt in enumerate(mdp.prompts):
        terms = []
        for y in brute_responses(mdp):
            ret = step_return(mdp, reward, prompt, y)
            lr = sum(ref.log_probs([(prompt, y[:t])])[0][a] for t, a in enumerate(y))
            terms.append((ret + beta * lr) / beta)
        m = max(terms)
        expected = beta * (m + math.log(sum(math.exp(t - m) for t in terms)))
        assert abs(sol.v[p, 0] - expected) < 1e-9


def test_zero_reference_probability_rejected(small_mdp):
    log_ref = np.log(np.full((2, small_mdp.tree.n_nodes, 3), 1 / 3))
    log_ref[0, 0, 1] = -np.inf
    with pytest.raises(ZeroReferenceProbability):
        solve_soft(small_mdp, RewardTable.zeros(small_mdp), log_ref, 1.0)


def test_missing_reward_entry(small_mdp):
    with pytest.raises(MissingEntry):
        RewardTable.from_entries(small_mdp, [(0, (), 0, 1.0)])


# -- inversion ------------------------------------------------------------------------


def test_reference_q_inverts_to_zero(small_mdp):
    ref = TabularPolicy.from_logit_table(small_mdp, random_logits(small_mdp, np.random.default_rng(0)))
    beta = 0.8
    q = beta * ref.log_prob_table()
    r = q_to_reward(small_mdp, q, ref, beta)
    assert np.abs(r.values[_mask(small_mdp, r.values)]).max() < 1e-12


@given(st.integers(0, 10**6), st.floats(0.1, 3.0))
def test_round_trip_reward(seed, beta):
    mdp, reward, ref = make_instance(seed, vocab=4, max_len=4)
    sol = solve_soft(mdp, reward, ref, beta)
    back = q_to_reward(mdp, sol.q, ref, beta)
    m = _mask(mdp, back.values)
    assert np.abs(back.values[m] - reward.values[m]).max() < 1e-9


@given(st.integers(0, 10**6), st.floats(0.1, 3.0))
def test_round_trip_q(seed, beta):
    mdp, _, ref = make_instance(seed, vocab=4, max_len=3)
    q = random_logits(mdp, np.random.default_rng(seed), 2.0)
    r = q_to_reward(mdp, q, ref, beta)
    sol = solve_soft(mdp, r, ref, beta)
    m = _mask(mdp, q)
    assert np.abs(sol.q[m] - q[m]).max() < 1e-9


def test_constant_q_shift_changes_reward_not_preferences():
    mdp, reward, ref = make_instance(5)
    beta = 1.3
    sol = solve_soft(mdp, reward, ref, beta)
    shifted = q_to_reward(mdp, sol.q + 0.75, ref, beta)
    m = _mask(mdp, shifted.values)
    assert np.abs(shifted.values[m] - reward.values[m]).max() > 0.1
    for prompt in mdp.prompts:
        ys = brute_responses(mdp)
        a = [step_return(mdp, reward, prompt, y) for y in ys]
        b = [step_return(mdp, shifted, prompt, y) for y in ys]
        for i in range(len(ys)):
            for j in range(len(ys)):
                p1 = 1 / (1 + math.exp(-(a[i] - a[j])))
                p2 = 1 / (1 + math.exp(-(b[i] - b[j])))
                assert abs(p1 - p2) < 1e-10


# -- shaping ----------------------------------------------------------------------------


def test_zero_potential_is_identity(small_mdp):
    _, reward, _ = make_instance(1, prompts=small_mdp.prompts)
    shaped = shape_reward(reward, Potential(small_mdp, np.zeros((2, small_mdp.tree.n_nodes))))
    assert np.array_equal(np.isnan(shaped.values), np.isnan(reward.values))
    m = _mask(small_mdp, reward.values)
    assert np.array_equal(shaped.values[m], reward.values[m])


@given(st.integers(0, 10**6))
def test_shaping_shifts_returns_by_initial_potential(seed):
    mdp, reward, _ = make_instance(seed, vocab=3, max_len=4)
    phi = Potential.random(mdp, np.random.default_rng(seed))
    shaped = shape_reward(reward, phi)
    for p, prompt in enumerate(mdp.prompts):
        for y in brute_responses(mdp):
            delta = step_return(mdp, shaped, prompt, y) - step_return(mdp, reward, prompt, y)
            assert delta == pytest.approx(-phi.values[p, 0], abs=1e-12)


@given(st.integers(0, 10**6), st.floats(0.1, 3.0))
def test_shaping_preserves_optimal_policy(seed, beta):
    mdp, reward, ref = make_instance(seed, vocab=4, max_len=3)
    phi = Potential.random(mdp, np.random.default_rng(seed), scale=2.0)
    a = solve_soft(mdp, reward, ref, beta)
    b = solve_soft(mdp, shape_reward(reward, phi), ref, beta)
    m = _mask(mdp, a.pi_star)
    assert np.abs(a.pi_star[m] - b.pi_star[m]).max() < 1e-10
    assert np.abs((b.v - a.v) + phi.values).max() < 1e-10


def test_potential_nonzero_at_terminal_rejected(small_mdp):
    with pytest.raises(InvalidPotential):
        Potential.from_mapping(small_mdp, {((1,), (2, 0)): 0.5})
    with pytest.raises(InvalidPotential):
        Potential.from_mapping(small_mdp, {((1,), (2, 2, 2)): 0.5})
    phi = Potential.from_mapping(small_mdp, {((1,), (2,)): 0.5, ((1,), (0,)): 0.0})
    assert phi.values[0, small_mdp.tree.node((2,))] == 0.5


# -- advantages -------------------------------------------------------------------------


def test_zero_reward_advantage_vanishes(small_mdp):
    ref = TabularPolicy.from_logit_table(small_mdp, random_logits(small_mdp, np.random.default_rng(2)))
    sol = solve_soft(small_mdp, RewardTable.zeros(small_mdp), ref, 0.9)
    adv = advantage_of(sol)
    assert np.nanmax(np.abs(adv)) < 1e-12


@given(st.integers(0, 10**6), st.floats(0.1, 3.0))
def test_advantage_routes_agree(seed, beta):
    mdp, reward, ref = make_instance(seed, vocab=4, max_len=3)
    sol = solve_soft(mdp, reward, ref, beta)
    adv = advantage_of(sol)
    m = _mask(mdp, adv)
    assert np.abs(adv - advantage_from_ratio(sol))[m].max() < 1e-10
    assert np.abs(adv - advantage_from_reward(sol, reward))[m].max() < 1e-10
    # Q - V alone is beta * log pi*
    assert np.abs((sol.q - sol.v[:, :, None])[m] - beta * sol.log_pi[m]).max() < 1e-10
    norm = np.where(m, np.exp(sol.log_ref) * np.exp(np.where(m, adv, 0.0) / beta), 0.0).sum(axis=2)
    assert np.abs(norm - 1.0).max() < 1e-12


def test_reward_table_io(tmp_path, small_mdp):
    _, reward, _ = make_instance(9, prompts=small_mdp.prompts)
    reward.save(tmp_path / "r.jsonl")
    back = RewardTable.load(small_mdp, tmp_path / "r.jsonl")
    m = _mask(small_mdp, reward.values)
    assert np.array_equal(back.values[m], reward.values[m])
    assert len(back) == small_mdp.n_prompts * small_mdp.tree.n_pairs


def test_returns_kernel_matches_stepping(small_mdp):
    _, reward, ref = make_instance(4, prompts=small_mdp.prompts)
    R = response_returns(reward)
    L = response_logprobs(small_mdp, ref.log_prob_table())
    for p, prompt in enumerate(small_mdp.prompts):
        for k, y in enumerate(small_mdp.tree.responses()):
            assert R[p, k] == pytest.approx(step_return(small_mdp, reward, prompt, y), abs=1e-12)
        assert np.exp(L[p]).sum() == pytest.approx(1.0, abs=1e-12)
