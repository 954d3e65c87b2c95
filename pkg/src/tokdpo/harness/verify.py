"""Seeded verification batteries with tolerances loaded from data.

Scopes
------
bijection
    reward -> Q -> reward round trip, and the zero-reward fixed point.
shaping
    potential shaping leaves the optimal policy and preferences unchanged.
preference
    reward-based and optimal-policy-based preferences agree on every pair.
search
    value-guided search and likelihood beam search over the optimal
    policy return identical rankings.
logratio
    expected log-ratio under the reference equals ``-beta * KL(ref || pi)``.

The short aliases ``lemma1``, ``theorem1``, ``eq8``, ``eq14`` and ``eq15`` are
accepted for the same scopes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Iterable

import numpy as np

from ..decode import beam_search, guided_search
from ..dpo import expected_logratio, kl_ref_to_policy
from ..policy import TabularPolicy
from ..preference import (
    policy_preference_distribution,
    reward_preference_distribution,
    tv_distance,
)
from ..soft_rl import Potential, RewardTable, q_to_reward, shape_reward, solve_soft
from .tasks import random_instance

SCOPES = ("bijection", "shaping", "preference", "search", "logratio")
ALIASES = {"lemma1": "bijection", "theorem1": "shaping", "eq8": "preference", "eq14": "search", "eq15": "logratio"}
REPORT_SCHEMA = "tokdpo.verify/1"
SEARCH_WIDTHS = (1, 2, 5)


def load_tolerances(path=None) -> dict:
    if path is None:
        text = resources.files("tokdpo").joinpath("tolerances.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    tol = json.loads(text)
    tol.pop("schema", None)
    return tol


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    worst_seed: int | None = None


@dataclass
class VerificationReport:
    scope: str
    seeds: list
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, values: dict, tolerance: float) -> None:
        """Record the worst per-seed value of one check."""
        seed, worst = max(values.items(), key=lambda kv: (kv[1], -kv[0]))
        self.checks.append(CheckResult(name, bool(worst <= tolerance), float(worst), float(tolerance), seed))

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "scope": self.scope,
            "seeds": list(self.seeds),
            "status": "pass" if self.passed else "fail",
            "checks": [asdict(c) for c in self.checks],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def to_text(self) -> str:
        lines = []
        for c in self.checks:
            tag = "PASS" if c.passed else "FAIL"
            lines.append(f"{tag} {c.name}: {c.value!r} (tolerance {c.tolerance!r}, worst seed {c.worst_seed})")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"


# -- individual batteries (each returns {check: value} for one seed) ------------------------


def check_bijection(seed: int) -> dict:
    inst = random_instance(seed)
    mdp, allowed = inst.mdp, inst.mdp.tree.allowed
    sol = solve_soft(mdp, inst.reward, inst.ref, inst.beta)
    back = q_to_reward(mdp, sol.q, inst.ref, inst.beta)
    mask = np.broadcast_to(allowed, back.values.shape)
    zero = solve_soft(mdp, RewardTable.zeros(mdp), inst.ref, inst.beta)
    ref_p = np.exp(inst.ref.log_prob_table())
    return {
        "roundtrip_abs": float(np.abs(back.values - inst.reward.values)[mask].max()),
        "zero_reward_policy_abs": float(np.abs(zero.pi_star - ref_p)[mask].max()),
        "zero_reward_value_abs": float(np.abs(zero.v).max()),
    }


def check_shaping(seed: int) -> dict:
    inst = random_instance(seed)
    mdp = inst.mdp
    phi = Potential.random(mdp, np.random.default_rng([seed, 1]))
    shaped = shape_reward(inst.reward, phi)
    a = solve_soft(mdp, inst.reward, inst.ref, inst.beta)
    b = solve_soft(mdp, shaped, inst.ref, inst.beta)
    mask = np.broadcast_to(mdp.tree.allowed, a.pi_star.shape)
    tv = tv_distance(reward_preference_distribution(inst.reward), reward_preference_distribution(shaped))
    return {"policy_abs": float(np.abs(a.pi_star - b.pi_star)[mask].max()), "preference_tv": tv}


def check_preference(seed: int) -> dict:
    inst = random_instance(seed)
    sol = solve_soft(inst.mdp, inst.reward, inst.ref, inst.beta)
    truth = reward_preference_distribution(inst.reward)
    induced = policy_preference_distribution(sol.policy(), inst.ref, inst.beta)
    return {"match_abs": tv_distance(truth, induced)}


def _ranking(results) -> list:
    return [r.response for r in results]


def check_search(seed: int) -> dict:
    inst = random_instance(seed)
    sol = solve_soft(inst.mdp, inst.reward, inst.ref, inst.beta)
    pi_star = sol.policy()
    bad = 0
    for prompt in inst.mdp.prompts:
        for w in SEARCH_WIDTHS:
            guided = guided_search(inst.reward, inst.ref, sol, prompt, w, inst.beta)
            likely = beam_search(pi_star, prompt, w, inst.beta)
            bad += _ranking(guided) != _ranking(likely)
    return {"ranking_mismatches": float(bad)}


def check_logratio(seed: int) -> dict:
    inst = random_instance(seed)
    mdp = inst.mdp
    rng = np.random.default_rng([seed, 2])
    pi = TabularPolicy.from_logit_table(mdp, rng.normal(size=(mdp.n_prompts, mdp.tree.n_nodes, mdp.vocab_size)))
    ident, at_ref = 0.0, 0.0
    for prompt in mdp.prompts:
        lhs = expected_logratio(pi, inst.ref, inst.beta, prompt)
        rhs = -inst.beta * kl_ref_to_policy(pi, inst.ref, prompt)
        ident = max(ident, abs(lhs - rhs))
        at_ref = max(at_ref, abs(expected_logratio(inst.ref, inst.ref, inst.beta, prompt)))
    return {"kl_identity_abs": ident, "reference_abs": at_ref}


BATTERIES = {
    "bijection": check_bijection,
    "shaping": check_shaping,
    "preference": check_preference,
    "search": check_search,
    "logratio": check_logratio,
}


def resolve_scope(scope: str) -> tuple:
    scope = ALIASES.get(scope, scope)
    if scope == "all":
        return SCOPES
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}")
    return (scope,)


def run_verify_suite(scope: str = "all", seeds: Iterable[int] = range(20), tolerances: dict | None = None) -> VerificationReport:
    """Run the selected batteries over ``seeds``; failures are report entries."""
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("at least one seed is required")
    tol = tolerances if tolerances is not None else load_tolerances()
    report = VerificationReport(scope, seeds)
    for name in resolve_scope(scope):
        per_check: dict = {}
        for s in seeds:
            for check, value in BATTERIES[name](s).items():
                per_check.setdefault(check, {})[s] = value if np.isfinite(value) else np.inf
        for check, values in per_check.items():
            key = f"{name}.{check}"
            report.add(key, values, tol[key])
    return report
