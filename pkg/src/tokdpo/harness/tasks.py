"""Synthetic task generation.

Three kinds are produced:

``random-reward``
    dense per-token rewards, uniform on ``[low, high]``, plus a tabular
    reference with Gaussian logits.
``bandit``
    one-step-deep responses with reward only on the EOS transition.
``corruption``
    credit-assignment benchmark.  Token ``bad_id`` is penalised; every
    rejected response is its chosen response with exactly one position
    overwritten by ``bad_id``.

Every file is written with sorted keys so a fixed seed gives identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..mdp import PreferencePair, TokenMdp, load_pairs, response_count, save_pairs
from ..policy import Policy, TabularPolicy, TinySeqPolicy, load_checkpoint, save_checkpoint
from ..soft_rl import RewardTable

TASKFILE_SCHEMA = "tokdpo.taskfile/1"
TASK_KINDS = ("random-reward", "bandit", "corruption")

DEFAULTS = {
    "random-reward": {
        "vocab_size": 3,
        "eos_id": 0,
        "max_response_len": 3,
        "n_prompts": 2,
        "prompt_len": 2,
        "low": -2.0,
        "high": 2.0,
        "ref_std": 0.5,
    },
    "bandit": {"n_responses": 2, "n_prompts": 1, "reward_std": 1.0, "ref_std": 0.5},
    "corruption": {
        "vocab_size": 6,
        "eos_id": 0,
        "bad_id": 1,
        "max_response_len": 5,
        "n_prompts": 4,
        "prompt_len": 3,
        "min_len": 2,
        "n_train": 500,
        "n_heldout": 100,
        "penalty": -1.0,
        "table_limit": 20_000,
    },
}


def _distinct_prompts(rng, n, length, tokens) -> tuple:
    tokens = list(tokens)
    if len(tokens) ** length < n:
        raise ValueError(f"cannot draw {n} distinct prompts of length {length}")
    seen = []
    while len(seen) < n:
        p = tuple(int(t) for t in rng.choice(tokens, size=length))
        if p not in seen:
            seen.append(p)
    return tuple(seen)


def random_reference(mdp: TokenMdp, rng: np.random.Generator, std: float = 0.5) -> TabularPolicy:
    shape = (mdp.n_prompts, mdp.tree.n_nodes, mdp.vocab_size)
    return TabularPolicy.from_logit_table(mdp, rng.normal(0.0, std, size=shape))


@dataclass
class Instance:
    """A seeded random enumerable problem (used by the verify suite)."""

    mdp: TokenMdp
    reward: RewardTable
    ref: TabularPolicy
    beta: float
    seed: int


def random_instance(seed: int, max_vocab: int = 5, max_len: int = 4, max_prompts: int = 2) -> Instance:
    rng = np.random.default_rng(seed)
    A = int(rng.integers(2, max_vocab + 1))
    T = int(rng.integers(1, max_len + 1))
    P = int(rng.integers(1, max_prompts + 1))
    eos = int(rng.integers(A))
    plen = 1 if A ** 2 < P else 2
    mdp = TokenMdp(A, eos, T, _distinct_prompts(rng, P, plen, range(A)))
    reward = RewardTable.random(mdp, rng)
    ref = random_reference(mdp, rng, 1.0)
    beta = float(rng.uniform(0.2, 2.0))
    return Instance(mdp, reward, ref, beta, seed)


# -- corruption construction -----------------------------------------------------------


def corruption_reward(mdp: TokenMdp, bad_id: int, penalty: float) -> RewardTable:
    tree = mdp.tree
    vals = np.zeros((mdp.n_prompts, tree.n_nodes, mdp.vocab_size))
    vals[:, :, bad_id] = penalty
    return RewardTable(mdp, vals)


def corruption_pairs(mdp: TokenMdp, rng, n: int, bad_id: int, min_len: int) -> list[PreferencePair]:
    normal = [t for t in range(mdp.vocab_size) if t not in (mdp.eos_id, bad_id)]
    out = []
    for _ in range(n):
        prompt = mdp.prompts[int(rng.integers(mdp.n_prompts))]
        length = int(rng.integers(min_len, mdp.max_response_len))  # EOS takes the last slot
        body = [int(t) for t in rng.choice(normal, size=length)]
        j = int(rng.integers(length))
        bad = list(body)
        bad[j] = bad_id
        out.append(
            PreferencePair(prompt, tuple(body) + (mdp.eos_id,), tuple(bad) + (mdp.eos_id,), "fixed", j)
        )
    return out


# -- task files -----------------------------------------------------------------------


def _merged(kind: str, params: dict | None) -> dict:
    if kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {kind!r}; expected one of {TASK_KINDS}")
    merged = dict(DEFAULTS[kind])
    for k, v in (params or {}).items():
        if k not in merged:
            raise ValueError(f"unknown parameter {k!r} for task kind {kind!r}")
        merged[k] = type(merged[k])(v)
    return merged


def gen_task(kind: str, params: dict | None, seed: int, out_dir) -> dict:
    """Write ``task.json``, ``reward.jsonl`` and ``ref.json`` (plus pairs for corruption).

    Returns the task manifest.
    """
    prm = _merged(kind, params)
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"reward": "reward.jsonl", "ref": "ref.json"}

    if kind == "random-reward":
        A = prm["vocab_size"]
        mdp = TokenMdp(A, prm["eos_id"], prm["max_response_len"],
                       _distinct_prompts(rng, prm["n_prompts"], prm["prompt_len"], range(A)))
        mdp.check_enumerable()
        reward = RewardTable.random(mdp, rng, prm["low"], prm["high"])
        ref = random_reference(mdp, rng, prm["ref_std"])
    elif kind == "bandit":
        A = prm["n_responses"]
        if A < 2:
            raise ValueError("a bandit task needs at least 2 responses")
        # responses: [eos] plus [t, eos] for every non-EOS t
        prompts = _distinct_prompts(rng, prm["n_prompts"], 1 if prm["n_prompts"] <= A else 2, range(A))
        mdp = TokenMdp(A, 0, 2, prompts)
        reward = RewardTable.terminal(mdp, rng.normal(0.0, prm["reward_std"], size=(mdp.n_prompts, A)))
        ref = random_reference(mdp, rng, prm["ref_std"])
    else:
        A, bad = prm["vocab_size"], prm["bad_id"]
        if bad == prm["eos_id"] or not 0 <= bad < A or A < 3:
            raise ValueError("corruption task needs a distinct bad token and at least one normal token")
        if not 1 <= prm["min_len"] < prm["max_response_len"]:
            raise ValueError("min_len must lie in [1, max_response_len)")
        normal = [t for t in range(A) if t not in (prm["eos_id"], bad)]
        mdp = TokenMdp(A, prm["eos_id"], prm["max_response_len"],
                       _distinct_prompts(rng, prm["n_prompts"], prm["prompt_len"], normal))
        train = corruption_pairs(mdp, rng, prm["n_train"], bad, prm["min_len"])
        held = corruption_pairs(mdp, rng, prm["n_heldout"], bad, prm["min_len"])
        save_pairs(out / "pairs.jsonl", train)
        save_pairs(out / "heldout.jsonl", held)
        files["pairs"], files["heldout"] = "pairs.jsonl", "heldout.jsonl"
        ref = TinySeqPolicy(mdp, seed=seed)
        n_entries = mdp.n_prompts * response_count(A, mdp.max_response_len) * A
        reward = corruption_reward(mdp, bad, prm["penalty"]) if n_entries <= prm["table_limit"] else None
        if reward is None:
            files["reward"] = None

    mdp.save(out / "mdp.json")
    if reward is not None:
        reward.save(out / files["reward"])
    save_checkpoint(ref, out / files["ref"])
    manifest = {
        "schema": TASKFILE_SCHEMA,
        "kind": kind,
        "seed": int(seed),
        "params": prm,
        "task": mdp.to_dict(),
        "files": files,
    }
    (out / "task.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest


@dataclass
class LoadedTask:
    root: Path
    manifest: dict
    mdp: TokenMdp

    @property
    def kind(self) -> str:
        return self.manifest["kind"]

    @property
    def params(self) -> dict:
        return self.manifest["params"]

    def _file(self, key):
        name = self.manifest["files"].get(key)
        return None if name is None else self.root / name

    def reward(self) -> RewardTable:
        path = self._file("reward")
        if path is None:
            if self.kind == "corruption":
                return corruption_reward(self.mdp, self.params["bad_id"], self.params["penalty"])
            raise FileNotFoundError("task has no reward table")
        return RewardTable.load(self.mdp, path)

    def ref(self) -> Policy:
        return load_checkpoint(self._file("ref"), self.mdp)

    def pairs(self, which: str = "pairs") -> list[PreferencePair]:
        path = self._file(which)
        if path is None:
            raise FileNotFoundError(f"task has no {which} file")
        return load_pairs(path, self.mdp)


def load_task(task_dir) -> LoadedTask:
    root = Path(task_dir)
    manifest = json.loads((root / "task.json").read_text())
    if manifest.get("schema") != TASKFILE_SCHEMA:
        raise ValueError(f"unsupported task file schema {manifest.get('schema')!r}")
    return LoadedTask(root, manifest, TokenMdp.from_dict(manifest["task"]))
