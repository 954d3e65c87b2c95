"""Deterministic, tree-structured token MDP.

States are (prompt, generated) token prefixes and actions are vocabulary
ids; taking an action appends it.  EOS terminates, and the last position
(``max_response_len``) only admits EOS, so every response is finite and
EOS-terminated.

All prompts share one tree shape (the dynamics never look at the prompt),
so per-prompt tables are stored as ``(P, n, A)`` arrays indexed through a
single :class:`TokenTree`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    DegeneratePair,
    EnumerationCapExceeded,
    InvalidState,
    InvalidTrajectory,
    PromptMismatch,
)

DEFAULT_ENUM_CAP = 10**6
TASK_SCHEMA = "tokdpo.task/1"
PAIRS_SCHEMA = "tokdpo.pairs/1"

Tokens = tuple[int, ...]


def response_count(vocab_size: int, max_response_len: int) -> int:
    """Number of valid responses: sum_{n < T_max} (|A| - 1)^n."""
    return sum((vocab_size - 1) ** k for k in range(max_response_len))


@dataclass(frozen=True)
class TokenMdp:
    vocab_size: int
    eos_id: int
    max_response_len: int
    prompts: tuple[Tokens, ...]
    enum_cap: int = field(default=DEFAULT_ENUM_CAP, compare=False)

    def __post_init__(self):
        prompts = tuple(tuple(int(t) for t in p) for p in self.prompts)
        object.__setattr__(self, "prompts", prompts)
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if not 0 <= self.eos_id < self.vocab_size:
            raise ValueError(f"eos_id {self.eos_id} outside [0, {self.vocab_size})")
        if self.max_response_len < 1:
            raise ValueError("max_response_len must be >= 1")
        if not prompts:
            raise ValueError("at least one prompt is required")
        if len(set(prompts)) != len(prompts):
            raise ValueError("prompts must be pairwise distinct")
        for p in prompts:
            if any(not 0 <= t < self.vocab_size for t in p):
                raise ValueError(f"prompt {list(p)} has out-of-range tokens")

    @property
    def n_prompts(self) -> int:
        return len(self.prompts)

    @property
    def n_responses(self) -> int:
        return response_count(self.vocab_size, self.max_response_len)

    @cached_property
    def _prompt_index(self) -> dict[Tokens, int]:
        return {p: i for i, p in enumerate(self.prompts)}

    def prompt_index(self, prompt: Sequence[int]) -> int:
        try:
            return self._prompt_index[tuple(prompt)]
        except KeyError:
            raise InvalidTrajectory(f"unknown prompt {list(prompt)}") from None

    def allowed_actions(self, n_generated: int) -> range | tuple[int]:
        if n_generated >= self.max_response_len:
            return ()
        if n_generated == self.max_response_len - 1:
            return (self.eos_id,)
        return range(self.vocab_size)

    def check_enumerable(self, cap: int | None = None) -> None:
        cap = self.enum_cap if cap is None else cap
        count = self.n_responses
        if count > cap:
            raise EnumerationCapExceeded(
                f"{count} responses per prompt exceeds the enumeration cap {cap}"
            )

    @cached_property
    def tree(self) -> TokenTree:
        self.check_enumerable()
        return TokenTree(self.vocab_size, self.eos_id, self.max_response_len)

    def to_dict(self) -> dict:
        return {
            "schema": TASK_SCHEMA,
            "vocab_size": self.vocab_size,
            "eos_id": self.eos_id,
            "max_response_len": self.max_response_len,
            "prompts": [list(p) for p in self.prompts],
        }

    @classmethod
    def from_dict(cls, d: dict) -> TokenMdp:
        schema = d.get("schema", TASK_SCHEMA)
        if schema != TASK_SCHEMA:
            raise ValueError(f"unsupported task schema {schema!r}")
        return cls(
            vocab_size=int(d["vocab_size"]),
            eos_id=int(d["eos_id"]),
            max_response_len=int(d["max_response_len"]),
            prompts=tuple(tuple(p) for p in d["prompts"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> TokenMdp:
        return cls.from_dict(json.loads(Path(path).read_text()))


class TokenTree:
    """Index of every nonterminal state below one prompt.

    Node ``i`` is the generated prefix ``prefixes[i]``; nodes are in
    lexicographic (preorder) order, so parents precede children.  Each node
    also names exactly one response, ``prefixes[i] + (eos,)``.
    """

    def __init__(self, vocab_size: int, eos_id: int, max_response_len: int):
        self.vocab_size = vocab_size
        self.eos_id = eos_id
        self.max_response_len = max_response_len
        body = [a for a in range(vocab_size) if a != eos_id]

        prefixes: list[Tokens] = []
        parent: list[int] = []
        parent_action: list[int] = []
        stack: list[tuple[Tokens, int, int]] = [((), -1, -1)]
        while stack:
            prefix, par, act = stack.pop()
            prefixes.append(prefix)
            parent.append(par)
            parent_action.append(act)
            if len(prefix) < max_response_len - 1:
                me = len(prefixes) - 1
                for a in reversed(body):
                    stack.append((prefix + (a,), me, a))

        n = len(prefixes)
        self.prefixes = prefixes
        self.index = {p: i for i, p in enumerate(prefixes)}
        self.parent = np.asarray(parent, dtype=np.int64)
        self.parent_action = np.asarray(parent_action, dtype=np.int64)
        self.depth = np.fromiter((len(p) for p in prefixes), dtype=np.int64, count=n)

        self.allowed = np.zeros((n, vocab_size), dtype=bool)
        self.allowed[:, eos_id] = True
        self.allowed[self.depth < max_response_len - 1, :] = True
        self.child = np.full((n, vocab_size), -1, dtype=np.int64)
        nonroot = np.arange(1, n)
        self.child[self.parent[nonroot], self.parent_action[nonroot]] = nonroot

        # Rank r -> node of the r-th response in lexicographic token order.
        self.response_nodes = np.asarray(
            sorted(range(n), key=lambda i: prefixes[i] + (eos_id,)), dtype=np.int64
        )
        self.node_rank = np.empty(n, dtype=np.int64)
        self.node_rank[self.response_nodes] = np.arange(n)

    @property
    def n_nodes(self) -> int:
        return len(self.prefixes)

    @property
    def n_pairs(self) -> int:
        return int(self.allowed.sum())

    def node(self, prefix: Sequence[int]) -> int:
        try:
            return self.index[tuple(prefix)]
        except KeyError:
            raise InvalidState(f"prefix {list(prefix)} is not a nonterminal state") from None

    def response(self, node: int) -> Tokens:
        return self.prefixes[node] + (self.eos_id,)

    def response_node(self, response: Sequence[int]) -> int:
        """Node whose EOS transition ends ``response``."""
        return self.node(tuple(response[:-1]))

    def walk(self, response: Sequence[int]) -> Iterator[tuple[int, int]]:
        """(node, action) pairs visited by a valid response."""
        node = 0
        for a in response:
            yield node, a
            node = int(self.child[node, a])

    def responses(self) -> list[Tokens]:
        return [self.response(int(i)) for i in self.response_nodes]


@dataclass(frozen=True)
class State:
    prompt: Tokens
    generated: Tokens = ()
    terminal: bool = False


def initial_state(mdp: TokenMdp, prompt: Sequence[int]) -> State:
    mdp.prompt_index(prompt)
    return State(tuple(prompt), (), False)


def step(mdp: TokenMdp, s: State, a: int) -> State:
    """Append token ``a`` to the state's generated prefix."""
    if s.terminal:
        raise InvalidState("cannot step from a terminal state")
    if not 0 <= a < mdp.vocab_size:
        raise InvalidState(f"token {a} out of range [0, {mdp.vocab_size})")
    if a not in mdp.allowed_actions(len(s.generated)):
        raise InvalidState(
            f"only EOS ({mdp.eos_id}) is allowed at position {len(s.generated)}"
        )
    generated = s.generated + (int(a),)
    terminal = a == mdp.eos_id or len(generated) >= mdp.max_response_len
    return State(s.prompt, generated, terminal)


@dataclass(frozen=True)
class Trajectory:
    prompt: Tokens
    response: Tokens

    def __post_init__(self):
        object.__setattr__(self, "prompt", tuple(int(t) for t in self.prompt))
        object.__setattr__(self, "response", tuple(int(t) for t in self.response))

    def __len__(self) -> int:
        return len(self.response)

    def states(self) -> list[tuple[Tokens, Tokens]]:
        """(prompt, prefix) context before each response token."""
        return [(self.prompt, self.response[:t]) for t in range(len(self.response))]


@dataclass(frozen=True)
class PreferencePair:
    prompt: Tokens
    chosen: Tokens
    rejected: Tokens
    label_source: str = "fixed"
    corrupt_index: int | None = None

    def __post_init__(self):
        for name in ("prompt", "chosen", "rejected"):
            object.__setattr__(self, name, tuple(int(t) for t in getattr(self, name)))
        if self.label_source not in ("sampled", "fixed"):
            raise ValueError(f"unknown label_source {self.label_source!r}")

    @property
    def winner(self) -> Trajectory:
        return Trajectory(self.prompt, self.chosen)

    @property
    def loser(self) -> Trajectory:
        return Trajectory(self.prompt, self.rejected)


def validate_response(mdp: TokenMdp, response: Sequence[int]) -> None:
    if len(response) == 0:
        raise InvalidTrajectory("empty response")
    if len(response) > mdp.max_response_len:
        raise InvalidTrajectory(
            f"response length {len(response)} exceeds max_response_len {mdp.max_response_len}"
        )
    if any(not 0 <= t < mdp.vocab_size for t in response):
        raise InvalidTrajectory("response has out-of-range tokens")
    if response[-1] != mdp.eos_id:
        raise InvalidTrajectory("response is not EOS-terminated")
    if mdp.eos_id in response[:-1]:
        raise InvalidTrajectory("EOS appears before the final position")


def validate_trajectory(mdp: TokenMdp, traj: Trajectory) -> None:
    mdp.prompt_index(traj.prompt)
    validate_response(mdp, traj.response)


def validate_pair(mdp: TokenMdp, pair: PreferencePair, prompt: Sequence[int] | None = None) -> None:
    """Check a preference pair; ``prompt`` optionally pins the expected prompt."""
    if prompt is not None and tuple(prompt) != pair.prompt:
        raise PromptMismatch(f"prompt mismatch: {list(prompt)} vs {list(pair.prompt)}")
    mdp.prompt_index(pair.prompt)
    validate_response(mdp, pair.chosen)
    validate_response(mdp, pair.rejected)
    if pair.chosen == pair.rejected:
        raise DegeneratePair("degenerate pair: chosen equals rejected")


def check_same_prompt(a: Trajectory, b: Trajectory) -> None:
    if a.prompt != b.prompt:
        raise PromptMismatch(f"prompt mismatch: {list(a.prompt)} vs {list(b.prompt)}")


def enumerate_responses(
    mdp: TokenMdp, prompt: Sequence[int], cap: int | None = None
) -> list[Trajectory]:
    """Every valid response for ``prompt`` in lexicographic token-id order."""
    mdp.prompt_index(prompt)
    mdp.check_enumerable(cap)
    prompt = tuple(prompt)
    return [Trajectory(prompt, r) for r in mdp.tree.responses()]


def all_states(mdp: TokenMdp) -> list[tuple[Tokens, Tokens]]:
    """Every nonterminal (prompt, prefix) in table order (prompt-major)."""
    prefixes = mdp.tree.prefixes
    return [(p, g) for p in mdp.prompts for g in prefixes]


# -- JSON Lines datasets ----------------------------------------------------


def save_pairs(path, pairs: Iterable[PreferencePair]) -> None:
    lines = [json.dumps({"schema": PAIRS_SCHEMA})]
    for p in pairs:
        rec = {"prompt": list(p.prompt), "chosen": list(p.chosen), "rejected": list(p.rejected)}
        if p.label_source != "fixed":
            rec["label_source"] = p.label_source
        if p.corrupt_index is not None:
            rec["corrupt_index"] = p.corrupt_index
        lines.append(json.dumps(rec))
    Path(path).write_text("\n".join(lines) + "\n")


def load_pairs(path, mdp: TokenMdp | None = None) -> list[PreferencePair]:
    """Read a preference dataset; with ``mdp`` every pair is validated."""
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if "schema" in rec:
            if rec["schema"] != PAIRS_SCHEMA:
                raise ValueError(f"unsupported dataset schema {rec['schema']!r}")
            continue
        pair = PreferencePair(
            rec["prompt"],
            rec["chosen"],
            rec["rejected"],
            rec.get("label_source", "fixed"),
            rec.get("corrupt_index"),
        )
        if mdp is not None:
            try:
                validate_pair(mdp, pair)
            except ValueError as e:
                raise InvalidTrajectory(f"{path}:{lineno}: {e}") from e
        pairs.append(pair)
    return pairs
