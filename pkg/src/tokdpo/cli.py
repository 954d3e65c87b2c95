"""Command-line entry point: ``tokdpo <command> [--config FILE] [flags]``.

Settings resolve as built-in defaults < ``--config`` JSON < explicit flags.
Every command is deterministic given its settings, so repeated runs write
identical bytes.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import TokdpoError

DEFAULTS = {
    "gen-task": {"kind": "random-reward", "seed": 0, "param": []},
    "sample-prefs": {"n": 100, "seed": 0, "sampler": "ref"},
    "sft": {"policy_kind": "tabular", "optimizer": "momentum", "lr": None, "epochs": 200, "seed": 0},
    "dpo-train": {
        "beta": 0.1, "optimizer": "adam", "lr": None, "steps": 500, "batch_size": None,
        "mode": "sampled", "seed": 0, "checkpoint_every": 0,
    },
    "solve": {"beta": 1.0},
    "decode": {"mode": "beam", "width": 5, "beta": 1.0, "seed": 0, "n": 1},
    "inspect": {"beta": 0.1, "index": 0, "format": "ansi", "which": "rejected", "localization": False},
    "verify": {"scope": "all", "seeds": 20, "seed_start": 0},
    "compare-rlhf": {"beta": 1.0, "exact": False, "steps": 3000, "lr": 0.05, "l2": None, "seed": 0},
}


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _require(opts, *keys):
    missing = [k for k in keys if opts.get(k) is None]
    if missing:
        raise SystemExit(f"missing required setting(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


# -- commands -------------------------------------------------------------------------


def cmd_gen_task(o):
    from .harness.tasks import gen_task

    _require(o, "out")
    params = {}
    for item in o["param"]:
        key, _, value = item.partition("=")
        params[key] = value
    params.update(o.get("params", {}))
    manifest = gen_task(o["kind"], params, int(o["seed"]), o["out"])
    print(f"wrote {o['kind']} task to {o['out']} ({sorted(f for f in manifest['files'].values() if f)})")
    return 0


def _task(o):
    from .harness.tasks import load_task

    _require(o, "task")
    return load_task(o["task"])


def cmd_sample_prefs(o):
    from .mdp import save_pairs
    from .preference import sample_preferences

    task = _task(o)
    _require(o, "out")
    pairs = sample_preferences(task.mdp, task.reward(), task.ref(), int(o["n"]), int(o["seed"]), o["sampler"])
    save_pairs(o["out"], pairs)
    print(f"wrote {len(pairs)} pairs to {o['out']}")
    return 0


def _load_policy(path, task):
    from .policy import load_checkpoint

    return task.ref() if path is None else load_checkpoint(path, task.mdp)


def cmd_sft(o):
    from .mdp import load_pairs
    from .policy import SftConfig, make_policy, save_checkpoint, sft_train

    task = _task(o)
    _require(o, "out")
    pairs = load_pairs(o["data"], task.mdp) if o.get("data") else task.pairs()
    if o.get("init"):
        pi = _load_policy(o["init"], task)
    else:
        pi = make_policy(task.mdp, o["policy_kind"])
    cfg = SftConfig(optimizer=o["optimizer"], lr=o["lr"], epochs=int(o["epochs"]), seed=int(o["seed"]))
    pi, losses = sft_train(pi, [p.winner for p in pairs], cfg)
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    digest = save_checkpoint(pi, out / "policy.json")
    _write(out / "sft_losses.csv", "epoch,loss\n" + "".join(f"{i},{l!r}\n" for i, l in enumerate(losses)))
    print(f"sft: final loss {losses[-1]!r}; checkpoint sha256 {digest}")
    return 0


def cmd_dpo_train(o):
    from .dpo import DpoConfig, dpo_train
    from .mdp import load_pairs
    from .policy import save_checkpoint
    from .preference import reward_preference_distribution

    task = _task(o)
    _require(o, "out")
    ref = _load_policy(o.get("ref"), task)
    init = _load_policy(o.get("init"), task) if o.get("init") else ref
    if o["mode"] == "exact":
        data = reward_preference_distribution(task.reward())
    else:
        data = load_pairs(o["data"], task.mdp) if o.get("data") else task.pairs()
    cfg = DpoConfig(
        beta=float(o["beta"]), optimizer=o["optimizer"], lr=o["lr"], steps=int(o["steps"]),
        batch_size=o["batch_size"], seed=int(o["seed"]), mode=o["mode"],
        checkpoint_every=int(o["checkpoint_every"]),
    )
    out = Path(o["out"])
    ckpt_dir = out / "checkpoints" if cfg.checkpoint_every else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    pi, diag = dpo_train(init, ref, data, cfg, checkpoint_dir=ckpt_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = save_checkpoint(pi, out / "policy.json")
    diag.to_csv(out / "diagnostics.csv")
    print(f"dpo: final loss {diag.records[-1]['loss']!r}; checkpoint sha256 {digest}")
    return 0


def cmd_solve(o):
    from .policy import save_checkpoint
    from .soft_rl import solve_soft

    task = _task(o)
    _require(o, "out")
    ref = _load_policy(o.get("ref"), task)
    sol = solve_soft(task.mdp, task.reward(), ref, float(o["beta"]))
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    digest = save_checkpoint(sol.policy(), out / "pi_star.json")
    values = {
        "schema": "tokdpo.solution/1",
        "beta": sol.beta,
        "ref_sha256": ref.content_hash(),
        "initial_values": [float(sol.v[p, 0]) for p in range(task.mdp.n_prompts)],
        "prompts": [list(p) for p in task.mdp.prompts],
    }
    _write(out / "solution.json", _dump(values))
    print(f"solve: V(s0) = {values['initial_values']}; optimal policy sha256 {digest}")
    return 0


def cmd_decode(o):
    from .decode import beam_search, guided_search, sample_responses
    from .dpo import implicit_token_rewards
    from .soft_rl import solve_soft

    task = _task(o)
    _require(o, "out")
    mode, width, beta = o["mode"], int(o["width"]), float(o["beta"])
    ref = _load_policy(o["ref"], task) if o.get("ref") else None
    lines = []
    for prompt in task.mdp.prompts:
        if mode == "guided":
            ref_g = ref or task.ref()
            sol = solve_soft(task.mdp, task.reward(), ref_g, beta)
            ranked = [(r.trajectory, r.score) for r in guided_search(task.reward(), ref_g, sol, prompt, width, beta)]
            scorer = None
        else:
            _require(o, "policy")
            pi = _load_policy(o["policy"], task)
            scorer = pi
            if mode == "beam":
                ranked = [(r.trajectory, r.score) for r in beam_search(pi, prompt, width, beta)]
            elif mode == "sample":
                ranked = [(t, None) for t in sample_responses(pi, prompt, int(o["n"]), int(o["seed"]))]
            else:
                raise SystemExit(f"unknown decode mode {mode!r}")
        entries = []
        for traj, score in ranked:
            e = {"response": list(traj.response), "score": None if score is None else float(score)}
            if ref is not None and scorer is not None:
                e["implicit_rewards"] = implicit_token_rewards(scorer, ref, beta, traj)
            entries.append(e)
        lines.append(json.dumps({"prompt": list(prompt), "mode": mode, "ranked": entries}, sort_keys=True))
    _write(o["out"], "\n".join(lines) + "\n")
    print(f"decoded {len(lines)} prompts to {o['out']}")
    return 0


def cmd_inspect(o):
    from .dpo import implicit_token_rewards
    from .harness.experiments import localization
    from .harness.heatmap import render_heatmap
    from .mdp import load_pairs

    task = _task(o)
    _require(o, "policy")
    pi = _load_policy(o["policy"], task)
    ref = _load_policy(o.get("ref"), task)
    beta = float(o["beta"])
    if o.get("data"):
        pairs = load_pairs(o["data"], task.mdp)
    else:
        pairs = task.pairs("heldout" if task.kind == "corruption" else "pairs")
    if o["localization"]:
        frac, _ = localization(pi, ref, beta, pairs)
        report = {"localization": frac, "n": len(pairs), "threshold": 0.9, "pass": frac >= 0.9}
        text = _dump(report)
        if o.get("out"):
            _write(o["out"], text)
        print(text, end="")
        return 0 if report["pass"] else 1
    pair = pairs[int(o["index"])]
    traj = pair.loser if o["which"] == "rejected" else pair.winner
    rewards = implicit_token_rewards(pi, ref, beta, traj)
    art = render_heatmap(traj, rewards, o["format"], beta, ref.content_hash())
    if o.get("out"):
        _write(o["out"], art)
    else:
        sys.stdout.write(art)
    return 0


def cmd_verify(o):
    from .harness.verify import run_verify_suite

    start = int(o["seed_start"])
    report = run_verify_suite(o["scope"], range(start, start + int(o["seeds"])))
    if o.get("out"):
        _write(o["out"], report.to_json())
    sys.stdout.write(report.to_text())
    return 0 if report.passed else 1


def cmd_compare(o):
    from .harness.compare import CompareConfig, compare_classical_rlhf, report_json
    from .mdp import load_pairs
    from .preference import reward_preference_distribution

    task = _task(o)
    reward, ref = task.reward(), task.ref()
    if o["exact"]:
        data = reward_preference_distribution(reward)
    else:
        _require(o, "data")
        data = load_pairs(o["data"], task.mdp)
    cfg = CompareConfig(beta=float(o["beta"]), l2_strength=o["l2"], dpo_steps=int(o["steps"]),
                        dpo_lr=float(o["lr"]), seed=int(o["seed"]))
    text = report_json(compare_classical_rlhf(reward, ref, data, cfg))
    if o.get("out"):
        _write(o["out"], text)
    sys.stdout.write(text)
    return 0


COMMANDS = {
    "gen-task": cmd_gen_task,
    "sample-prefs": cmd_sample_prefs,
    "sft": cmd_sft,
    "dpo-train": cmd_dpo_train,
    "solve": cmd_solve,
    "decode": cmd_decode,
    "inspect": cmd_inspect,
    "verify": cmd_verify,
    "compare-rlhf": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tokdpo", description="Token-level DPO toolkit on enumerable token trees.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file of settings; flags override it")
        return p

    p = add("gen-task", "generate a synthetic task directory")
    p.add_argument("--kind", choices=["random-reward", "bandit", "corruption"])
    p.add_argument("--seed", type=int)
    p.add_argument("--param", action="append", help="task parameter as key=value (repeatable)")
    p.add_argument("--out")

    p = add("sample-prefs", "sample Bradley-Terry labelled pairs from the task reward")
    p.add_argument("--task")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--sampler", choices=["ref", "uniform"])
    p.add_argument("--out")

    p = add("sft", "supervised fine-tuning on chosen responses")
    p.add_argument("--task")
    p.add_argument("--data")
    p.add_argument("--init")
    p.add_argument("--policy-kind", dest="policy_kind", choices=["tabular", "tiny-seq"])
    p.add_argument("--optimizer", choices=["momentum", "sgd", "adam"])
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = add("dpo-train", "train a policy with token-level DPO")
    p.add_argument("--task")
    p.add_argument("--data")
    p.add_argument("--ref")
    p.add_argument("--init")
    p.add_argument("--beta", type=float)
    p.add_argument("--optimizer", choices=["momentum", "sgd", "adam"])
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--mode", choices=["sampled", "exact"])
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--out")

    p = add("solve", "exact soft-optimal policy for the task reward")
    p.add_argument("--task")
    p.add_argument("--ref")
    p.add_argument("--beta", type=float)
    p.add_argument("--out")

    p = add("decode", "beam search, value-guided search or sampling")
    p.add_argument("--task")
    p.add_argument("--policy")
    p.add_argument("--ref")
    p.add_argument("--mode", choices=["beam", "guided", "sample"])
    p.add_argument("--width", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = add("inspect", "per-token implicit reward heatmap or localization score")
    p.add_argument("--task")
    p.add_argument("--policy")
    p.add_argument("--ref")
    p.add_argument("--data")
    p.add_argument("--beta", type=float)
    p.add_argument("--index", type=int)
    p.add_argument("--which", choices=["chosen", "rejected"])
    p.add_argument("--format", choices=["ansi", "html"])
    p.add_argument("--localization", action="store_true")
    p.add_argument("--out")

    p = add("verify", "run the seeded verification batteries")
    p.add_argument("--scope", choices=["all", "bijection", "shaping", "preference", "search", "logratio",
                                       "lemma1", "theorem1", "eq8", "eq14", "eq15"])
    p.add_argument("--seeds", type=int, help="number of seeds")
    p.add_argument("--seed-start", dest="seed_start", type=int)
    p.add_argument("--out")

    p = add("compare-rlhf", "classical reward-model pipeline versus DPO")
    p.add_argument("--task")
    p.add_argument("--data")
    p.add_argument("--exact", action="store_true")
    p.add_argument("--beta", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    flags = vars(args).copy()
    command = flags.pop("command")
    opts = dict(DEFAULTS[command])
    config = flags.pop("config", None)
    if config:
        loaded = json.loads(Path(config).read_text())
        if not isinstance(loaded, dict):
            raise SystemExit("config file must hold a JSON object")
        opts.update({k.replace("-", "_"): v for k, v in loaded.items()})
    opts.update(flags)
    return opts


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    opts = resolve(args)
    try:
        return COMMANDS[args.command](opts)
    except (TokdpoError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
