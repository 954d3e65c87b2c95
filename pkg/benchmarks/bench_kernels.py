"""Time the compiled tree kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--vocab 5] [--max-len 8] [--prompts 2] [--repeat 5]

Both backends are run on identical inputs; the script also reports the
largest disagreement between them.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from tokdpo.kernels import _pytree, compiled
from tokdpo.mdp import TokenMdp


def workload(mdp: TokenMdp, seed: int):
    tree = mdp.tree
    rng = np.random.default_rng(seed)
    shape = (mdp.n_prompts, tree.n_nodes, mdp.vocab_size)
    reward = rng.uniform(-2, 2, size=shape)
    logits = rng.normal(size=shape)
    log_ref = logits - np.log(np.exp(logits).sum(axis=2, keepdims=True))
    log_ref = np.where(tree.allowed, log_ref, 0.0)
    g = rng.normal(size=(mdp.n_prompts, tree.n_nodes))
    return tree, reward, log_ref, g


def run(mod, tree, reward, log_ref, g, beta, eos, A):
    q, v = mod.soft_backup(reward, log_ref, tree.child, tree.allowed, beta)
    r = mod.bellman_invert(np.where(tree.allowed, q, 0.0), log_ref, tree.child, tree.allowed, beta)
    s = mod.path_sums(np.where(tree.allowed, reward, 0.0), tree.parent, tree.parent_action, eos)
    t = mod.subtree_scatter(g, tree.parent, tree.parent_action, eos, A)
    return {"soft_backup": q, "bellman_invert": r, "path_sums": s, "subtree_scatter": t}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--vocab", type=int, default=5)
    ap.add_argument("--max-len", type=int, default=8)
    ap.add_argument("--prompts", type=int, default=2)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--beta", type=float, default=0.5)
    args = ap.parse_args(argv)

    mdp = TokenMdp(args.vocab, 0, args.max_len, tuple((i,) for i in range(args.prompts)))
    tree, reward, log_ref, g = workload(mdp, 0)
    print(f"tree: |A|={args.vocab} T_max={args.max_len} nodes={tree.n_nodes} prompts={args.prompts}")
    ext = compiled()
    backends = {"python": _pytree}
    if ext is None:
        print("compiled extension not built; timing the fallback only")
    else:
        backends["cython"] = ext

    outputs = {}
    for name, mod in backends.items():
        call = lambda: run(mod, tree, reward, log_ref, g, args.beta, mdp.eos_id, args.vocab)  # noqa: E731
        outputs[name] = call()
        best = min(timeit.repeat(call, number=1, repeat=args.repeat))
        print(f"{name:>7}: {best * 1e3:9.2f} ms (best of {args.repeat}, all four kernels)")

    if len(outputs) == 2:
        for key in outputs["python"]:
            a, b = outputs["python"][key], outputs["cython"][key]
            mask = np.isfinite(a)
            print(f"  max |python - cython| {key}: {np.abs(a[mask] - b[mask]).max():.3e}")


if __name__ == "__main__":
    main()
