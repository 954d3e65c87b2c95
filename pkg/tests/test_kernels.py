import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tokdpo import kernels
from tokdpo.kernels import _pytree
from tokdpo.mdp import TokenMdp

ext = kernels.compiled()
needs_ext = pytest.mark.skipif(ext is None, reason="compiled extension not built")


def _inputs(vocab, max_len, prompts, seed):
    mdp = TokenMdp(vocab, 0, max_len, tuple((0,) * (i + 1) for i in range(prompts)))
    tree = mdp.tree
    rng = np.random.default_rng(seed)
    shape = (prompts, tree.n_nodes, vocab)
    reward = rng.uniform(-2, 2, shape)
    z = rng.normal(size=shape)
    log_ref = np.where(tree.allowed, z, -np.inf)
    log_ref = log_ref - np.log(np.exp(log_ref).sum(axis=2, keepdims=True))
    log_ref = np.where(tree.allowed, log_ref, 0.0)
    g = rng.normal(size=(prompts, tree.n_nodes))
    return mdp, tree, reward, log_ref, g


def _close(a, b, tol=1e-12):
    a, b = np.asarray(a), np.asarray(b)
    assert a.shape == b.shape
    fa, fb = np.isfinite(a), np.isfinite(b)
    assert np.array_equal(fa, fb)
    assert np.allclose(a[fa], b[fb], rtol=tol, atol=tol)


@needs_ext
@given(st.integers(2, 5), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**31 - 1), st.floats(0.1, 3.0))
def test_compiled_matches_fallback(vocab, max_len, prompts, seed, beta):
    mdp, tree, reward, log_ref, g = _inputs(vocab, max_len, prompts, seed)
    qa, va = ext.soft_backup(reward, log_ref, tree.child, tree.allowed, beta)
    qb, vb = _pytree.soft_backup(reward, log_ref, tree.child, tree.allowed, beta)
    _close(qa, qb)
    _close(va, vb)
    q0 = np.where(tree.allowed, qa, 0.0)
    _close(
        ext.bellman_invert(q0, log_ref, tree.child, tree.allowed, beta),
        _pytree.bellman_invert(q0, log_ref, tree.child, tree.allowed, beta),
    )
    _close(ext.soft_value(q0, tree.allowed, beta), _pytree.soft_value(q0, tree.allowed, beta))
    _close(ext.log_softmax(q0, tree.allowed, beta), _pytree.log_softmax(q0, tree.allowed, beta))
    vals = np.where(tree.allowed, reward, 0.0)
    _close(
        ext.path_sums(vals, tree.parent, tree.parent_action, mdp.eos_id),
        _pytree.path_sums(vals, tree.parent, tree.parent_action, mdp.eos_id),
    )
    _close(
        ext.subtree_scatter(g, tree.parent, tree.parent_action, mdp.eos_id, vocab),
        _pytree.subtree_scatter(g, tree.parent, tree.parent_action, mdp.eos_id, vocab),
    )


@given(st.integers(2, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_scatter_is_adjoint_of_path_sums(vocab, max_len, seed):
    mdp, tree, reward, _, g = _inputs(vocab, max_len, 2, seed)
    x = np.where(tree.allowed, reward, 0.0)
    lhs = (kernels.path_sums(x, tree.parent, tree.parent_action, 0) * g).sum()
    rhs = (x * kernels.subtree_scatter(g, tree.parent, tree.parent_action, 0, vocab)).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_path_sums_against_walk():
    mdp, tree, reward, _, _ = _inputs(3, 3, 1, 7)
    x = np.where(tree.allowed, reward, 0.0)
    sums = kernels.path_sums(x, tree.parent, tree.parent_action, 0)
    for y in tree.responses():
        expected = sum(x[0, node, a] for node, a in tree.walk(y))
        assert sums[0, tree.response_node(y)] == pytest.approx(expected, abs=1e-12)


def test_soft_value_is_stable_for_large_inputs():
    q = np.array([[[1000.0, 999.0]]])
    v = _pytree.soft_value(q, np.array([[True, True]]), 1.0)
    assert v[0, 0] == pytest.approx(1000.0 + np.log1p(np.exp(-1.0)), abs=1e-12)


def test_pure_python_switch():
    env = dict(os.environ, TOKDPO_PURE_PYTHON="1")
    out = subprocess.run(
        [sys.executable, "-c", "import tokdpo.kernels as k; print(k.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "python"


@needs_ext
def test_compiled_backend_selected_by_default():
    assert kernels.BACKEND == "cython"
