"""Fast invariant checks runnable from an installed package (``vflmid selftest``)."""
from __future__ import annotations

import math

import numpy as np

from .. import analysis
from .. import diffcore as dc
from ..attacks import dli_infer
from ..defenses import DefenseConfig, apply_discrete_grad, apply_dp, apply_grad_sparse
from ..diffcore import Rng, Tensor
from ..models import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, parse_config, serialize_config


def _check_gradients() -> bool:
    rng = Rng(11)
    x = Tensor(rng.normal((3, 4)))
    W = Tensor(rng.normal((4, 5)), requires_grad=True)
    b = Tensor(rng.normal(5), requires_grad=True)

    def f():
        loss, _ = dc.softmax_cross_entropy(dc.relu(dc.linear_forward(x, W, b)), [0, 3, 1])
        return loss

    g = dc.backward(f(), wrt=[W])[W]
    num = np.zeros_like(W.data)
    h = 1e-6
    base = W.data.copy()
    for idx in np.ndindex(base.shape):
        for sgn in (1, -1):
            d = base.copy()
            d[idx] += sgn * h
            W.data = d
            num[idx] += sgn * f().item() / (2 * h)
    W.data = base
    return bool(np.max(np.abs(g - num)) / max(np.max(np.abs(num)), 1e-12) < 1e-4)


def _check_dli() -> bool:
    rng = Rng(12)
    logits = Tensor(rng.normal((16, 5)), requires_grad=True)
    y = rng.integers(0, 5, 16)
    loss, _ = dc.softmax_cross_entropy(logits, y)
    g = dc.backward(loss, wrt=[logits])[logits]
    return all(dli_infer(row)[0] == t for row, t in zip(g, y))


def _check_defenses() -> bool:
    rng = Rng(13)
    cfg = DefenseConfig(kind="dp_gauss", clip=1e9, sigma=0.5)
    noise = apply_dp(np.zeros((1000, 100)), cfg, rng)
    ok = abs(noise.std() - 0.5) < 0.02 * 0.5
    g = rng.normal((4, 20))
    s = apply_grad_sparse(g, 0.5)
    ok &= bool(np.all((s == 0).sum(axis=1) == 10) and np.all((s == g) | (s == 0)))
    q = apply_discrete_grad(g, 12, 1.0)
    ok &= len(np.unique(q)) <= 12 and bool(np.all(np.abs(q - np.clip(g, -1, 1)) <= 1.0 / 12 + 1e-12))
    return bool(ok)


def _check_mi() -> bool:
    ok = abs(analysis.plugin_mi([[50, 0], [0, 50]]) - math.log(2)) < 1e-12
    ok &= analysis.plugin_mi([[25, 25], [25, 25]]) == 0.0
    ok &= analysis.theorem1_rhs(analysis.BoundInputs(0, 0, 4, 0.5, 0.5, 1)) == 0.0
    return bool(ok)


def _check_roundtrips() -> bool:
    cfg = ExperimentConfig()
    text = serialize_config(cfg)
    ok = serialize_config(parse_config(text)) == text
    blob = save_checkpoint({"a": np.arange(6.0).reshape(2, 3)})
    ok &= np.array_equal(load_checkpoint(blob)["a"], np.arange(6.0).reshape(2, 3))
    return bool(ok)


CHECKS = [
    ("reverse-mode gradients match finite differences", _check_gradients),
    ("label sign structure of softmax-CE gradients", _check_dli),
    ("gradient-transform defenses", _check_defenses),
    ("plug-in MI and bound degenerate cases", _check_mi),
    ("config and checkpoint round trips", _check_roundtrips),
]


def run_selftest(verbose: bool = False) -> bool:
    all_ok = True
    for name, fn in CHECKS:
        try:
            ok = fn()
        except Exception as e:  # a crash is a failed check
            ok = False
            name = f"{name} ({type(e).__name__}: {e})"
        all_ok &= ok
        if verbose:
            print(f"{'ok  ' if ok else 'FAIL'} {name}")
    return all_ok
