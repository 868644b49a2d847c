"""Finite-difference oracle for the hand-written backward pass.

Every trainable tensor (all LoRA A/B factors plus the projector) is checked
coordinate by coordinate against central differences of the answer NLL.
"""

import numpy as np
import pytest

from hideforge.adapters import init_adapter_set
from hideforge.model import (
    autoregressive_loss,
    backward,
    build_base_model,
    build_projector,
    forward,
    trainable_params,
    training_composition,
)
from hideforge.numerics import seeded_rng

from conftest import make_sample

FD_STEP = 1e-5
REL_TOL = 1e-4


def randomize_adapters(aset, seed):
    """Break the zero-B structure so gradients are generically nonzero."""
    rng = seeded_rng(seed, "randomize")
    for ad in aset.adapters.values():
        ad.a[:] = rng.normal(0, 0.3, ad.a.shape)
        ad.b[:] = rng.normal(0, 0.3, ad.b.shape)


def loss_of(base, proj, aset, sample):
    return autoregressive_loss(forward(base, proj, training_composition(aset), sample), sample)


def central_difference(param, idx, base, proj, aset, sample):
    orig = param[idx]
    param[idx] = orig + FD_STEP
    hi = loss_of(base, proj, aset, sample)
    param[idx] = orig - FD_STEP
    lo = loss_of(base, proj, aset, sample)
    param[idx] = orig
    return (hi - lo) / (2 * FD_STEP)


def test_all_trainable_gradients_match_finite_differences(tiny_cfg):
    base = build_base_model(tiny_cfg, 11)
    proj = build_projector(tiny_cfg, 11)
    aset = init_adapter_set(tiny_cfg, "fd", 12)
    randomize_adapters(aset, 13)
    sample = make_sample(tiny_cfg, 14, n_ins=4, n_ans=2)

    grads = backward(base, proj, aset, sample)
    params = trainable_params(aset, proj)
    assert set(grads) == set(params)

    worst = 0.0
    for name, param in params.items():
        analytic = grads[name]
        flat = np.atleast_2d(param) if param.ndim == 2 else param.reshape(1, -1)
        for idx in np.ndindex(param.shape):
            fd = central_difference(param, idx, base, proj, aset, sample)
            an = analytic[idx]
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            worst = max(worst, rel)
            assert rel <= REL_TOL, f"{name}{idx}: analytic={an} fd={fd} rel={rel}"
    assert worst <= REL_TOL


def test_zero_b_factors_give_exactly_zero_a_gradients(tiny_cfg):
    # with B = 0 the delta path contributes nothing, so dL/dA = s * (dy B) x = 0
    base = build_base_model(tiny_cfg, 21)
    proj = build_projector(tiny_cfg, 21)
    aset = init_adapter_set(tiny_cfg, "zb", 22)
    grads = backward(base, proj, aset, make_sample(tiny_cfg, 23))
    for name, g in grads.items():
        if name.endswith(".A"):
            assert np.all(g == 0.0), name


def test_saturated_correct_prediction_gives_vanishing_gradients(tiny_cfg):
    # point the target's head row along the realized hidden state with a huge
    # margin: loss collapses toward zero and every gradient with it
    from hideforge.model import forward_batch

    base = build_base_model(tiny_cfg, 31)
    proj = build_projector(tiny_cfg, 31)
    aset = init_adapter_set(tiny_cfg, "sat", 32)
    randomize_adapters(aset, 33)
    sample = make_sample(tiny_cfg, 34, n_ins=3, n_ans=1)

    visual = np.asarray(sample.visual)[None]
    tokens = np.asarray(sample.instruction + sample.answer)[None]
    _, _, blocks = forward_batch(base, proj, training_composition(aset), visual, tokens,
                                 collect_blocks=True)
    row = tiny_cfg.visual_prefix_len + len(sample.instruction) - 1
    h = blocks[-1][0, row]
    base.head[:] = 0.0
    base.head[sample.answer[0]] = 200.0 * h / (h @ h)

    assert loss_of(base, proj, aset, sample) <= 1e-12
    grads = backward(base, proj, aset, sample)
    for name, g in grads.items():
        assert np.abs(g).max() <= 1e-9, name
