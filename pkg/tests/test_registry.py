"""Contracts every registered variant must honour."""

import json

import numpy as np
import pytest

from adapterforge.adapters import REGISTRY, AdapterSpec, build_adapter, from_state_dict
from adapterforge.adapters.init_variants import NON_IDENTITY, GradContext
from adapterforge.autodiff import Tape, grad_check
from adapterforge.linalg import RngStream

M = N = 12
NAMES = sorted(REGISTRY)


@pytest.fixture(scope="module")
def setting():
    g = np.random.default_rng(21)
    W = g.normal(size=(M, N))
    X = g.normal(size=(40, M))
    ctx = GradContext(grads={"l0": g.normal(size=(M, N))}, cov={"l0": X.T @ X})
    return W, ctx


def make(name, setting):
    W, ctx = setting
    return build_adapter(AdapterSpec(M, N, rank=2, alpha=4.0, variant=name), W, RngStream(1), ctx, "l0")


@pytest.mark.parametrize("name", NAMES)
def test_identity_at_init(name, setting):
    ad = make(name, setting)
    x = np.random.default_rng(0).normal(size=(5, M))
    gap = np.max(np.abs(ad.fused_forward(x) - x @ setting[0]))
    if REGISTRY[name].init in NON_IDENTITY:
        assert gap > 0
    else:
        assert gap <= 1e-10


@pytest.mark.parametrize("name", NAMES)
def test_state_dict_round_trip(name, setting):
    ad = make(name, setting)
    g = np.random.default_rng(1)
    for k in ad.params:
        ad.params[k] = ad.params[k] + 0.1 * g.normal(size=ad.params[k].shape)
    back = from_state_dict(json.loads(json.dumps(ad.state_dict())))
    x = g.normal(size=(4, M))
    assert np.array_equal(back.fused_forward(x), ad.fused_forward(x))
    assert back.trainable == ad.trainable and back.kind == ad.kind


@pytest.mark.parametrize("name", NAMES)
def test_graph_gradients(name, setting):
    ad = make(name, setting)
    g = np.random.default_rng(2)
    for k in ad.params:
        ad.params[k] = ad.params[k] + 0.1 * g.normal(size=ad.params[k].shape)
    t = Tape()
    out = ad.graph(t, t.input(g.normal(size=(5, M))), ad.register(t))
    assert out.value.shape == (5, N)
    t.mse(out, t.input(g.normal(size=(5, N))))
    grad_check(t)


@pytest.mark.parametrize("name", NAMES)
def test_graph_matches_fused_forward(name, setting):
    ad = make(name, setting)
    g = np.random.default_rng(3)
    for k in ad.params:
        ad.params[k] = ad.params[k] + 0.1 * g.normal(size=ad.params[k].shape)
    x = g.normal(size=(6, M))
    t = Tape()
    out = ad.graph(t, t.input(x), ad.register(t))
    assert np.max(np.abs(out.value - ad.fused_forward(x))) <= 1e-12


def test_registry_is_complete():
    expected = {
        "lora", "relora", "melora", "loha", "hira", "lokr", "sharelora", "vera", "tied_lora", "rasa",
        "denselora", "prolora", "randlora", "adalora", "increlora", "salora", "rslora", "lora_plus", "rplora",
        "dora", "delora", "lora_pro", "moslora", "aurora", "loda", "nzlora", "pissa", "milora", "olora", "sorsa",
        "lora_ga", "lora_one", "lora_sb", "gora", "corda_kpa", "corda_ipa", "eva", "moelora", "loramoe", "adamole",
        "hydralora", "goat",
    }
    assert set(REGISTRY) == expected
