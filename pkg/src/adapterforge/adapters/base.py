"""Vanilla low-rank adapter and the machinery every variant inherits.

Orientation: ``x`` is a row batch (b x m), the frozen weight maps m -> n and
the update is applied as ``x -> x @ A @ B`` with ``A`` (m x r) and ``B``
(r x n).  Variants whose published form puts ``B`` on the left are transposed
into this orientation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Mapping

import numpy as np

from ..autodiff import Tape
from ..linalg import LinalgError, RngStream, as_mat, kaiming_uniform

SCALING_MODES = ("standard", "rank_stabilized")


class AdapterError(ValueError):
    pass


class NotMaterializable(AdapterError):
    """The variant's update depends on the input and has no fixed delta."""


@dataclass(frozen=True)
class AdapterSpec:
    in_features: int
    out_features: int
    rank: int = 8
    alpha: float = 16.0
    dropout: float = 0.0
    scaling_mode: str = "standard"
    variant: str = "lora"
    params: Mapping[str, Any] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.in_features < 1 or self.out_features < 1:
            raise AdapterError("feature dimensions must be positive")
        if self.rank < 1:
            raise AdapterError("rank must be >= 1")
        if self.alpha <= 0:
            raise AdapterError("alpha must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise AdapterError("dropout must lie in [0, 1)")
        if self.scaling_mode not in SCALING_MODES:
            raise AdapterError(f"scaling_mode must be one of {SCALING_MODES}")

    @property
    def scaling(self) -> float:
        if self.scaling_mode == "rank_stabilized":
            return self.alpha / math.sqrt(self.rank)
        return self.alpha / self.rank

    def with_params(self, **kw) -> "AdapterSpec":
        return replace(self, params={**dict(self.params), **kw})

    @classmethod
    def alpha_2r(cls, in_features: int, out_features: int, rank: int, **kw) -> "AdapterSpec":
        """Preset with ``alpha = 2 * rank``."""
        return cls(in_features, out_features, rank=rank, alpha=2.0 * rank, **kw)


class LoRAAdapter:
    """``W = W~ + s * A @ B`` with ``A`` Kaiming-uniform and ``B = 0`` at init.

    ``params`` holds every tensor the adapter owns; ``trainable`` names the
    subset the optimizer updates.  Shared tensors live in a bank and are
    referenced through ``shared`` (local name -> (bank, key)).
    """

    kind = "lora"
    materializable = True
    # False for variants whose init deliberately leaves a non-zero delta
    identity_at_init = True
    max_rank_check = True

    def __init__(self, spec: AdapterSpec, base, rng: RngStream | None = None, init: bool = True):
        self.spec = spec
        self.base = as_mat(base, "base").copy()
        if self.base.shape != (spec.in_features, spec.out_features):
            raise AdapterError(f"base shape {self.base.shape} does not match spec ({spec.in_features}, {spec.out_features})")
        if self.max_rank_check and spec.rank > min(spec.in_features, spec.out_features):
            raise AdapterError("rank exceeds min(in_features, out_features)")
        self.rng = rng if rng is not None else RngStream(spec.seed)
        self._dropout_rng = self.rng.spawn(7)
        self.params: dict[str, np.ndarray] = {}
        self.trainable: set[str] = set()
        self.shared: dict[str, tuple] = {}
        self.step = 0
        self.merged = False
        self.base_adjusted = False
        self.enabled = True
        self.init_kind = "default"
        if init:
            self.init_weights()

    # -- construction -------------------------------------------------
    @property
    def m(self) -> int:
        return self.spec.in_features

    @property
    def n(self) -> int:
        return self.spec.out_features

    @property
    def r(self) -> int:
        return self.spec.rank

    @property
    def scaling(self) -> float:
        return self.spec.scaling

    def vparam(self, key: str, default=None):
        return self.spec.params.get(key, default)

    def init_weights(self):
        A = kaiming_uniform(self.m, self.r, self.m, self.rng)
        B = np.zeros((self.r, self.n))
        if self.vparam("swap_init", False):
            A, B = np.zeros((self.m, self.r)), kaiming_uniform(self.r, self.n, self.m, self.rng)
        self.params = {"A": A, "B": B}
        self.trainable = {"A", "B"}

    def tensor(self, name: str) -> np.ndarray:
        if name in self.shared:
            bank, key = self.shared[name]
            return bank.tensors[key]
        return self.params[name]

    @property
    def A(self) -> np.ndarray:
        return self.tensor("A")

    @property
    def B(self) -> np.ndarray:
        return self.tensor("B")

    def trainable_parameters(self) -> dict[str, np.ndarray]:
        return {k: self.params[k] for k in sorted(self.trainable)}

    def num_trainable(self) -> int:
        return int(sum(v.size for v in self.trainable_parameters().values()))

    def lr_multipliers(self) -> dict[str, float]:
        return {}

    # -- graph --------------------------------------------------------
    def register(self, tape: Tape, prefix: str = "", trainable: bool = True) -> dict:
        nodes = {"base": tape.const(self.base)}
        for name, value in self.params.items():
            if trainable and name in self.trainable:
                nodes[name] = tape.param(prefix + name, value)
            else:
                nodes[name] = tape.const(value)
        for name, (bank, key) in self.shared.items():
            nodes[name] = bank.node(tape, key, trainable)
        return nodes

    def _dropout(self, tape: Tape, x, train: bool):
        p = self.spec.dropout
        if not train or p == 0.0:
            return x
        mask = (self._dropout_rng.uniform(0.0, 1.0, x.shape) >= p) / (1.0 - p)
        return tape.mul(x, mask)

    def adapter_graph(self, tape: Tape, x, nodes: dict, train: bool = False):
        h = tape.matmul(x, nodes["A"])
        return tape.scale(tape.matmul(h, nodes["B"]), self.scaling)

    def graph(self, tape: Tape, x, nodes: dict, train: bool = False):
        """Fused forward ``x @ W~ + s * ((dropout(x) @ A) @ B)``."""
        out = tape.matmul(x, nodes["base"])
        if not self.enabled or self.merged:
            return out
        return tape.add(out, self.adapter_graph(tape, self._dropout(tape, x, train), nodes, train))

    def regularizer(self, tape: Tape, nodes: dict):
        return None

    def fused_forward(self, x, train_mode: bool = False) -> np.ndarray:
        x = as_mat(x, "x")
        if x.shape[1] != self.m:
            raise AdapterError(f"input has {x.shape[1]} features, adapter expects {self.m}")
        if self.merged:
            raise AdapterError("adapter is merged; unmerge before the fused forward")
        tape = Tape()
        nodes = self.register(tape, trainable=False)
        return self.graph(tape, tape.input(x), nodes, train_mode).value

    def forward(self, x, train_mode: bool = False) -> np.ndarray:
        """Fused forward, or the plain merged product when merged."""
        if self.merged:
            return as_mat(x) @ self.base
        return self.fused_forward(x, train_mode)

    # -- weights ------------------------------------------------------
    def delta_weight(self) -> np.ndarray:
        return self.scaling * (self.A @ self.B)

    def effective_weight(self) -> np.ndarray:
        if self.merged:
            return self.base.copy()
        if not self.materializable:
            raise NotMaterializable(f"{self.kind} has no fixed effective weight")
        return self.base + self.delta_weight()

    def merge(self):
        if self.merged:
            raise AdapterError("adapter already merged")
        if not self.materializable:
            raise NotMaterializable(f"{self.kind} cannot be merged")
        self._merged_delta = self.delta_weight()
        self.base = self.base + self._merged_delta
        self.merged = True

    def unmerge(self):
        if not self.merged:
            raise AdapterError("adapter is not merged")
        self.base = self.base - self._merged_delta
        del self._merged_delta
        self.merged = False

    def adjust_base(self):
        """Subtract the initial delta so the effective weight starts at W~."""
        self.base = self.base - self.delta_weight()
        self.base_adjusted = True

    # -- training hooks -----------------------------------------------
    def rewrite_grads(self, grads: dict) -> dict:
        """Variant gradient rewrite (preconditioning, alignment); identity here."""
        return grads

    def after_step(self, step: int, optimizer=None, prefix: str = "") -> dict:
        """Called after each optimizer update; returns an event record."""
        self.step = step
        return {}

    # -- serialization ------------------------------------------------
    def state_dict(self) -> dict:
        return {
            "variant": self.kind,
            "spec": _spec_to_dict(self.spec),
            "base": _mat_to_json(self.base),
            "params": {k: _mat_to_json(v) for k, v in sorted(self.params.items())},
            "shared": {k: _mat_to_json(self.tensor(k)) for k in sorted(self.shared)},
            "shared_trainable": sorted(k for k, (bank, key) in self.shared.items() if key in bank.trainable),
            "trainable": sorted(self.trainable),
            "step": self.step,
            "merged": self.merged,
            "merged_delta": _mat_to_json(self._merged_delta) if self.merged else None,
            "base_adjusted": self.base_adjusted,
            "init_kind": self.init_kind,
            "extras": self.extra_state(),
        }

    def extra_state(self) -> dict:
        return {}

    def load_extra_state(self, extras: dict):
        pass


def _spec_to_dict(spec: AdapterSpec) -> dict:
    d = asdict(spec)
    d["params"] = dict(spec.params)
    return d


def _mat_to_json(a) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.reshape(-1).tolist()}


def mat_from_json(d: dict) -> np.ndarray:
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


# -- closed-form identities ---------------------------------------------

def lora_gradients(A, B, grad_base, scaling: float) -> tuple[np.ndarray, np.ndarray]:
    """Factor gradients from the dense-weight gradient: ``(s G B^T, s A^T G)``."""
    A, B, G = as_mat(A), as_mat(B), as_mat(grad_base)
    if G.shape != (A.shape[0], B.shape[1]) or A.shape[1] != B.shape[0]:
        raise LinalgError("inconsistent shapes for lora_gradients")
    return scaling * G @ B.T, scaling * A.T @ G


def frozen_a_accumulation(A0, grads, lr: float, scaling: float, B0=None, optimizer: str = "sgd"):
    """Train ``B`` by plain SGD with ``A`` frozen; return ``(A0 @ B_t, closed form)``.

    The closed form is ``-lr * s * sum_i A0 A0^T G_i`` and holds exactly when
    ``B0 = 0``.
    """
    if optimizer != "sgd":
        raise AdapterError("the frozen-A identity only holds for plain SGD")
    A0 = as_mat(A0)
    n = as_mat(grads[0]).shape[1] if grads else (0 if B0 is None else as_mat(B0).shape[1])
    B = np.zeros((A0.shape[1], n)) if B0 is None else as_mat(B0).copy()
    if np.any(B != 0):
        raise AdapterError("the frozen-A identity needs B0 = 0")
    total = np.zeros((A0.shape[0], n))
    for G in grads:
        G = as_mat(G)
        B = B - lr * scaling * (A0.T @ G)
        total = total + G
    closed = -lr * scaling * (A0 @ (A0.T @ total))
    return A0 @ B, closed


def stepwise_update_approx(A, B, grad_base, lr: float, scaling: float):
    """One SGD step on both factors.

    Returns ``(exact, approx, second_order)`` where ``exact = A1 B1 - A B``,
    ``approx = -lr * s * (A A^T G + G B^T B)`` and ``exact - approx`` equals
    ``second_order = lr**2 * dA @ dB``.
    """
    A, B, G = as_mat(A), as_mat(B), as_mat(grad_base)
    dA, dB = lora_gradients(A, B, G, scaling)
    A1 = A - lr * dA
    B1 = B - lr * dB
    exact = A1 @ B1 - A @ B
    approx = -lr * scaling * (A @ (A.T @ G) + (G @ B.T) @ B)
    return exact, approx, lr**2 * dA @ dB
