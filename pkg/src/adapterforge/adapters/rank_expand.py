"""Variants that raise the effective rank by composing low-rank factors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..linalg import block_diag, kaiming_uniform
from .base import AdapterError, LoRAAdapter


def _select(rows: int, cols: int, offset_r: int = 0, offset_c: int = 0, size: int | None = None) -> np.ndarray:
    """0/1 matrix copying a contiguous index window of length ``size``."""
    e = np.zeros((rows, cols))
    size = size if size is not None else min(rows - offset_r, cols - offset_c)
    e[np.arange(size) + offset_r, np.arange(size) + offset_c] = 1.0
    return e


# -- ReLoRA ---------------------------------------------------------------

@dataclass(frozen=True)
class ReloraSchedule:
    phase_length: int
    phases: int = 4
    rewarmup_steps: int = 10

    def __post_init__(self):
        if self.phase_length < 1:
            raise AdapterError("phase_length must be >= 1")

    def is_boundary(self, t: int) -> bool:
        return t > 0 and t % self.phase_length == 0 and t // self.phase_length <= self.phases


def relora_step_hook(adapter: LoRAAdapter, schedule: ReloraSchedule, t: int, optimizer=None, prefix: str = "") -> str:
    """Merge-and-reinit at phase boundaries; returns the action taken."""
    if t < 1:
        raise AdapterError("step index starts at 1")
    if not schedule.is_boundary(t):
        return "noop"
    if not adapter.materializable:
        raise AdapterError(f"{adapter.kind} delta cannot be merged")
    delta = adapter.delta_weight()
    adapter.base = adapter.base + delta
    adapter.merged_deltas.append(delta)
    adapter.init_weights()
    if optimizer is not None:
        optimizer.reset([prefix + name for name in adapter.trainable])
    return "merge_reinit"


class ReLoRAAdapter(LoRAAdapter):
    kind = "relora"

    def __init__(self, spec, base, rng=None, init=True):
        super().__init__(spec, base, rng, init)
        self.merged_deltas: list[np.ndarray] = []
        self.schedule = ReloraSchedule(
            phase_length=int(self.vparam("phase_length", 100)),
            phases=int(self.vparam("phases", 4)),
            rewarmup_steps=int(self.vparam("rewarmup_steps", 10)),
        )

    def after_step(self, step, optimizer=None, prefix=""):
        self.step = step
        return {"relora": relora_step_hook(self, self.schedule, step, optimizer, prefix)}


# -- MELoRA ---------------------------------------------------------------

def melora_delta(A_blocks, B_blocks, scaling: float) -> np.ndarray:
    return scaling * block_diag(A_blocks) @ block_diag(B_blocks)


class MELoRAAdapter(LoRAAdapter):
    """Block-diagonal mini adapters; ``spec.rank`` is the per-block rank."""

    kind = "melora"

    @property
    def k(self) -> int:
        return int(self.vparam("blocks", 2))

    def init_weights(self):
        k, m, n, r = self.k, self.m, self.n, self.r
        if m % k or n % k:
            raise AdapterError(f"blocks={k} must divide both dims ({m}, {n})")
        if r > min(m, n) // k:
            raise AdapterError("per-block rank exceeds block size")
        self.params = {}
        for i in range(k):
            self.params[f"A{i}"] = kaiming_uniform(m // k, r, m // k, self.rng)
            self.params[f"B{i}"] = np.zeros((r, n // k))
        self.trainable = set(self.params)

    def blocks(self):
        return [self.params[f"A{i}"] for i in range(self.k)], [self.params[f"B{i}"] for i in range(self.k)]

    def delta_weight(self):
        return melora_delta(*self.blocks(), self.scaling)

    def adapter_graph(self, tape, x, nodes, train=False):
        k, mb, nb = self.k, self.m // self.k, self.n // self.k
        out = None
        for i in range(k):
            xi = tape.matmul(x, _select(self.m, mb, i * mb, 0, mb))
            yi = tape.matmul(tape.matmul(tape.matmul(xi, nodes[f"A{i}"]), nodes[f"B{i}"]), _select(nb, self.n, 0, i * nb, nb))
            out = yi if out is None else tape.add(out, yi)
        return tape.scale(out, self.scaling)


# -- LoHa -----------------------------------------------------------------

def loha_delta(A1, B1, A2, B2, scaling: float) -> np.ndarray:
    return scaling * ((A1 @ B1) * (A2 @ B2))


class LoHaAdapter(LoRAAdapter):
    """Hadamard product of two rank-r pairs, scaled by alpha / r."""

    kind = "loha"

    def init_weights(self):
        m, n, r = self.m, self.n, self.r
        self.params = {
            "A1": kaiming_uniform(m, r, m, self.rng),
            "B1": np.zeros((r, n)),
            "A2": kaiming_uniform(m, r, m, self.rng),
            "B2": kaiming_uniform(r, n, r, self.rng),
        }
        self.trainable = set(self.params)

    def delta_weight(self):
        p = self.params
        return loha_delta(p["A1"], p["B1"], p["A2"], p["B2"], self.scaling)

    def adapter_graph(self, tape, x, nodes, train=False):
        w1 = tape.matmul(nodes["A1"], nodes["B1"])
        w2 = tape.matmul(nodes["A2"], nodes["B2"])
        return tape.scale(tape.matmul(x, tape.mul(w1, w2)), self.scaling)


# -- HiRA -----------------------------------------------------------------

def hira_delta(A, B, base, scaling: float) -> np.ndarray:
    return base * (scaling * (A @ B))


class HiRAAdapter(LoRAAdapter):
    kind = "hira"

    def delta_weight(self):
        return hira_delta(self.A, self.B, self.base_for_hadamard(), self.scaling)

    def base_for_hadamard(self):
        # the Hadamard factor stays the original frozen weight across merges
        return getattr(self, "_merged_base", self.base)

    def merge(self):
        self._merged_base = self.base.copy()
        super().merge()

    def unmerge(self):
        super().unmerge()
        del self._merged_base

    def adapter_graph(self, tape, x, nodes, train=False):
        w = tape.mul(nodes["base"], tape.matmul(nodes["A"], nodes["B"]))
        return tape.scale(tape.matmul(x, w), self.scaling)


# -- LoKr ------------------------------------------------------------------

def _largest_divisor(d: int, k: int) -> int:
    cap = min(k, math.isqrt(d))
    return max(u for u in range(1, cap + 1) if d % u == 0)


def lokr_dims(m: int, n: int, k: int) -> tuple[int, int]:
    """Largest ``u <= min(k, sqrt(d))`` dividing each dim."""
    if min(m, n, k) < 1:
        raise AdapterError("lokr_dims needs positive arguments")
    return _largest_divisor(m, k), _largest_divisor(n, k)


def lokr_delta(A, B, C, scaling: float) -> np.ndarray:
    return scaling * np.kron(A @ B, C)


class LoKrAdapter(LoRAAdapter):
    """``s * (A @ B) kron C``; ``C`` starts at zero so the delta does too."""

    kind = "lokr"
    max_rank_check = False

    def init_weights(self):
        md, nd = lokr_dims(self.m, self.n, int(self.vparam("factor", 8)))
        self.dims = (md, nd)
        r = self.r
        self.params = {
            "A": kaiming_uniform(md, r, md, self.rng),
            "B": kaiming_uniform(r, nd, r, self.rng),
            "C": np.zeros((self.m // md, self.n // nd)),
        }
        self.trainable = {"A", "B", "C"}

    def delta_weight(self):
        p = self.params
        return lokr_delta(p["A"], p["B"], p["C"], self.scaling)

    def adapter_graph(self, tape, x, nodes, train=False):
        w = tape.kron(tape.matmul(nodes["A"], nodes["B"]), nodes["C"])
        return tape.scale(tape.matmul(x, w), self.scaling)
