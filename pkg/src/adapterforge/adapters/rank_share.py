"""Variants that share low-rank tensors across adapters.

Shared tensors live in a :class:`SharedBank`.  Every sharer pulls the same
tape node for a bank tensor, so reverse mode sums the per-sharer gradient
contributions into one adjoint.
"""

from __future__ import annotations

import fnmatch
import math

import numpy as np

from ..autodiff import Tape
from ..linalg import RngStream, kaiming_uniform
from .base import AdapterError, LoRAAdapter
from .rank_expand import _select


class SharedBank:
    def __init__(self, name: str, tensors: dict, trainable=()):
        self.name = name
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
        self.trainable = set(trainable)
        self.refcount = 0

    def full_name(self, key: str) -> str:
        return f"shared.{self.name}.{key}"

    def node(self, tape: Tape, key: str, trainable: bool = True):
        full = self.full_name(key)
        if trainable and key in self.trainable:
            if full not in tape.params:
                tape.param(full, self.tensors[key])
            return tape.params[full]
        if full not in tape.inputs:
            tape.input(self.tensors[key], name=full)
        return tape.inputs[full]

    def trainable_parameters(self) -> dict:
        return {self.full_name(k): self.tensors[k] for k in sorted(self.trainable)}

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.tensors):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.tensors[k]).tobytes())
        return h.hexdigest()


def group_modules(names, patterns: dict) -> dict:
    """Assign module names to sharing groups declared as glob patterns."""
    groups = {g: [] for g in patterns}
    for name in names:
        for g, pats in patterns.items():
            pats = [pats] if isinstance(pats, str) else pats
            if any(fnmatch.fnmatch(name, p) for p in pats):
                groups[g].append(name)
                break
    return groups


def _slice_rows(tape, node, m, total):
    return node if m == total else tape.matmul(_select(m, total, 0, 0, m), node)


def _slice_cols(tape, node, n, total):
    return node if n == total else tape.matmul(node, _select(total, n, 0, 0, n))


# -- ShareLoRA -------------------------------------------------------------

SHARE_MODES = ("share_A", "share_B", "share_both")


def make_sharelora_bank(name, m_max, n_max, r, mode, rng: RngStream) -> SharedBank:
    if mode not in SHARE_MODES:
        raise AdapterError(f"mode must be one of {SHARE_MODES}")
    t = {}
    if mode in ("share_A", "share_both"):
        t["A"] = kaiming_uniform(m_max, r, m_max, rng)
    if mode in ("share_B", "share_both"):
        t["B"] = np.zeros((r, n_max))
    return SharedBank(name, t, trainable=t.keys())


def sharelora_delta(A_full, B_full, m: int, n: int, scaling: float) -> np.ndarray:
    if m > A_full.shape[0] or n > B_full.shape[1]:
        raise AdapterError("slice exceeds the shared tensor")
    return scaling * A_full[:m, :] @ B_full[:, :n]


class ShareLoRAAdapter(LoRAAdapter):
    kind = "sharelora"

    def __init__(self, spec, base, rng=None, init=True, bank: SharedBank | None = None):
        self.bank = bank
        super().__init__(spec, base, rng, init)

    @property
    def mode(self):
        return self.vparam("mode", "share_A")

    def init_weights(self):
        if self.bank is None:
            self.bank = make_sharelora_bank("sharelora", self.m, self.n, self.r, self.mode, self.rng)
        self.bank.refcount += 1
        self.params, self.shared, self.trainable = {}, {}, set()
        if "A" in self.bank.tensors:
            if self.bank.tensors["A"].shape[0] < self.m:
                raise AdapterError("input dim exceeds the shared bank")
            self.shared["A"] = (self.bank, "A")
        else:
            self.params["A"] = kaiming_uniform(self.m, self.r, self.m, self.rng)
        if "B" in self.bank.tensors:
            if self.bank.tensors["B"].shape[1] < self.n:
                raise AdapterError("output dim exceeds the shared bank")
            self.shared["B"] = (self.bank, "B")
        else:
            self.params["B"] = np.zeros((self.r, self.n))
        self.trainable = set(self.params)

    def delta_weight(self):
        return sharelora_delta(self.tensor("A"), self.tensor("B"), self.m, self.n, self.scaling)

    def adapter_graph(self, tape, x, nodes, train=False):
        A = _slice_rows(tape, nodes["A"], self.m, nodes["A"].shape[0])
        B = _slice_cols(tape, nodes["B"], self.n, nodes["B"].shape[1])
        return tape.scale(tape.matmul(tape.matmul(x, A), B), self.scaling)


# -- VeRA / Tied-LoRA -------------------------------------------------------

VERA_TENSORS = ("A", "B", "d", "b")


def make_vera_bank(name, m_max, n_max, r, rng: RngStream, trainable=()) -> SharedBank:
    return SharedBank(
        name,
        {"A": kaiming_uniform(m_max, r, m_max, rng), "B": kaiming_uniform(r, n_max, r, rng)},
        trainable=trainable,
    )


def vera_delta(A_full, B_full, d, b, m: int, n: int, scaling: float) -> np.ndarray:
    d = np.asarray(d).reshape(1, -1)
    b = np.asarray(b).reshape(1, -1)
    return scaling * (A_full[:m, :] * d) @ (B_full[:, :n] * b)


class VeRAAdapter(LoRAAdapter):
    """Frozen shared random factors modulated by trainable vectors.

    ``freeze`` (variant param) lists which of A, B, d, b are frozen; the
    default ``{"A", "B"}`` is VeRA, other subsets give the Tied-LoRA family.
    The first trainable tensor in the order b, B, d, A starts at zero so the
    initial delta vanishes.
    """

    kind = "vera"

    def __init__(self, spec, base, rng=None, init=True, bank: SharedBank | None = None):
        self.bank = bank
        super().__init__(spec, base, rng, init)

    def init_weights(self):
        freeze = set(self.vparam("freeze", ("A", "B")))
        if freeze - set(VERA_TENSORS):
            raise AdapterError(f"unknown tensors in freeze: {sorted(freeze - set(VERA_TENSORS))}")
        if freeze >= set(VERA_TENSORS):
            raise AdapterError("at least one of A, B, d, b must stay trainable")
        if self.bank is None:
            self.bank = make_vera_bank("vera", self.m, self.n, self.r, self.rng)
        self.bank.refcount += 1
        self.bank.trainable = {k for k in ("A", "B") if k not in freeze}
        self.shared = {"A": (self.bank, "A"), "B": (self.bank, "B")}
        self.params = {"d": np.full((1, self.r), 0.1), "b": np.ones((1, self.n))}
        self.trainable = {k for k in ("d", "b") if k not in freeze}
        zero_first = next(k for k in ("b", "B", "d", "A") if k not in freeze)
        if zero_first in ("d", "b"):
            self.params[zero_first][:] = 0.0
        else:
            self.bank.tensors[zero_first][:] = 0.0
        self.freeze = freeze

    def trainable_count_formula(self, m_max=None, n_max=None) -> int:
        m_max = m_max or self.bank.tensors["A"].shape[0]
        n_max = n_max or self.bank.tensors["B"].shape[1]
        sizes = {"A": m_max * self.r, "B": self.r * n_max, "d": self.r, "b": self.n}
        return sum(v for k, v in sizes.items() if k not in self.freeze)

    def delta_weight(self):
        return vera_delta(self.tensor("A"), self.tensor("B"), self.params["d"], self.params["b"], self.m, self.n, self.scaling)

    def adapter_graph(self, tape, x, nodes, train=False):
        A = _slice_rows(tape, nodes["A"], self.m, nodes["A"].shape[0])
        B = _slice_cols(tape, nodes["B"], self.n, nodes["B"].shape[1])
        h = tape.mul(tape.matmul(x, A), nodes["d"])
        return tape.scale(tape.mul(tape.matmul(h, B), nodes["b"]), self.scaling)


def tied_lora_configure(adapter: VeRAAdapter, freeze) -> VeRAAdapter:
    """Re-initialize ``adapter`` with a new freeze set (Tied-LoRA family)."""
    adapter.spec = adapter.spec.with_params(freeze=tuple(sorted(freeze)))
    adapter.bank.refcount -= 1
    adapter.init_weights()
    return adapter


# -- RaSA ----------------------------------------------------------------

def make_rasa_bank(name, m, n, k, layers, rng: RngStream) -> SharedBank:
    return SharedBank(
        name,
        {"A": kaiming_uniform(m, k * layers, m, rng), "B": kaiming_uniform(k * layers, n, k * layers, rng)},
        trainable=("A", "B"),
    )


def rasa_delta(A_local, A_shared, D, B_local, B_shared) -> np.ndarray:
    """``[A_L | A_S] diag(D) [B_L ; B_S]`` (row-batch orientation)."""
    A = np.hstack([A_local, A_shared])
    B = np.vstack([B_local, B_shared])
    return (A * np.asarray(D).reshape(1, -1)) @ B


class RaSAAdapter(LoRAAdapter):
    """Local rank ``r - k`` plus a shared pool of ``k * L`` ranks.

    Every sharer must have the same (m, n).  The printed form carries no
    alpha scaling, so none is applied.
    """

    kind = "rasa"

    def __init__(self, spec, base, rng=None, init=True, bank: SharedBank | None = None):
        self.bank = bank
        super().__init__(spec, base, rng, init)

    @property
    def k(self) -> int:
        return int(self.vparam("shared_rank", 1))

    @property
    def layers(self) -> int:
        return int(self.vparam("layers", 1))

    def init_weights(self):
        k, r = self.k, self.r
        if k >= r:
            raise AdapterError("shared rank k must be smaller than r")
        if self.bank is None:
            self.bank = make_rasa_bank("rasa", self.m, self.n, k, self.layers, self.rng)
        if self.bank.tensors["A"].shape[0] != self.m or self.bank.tensors["B"].shape[1] != self.n:
            raise AdapterError("RaSA sharers must have identical shapes")
        self.bank.refcount += 1
        pool = self.bank.tensors["A"].shape[1]
        self.shared = {"AS": (self.bank, "A"), "BS": (self.bank, "B")}
        self.params = {
            "AL": kaiming_uniform(self.m, r - k, self.m, self.rng),
            "BL": kaiming_uniform(r - k, self.n, r - k, self.rng),
            "D": np.zeros((1, r - k + pool)),
        }
        self.trainable = {"AL", "BL", "D"}

    def effective_rank_bound(self) -> int:
        return self.r - self.k + self.bank.tensors["A"].shape[1]

    def delta_weight(self):
        return rasa_delta(self.params["AL"], self.tensor("AS"), self.params["D"], self.params["BL"], self.tensor("BS"))

    def adapter_graph(self, tape, x, nodes, train=False):
        rl = self.r - self.k
        pool = nodes["AS"].shape[1]
        d_local = tape.matmul(nodes["D"], _select(rl + pool, rl, 0, 0, rl))
        d_shared = tape.matmul(nodes["D"], _select(rl + pool, pool, rl, 0, pool))
        local = tape.matmul(tape.mul(tape.matmul(x, nodes["AL"]), d_local), nodes["BL"])
        shared = tape.matmul(tape.mul(tape.matmul(x, nodes["AS"]), d_shared), nodes["BS"])
        return tape.add(local, shared)


# -- DenseLoRA -----------------------------------------------------------

def make_dense_bank(name, m, n, r, rng: RngStream, trainable=True) -> SharedBank:
    return SharedBank(
        name,
        {"A": kaiming_uniform(m, r, m, rng), "B": kaiming_uniform(r, n, r, rng)},
        trainable=("A", "B") if trainable else (),
    )


def denselora_delta(A_shared, C, B_shared, scaling: float) -> np.ndarray:
    return scaling * A_shared @ C @ B_shared


class DenseLoRAAdapter(LoRAAdapter):
    kind = "denselora"
    # the shared bank may be wider than the layer; rank(dW) <= min(m, n, r) regardless
    max_rank_check = False

    def __init__(self, spec, base, rng=None, init=True, bank: SharedBank | None = None):
        self.bank = bank
        super().__init__(spec, base, rng, init)

    def init_weights(self):
        if self.bank is None:
            self.bank = make_dense_bank("denselora", self.m, self.n, self.r, self.rng, self.vparam("train_shared", True))
        self.bank.refcount += 1
        self.shared = {"A": (self.bank, "A"), "B": (self.bank, "B")}
        self.params = {"C": np.zeros((self.r, self.r))}
        self.trainable = {"C"}

    def delta_weight(self):
        return denselora_delta(self.tensor("A"), self.params["C"], self.tensor("B"), self.scaling)

    def adapter_graph(self, tape, x, nodes, train=False):
        h = tape.matmul(tape.matmul(x, nodes["A"]), nodes["C"])
        return tape.scale(tape.matmul(h, nodes["B"]), self.scaling)


# -- ProLoRA -------------------------------------------------------------

def roll_matrix(size: int, shift: int) -> np.ndarray:
    """Permutation ``P`` with ``P @ X == np.roll(X, shift, axis=0)``."""
    return np.roll(np.eye(size), shift, axis=0)


def prolora_assemble(A_local, A_shared0, B_local, B_shared0, chunks: int, stride_a: int = 1, stride_b: int = 1):
    """``A = [A_L | Roll(A_S0, d_A) | ... | Roll(A_S0, (P-1) d_A)]``.

    ``B`` is the matching row stack; its shifts run along the output
    dimension.
    """
    if chunks < 2:
        raise AdapterError("ProLoRA needs at least two chunks")
    if A_shared0.shape[1] != B_shared0.shape[0] or A_local.shape[1] != B_local.shape[0]:
        raise AdapterError("ProLoRA chunk ranks do not match")
    A = np.hstack([A_local] + [np.roll(A_shared0, i * stride_a, axis=0) for i in range(1, chunks)])
    B = np.vstack([B_local] + [np.roll(B_shared0, i * stride_b, axis=1) for i in range(1, chunks)])
    return A, B


class ProLoRAAdapter(LoRAAdapter):
    kind = "prolora"

    @property
    def chunks(self) -> int:
        return int(self.vparam("chunks", 2))

    @property
    def local_rank(self) -> int:
        return int(self.vparam("local_rank", self.r // 2))

    def init_weights(self):
        P, rl = self.chunks, self.local_rank
        if P < 2 or (self.r - rl) % (P - 1) or rl < 0 or rl >= self.r:
            raise AdapterError("rank - local_rank must split evenly into chunks - 1 shared chunks")
        rs = (self.r - rl) // (P - 1)
        self.params = {
            "AL": kaiming_uniform(self.m, rl, self.m, self.rng),
            "AS": kaiming_uniform(self.m, rs, self.m, self.rng),
            "BL": np.zeros((rl, self.n)),
            "BS": np.zeros((rs, self.n)),
        }
        self.trainable = set(self.params)

    def factors(self):
        p = self.params
        return prolora_assemble(p["AL"], p["AS"], p["BL"], p["BS"], self.chunks,
                                int(self.vparam("stride_a", 1)), int(self.vparam("stride_b", 1)))

    def delta_weight(self):
        A, B = self.factors()
        return self.scaling * A @ B

    def adapter_graph(self, tape, x, nodes, train=False):
        sa, sb = int(self.vparam("stride_a", 1)), int(self.vparam("stride_b", 1))
        out = tape.matmul(tape.matmul(x, nodes["AL"]), nodes["BL"])
        for i in range(1, self.chunks):
            Ai = tape.matmul(roll_matrix(self.m, i * sa), nodes["AS"])
            Bi = tape.matmul(nodes["BS"], roll_matrix(self.n, i * sb).T)
            out = tape.add(out, tape.matmul(tape.matmul(x, Ai), Bi))
        return tape.scale(out, self.scaling)


# -- RandLoRA ------------------------------------------------------------

def randlora_num_bases(d_s: int, r: int, cap: int | None = None) -> int:
    """``ceil(min(d_s, U) / r)``."""
    d = d_s if cap is None else min(d_s, cap)
    return math.ceil(d / r)


def make_randlora_bank(name, module_dims, r, rng: RngStream, cap: int | None = None) -> SharedBank:
    """Bases sized from the module with the largest output dimension."""
    m_big, n_big = max(module_dims, key=lambda mn: mn[1])
    d_small = min(m_big, n_big)
    d_large = max(max(max(mn) for mn in module_dims), d_small)
    nb = randlora_num_bases(d_small, r, cap)
    small_cap = max(min(mn) for mn in module_dims)
    t = {"A": kaiming_uniform(max(d_small, small_cap), r, max(d_small, small_cap), rng)}
    for i in range(nb):
        t[f"B{i}"] = kaiming_uniform(r, d_large, r, rng)
    bank = SharedBank(name, t)
    bank.num_bases = nb
    return bank


def randlora_delta(A_shared, B_bases, gammas, lambdas, m: int, n: int) -> np.ndarray:
    """``(2/sqrt(n_b)) sum_i diag(g_i) A[:m] diag(l_i) B_i[:, :n]``.

    When ``m > n`` the bases are swapped: ``B_i^T`` supplies the input side
    and ``A^T`` the output side.
    """
    nb = len(B_bases)
    total = 0.0
    for Bi, g, lam in zip(B_bases, gammas, lambdas):
        g, lam = np.asarray(g).reshape(-1, 1), np.asarray(lam).reshape(1, -1)
        if m <= n:
            left, right = A_shared[:m, :], Bi[:, :n]
        else:
            left, right = Bi.T[:m, :], A_shared.T[:, :n]
        total = total + (g * left * lam) @ right
    return (2.0 / math.sqrt(nb)) * total


class RandLoRAAdapter(LoRAAdapter):
    kind = "randlora"
    max_rank_check = False

    def __init__(self, spec, base, rng=None, init=True, bank: SharedBank | None = None):
        self.bank = bank
        super().__init__(spec, base, rng, init)

    @property
    def num_bases(self) -> int:
        nb = getattr(self.bank, "num_bases", None)
        return nb if nb is not None else sum(1 for k in self.shared if k.startswith("B"))

    def init_weights(self):
        if self.bank is None:
            self.bank = make_randlora_bank("randlora", [(self.m, self.n)], self.r, self.rng, self.vparam("cap"))
        self.bank.refcount += 1
        self.shared = {"A": (self.bank, "A")}
        self.params = {}
        for i in range(self.num_bases):
            self.shared[f"B{i}"] = (self.bank, f"B{i}")
            self.params[f"gamma{i}"] = np.ones((1, self.m))
            self.params[f"lambda{i}"] = np.zeros((1, self.r))
        self.trainable = set(self.params)

    @property
    def scaling(self) -> float:
        return 2.0 / math.sqrt(self.num_bases)

    def delta_weight(self):
        nb = self.num_bases
        return randlora_delta(
            self.tensor("A"), [self.tensor(f"B{i}") for i in range(nb)],
            [self.params[f"gamma{i}"] for i in range(nb)], [self.params[f"lambda{i}"] for i in range(nb)],
            self.m, self.n,
        )

    def adapter_graph(self, tape, x, nodes, train=False):
        out = None
        for i in range(self.num_bases):
            if self.m <= self.n:
                left = _slice_rows(tape, nodes["A"], self.m, nodes["A"].shape[0])
                right = _slice_cols(tape, nodes[f"B{i}"], self.n, nodes[f"B{i}"].shape[1])
            else:
                bt = tape.transpose(nodes[f"B{i}"])
                left = _slice_rows(tape, bt, self.m, bt.shape[0])
                at = tape.transpose(nodes["A"])
                right = _slice_cols(tape, at, self.n, at.shape[1])
            h = tape.mul(tape.matmul(tape.mul(x, nodes[f"gamma{i}"]), left), nodes[f"lambda{i}"])
            y = tape.matmul(h, right)
            out = y if out is None else tape.add(out, y)
        return tape.scale(out, self.scaling)
