"""Mixture-of-experts adapters: routing, auxiliary losses and structural variants.

Rows of the batch are tokens.  Experts only ever see the rows routed to
them; ``MoEAdapter.counter`` tallies those rows so sparsity can be
checked exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..linalg import as_mat, kaiming_uniform, svd
from .base import AdapterError, LoRAAdapter, NotMaterializable

MOLA_PATTERNS = ("rectangle", "triangle", "inverted_triangle", "diamond")


def softmax_rows(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def topk_mask(probs, k: int) -> np.ndarray:
    """Per-row top-k indicator; ties go to the lower expert index."""
    probs = as_mat(probs)
    N = probs.shape[1]
    if not 1 <= k <= N:
        raise AdapterError(f"need 1 <= k <= {N}")
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    mask = np.zeros_like(probs)
    np.put_along_axis(mask, order, 1.0, axis=1)
    return mask


def route_topk(gate_logits, k: int, renormalize: bool = True) -> np.ndarray:
    """Softmax gate kept on the top-k experts of each row."""
    p = softmax_rows(as_mat(gate_logits))
    w = p * topk_mask(p, k)
    if renormalize:
        w = w / w.sum(axis=1, keepdims=True)
    return w


@dataclass(frozen=True)
class RoutingStats:
    """``f_i``: fraction of tokens routed to expert i; ``p_i``: mean gate probability."""

    f: np.ndarray
    p: np.ndarray

    @classmethod
    def from_routing(cls, probs, weights) -> "RoutingStats":
        probs, weights = as_mat(probs), as_mat(weights)
        return cls(f=(weights > 0).mean(axis=0), p=probs.mean(axis=0))


def balance_loss(stats: RoutingStats, N: int | None = None) -> float:
    """``N * sum_i f_i p_i``; equals k under uniform routing."""
    N = len(stats.f) if N is None else N
    return float(N * np.sum(stats.f * stats.p))


class ExpertCounter:
    def __init__(self):
        self.rows = 0
        self.per_batch: list[int] = []

    def record(self, rows: int):
        self.rows += rows
        self.per_batch[-1] += rows

    def new_batch(self):
        self.per_batch.append(0)


def moe_forward(As, Bs, x, weights, scaling: float, counter: ExpertCounter | None = None) -> np.ndarray:
    """``sum_i w_i(x) * s * x A_i B_i`` touching only the rows routed to each expert."""
    x, weights = as_mat(x), as_mat(weights)
    out = np.zeros((x.shape[0], Bs[0].shape[1]))
    if counter is not None:
        counter.new_batch()
    for i, (A, B) in enumerate(zip(As, Bs)):
        rows = np.flatnonzero(weights[:, i])
        if rows.size == 0:
            continue
        if counter is not None:
            counter.record(rows.size)
        out[rows] += weights[rows, i:i + 1] * (scaling * (x[rows] @ A) @ B)
    return out


def hydra_forward(shared_A, heads, weights, x, scaling: float) -> np.ndarray:
    """One shared down-projection with a routed mixture of up-projection heads."""
    h = as_mat(x) @ as_mat(shared_A)
    weights = as_mat(weights)
    out = np.zeros((h.shape[0], heads[0].shape[1]))
    for i, B in enumerate(heads):
        out += weights[:, i:i + 1] * (h @ B)
    return scaling * out


# -- auxiliary losses --------------------------------------------------------

def moelora_contrastive(groups, tau: float = 0.1) -> float:
    """InfoNCE over expert outputs.

    Each output is a query; other outputs of the same expert are positives,
    outputs of other experts negatives.  Similarity is the cosine divided by
    ``tau``; the loss is averaged over queries that have a positive.
    """
    if tau <= 0:
        raise AdapterError("temperature must be positive")
    embs, labels = [], []
    for gi, g in enumerate(groups):
        g = as_mat(g)
        embs.append(g)
        labels += [gi] * g.shape[0]
    if not embs:
        raise AdapterError("no expert outputs")
    z = np.vstack(embs)
    z = z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    labels = np.asarray(labels)
    sim = z @ z.T / tau
    losses = []
    for q in range(len(labels)):
        others = np.arange(len(labels)) != q
        pos = others & (labels == labels[q])
        if not pos.any():
            continue
        s = sim[q, others]
        top = s.max()
        log_all = top + np.log(np.sum(np.exp(s - top)))
        sp = sim[q, pos]
        log_pos = top + np.log(np.sum(np.exp(sp - top)))
        losses.append(log_all - log_pos)
    if not losses:
        raise AdapterError("contrastive loss needs an expert with at least two outputs")
    return float(np.mean(losses))


def loramoe_importance(weights, sample_types, n_types: int) -> np.ndarray:
    """``Q[n, m]``: mean routed weight of expert n over samples of type m."""
    weights = as_mat(weights)
    sample_types = np.asarray(sample_types)
    Q = np.zeros((weights.shape[1], n_types))
    for t in range(n_types):
        rows = sample_types == t
        if rows.any():
            Q[:, t] = weights[rows].mean(axis=0)
    return Q


def loramoe_constraint(Q, expert_types, delta: float = 0.1) -> float:
    """``var(Z) / mean(Z)`` with ``Z = I * Q`` and ``I = 1 + delta`` on matching types."""
    Q = as_mat(Q)
    expert_types = np.asarray(expert_types).reshape(-1, 1)
    match = expert_types == np.arange(Q.shape[1]).reshape(1, -1)
    Z = np.where(match, 1.0 + delta, 1.0 - delta) * Q
    mu = Z.mean()
    if mu == 0.0:
        raise AdapterError("LoRAMoE constraint undefined for zero mean")
    return float(Z.var() / mu)


def adamole_route(gate_logits, x, tau_max: float, w_tau, b_tau: float = 0.0, renormalize: bool = True) -> np.ndarray:
    """Activate experts whose probability exceeds ``tau_max * sigmoid(x w + b)``.

    Rows with no expert above the threshold fall back to their top-1 expert.
    """
    p = softmax_rows(as_mat(gate_logits))
    thr = tau_max / (1.0 + np.exp(-(as_mat(x) @ np.asarray(w_tau, dtype=np.float64).reshape(-1, 1) + b_tau)))
    mask = (p > thr).astype(float)
    empty = mask.sum(axis=1) == 0
    if empty.any():
        mask[empty] = topk_mask(p[empty], 1)
    w = p * mask
    if renormalize:
        w = w / w.sum(axis=1, keepdims=True)
    return w


def mola_allocate(pattern: str, L: int, total: int) -> list[int]:
    """Per-layer expert counts shaped by ``pattern``; every layer gets at least one.

    The surplus beyond one per layer is split in proportion to the pattern's
    layer weights by largest remainder (ties to the lower layer), which keeps
    monotone patterns monotone.
    """
    if pattern not in MOLA_PATTERNS:
        raise AdapterError(f"pattern must be one of {MOLA_PATTERNS}")
    if L < 1 or total < L:
        raise AdapterError("need total >= L >= 1")
    idx = np.arange(L)
    w = {
        "rectangle": np.ones(L),
        "triangle": idx + 1.0,
        "inverted_triangle": L - idx + 0.0,
        "diamond": np.minimum(idx + 1, L - idx) + 0.0,
    }[pattern]
    extra = total - L
    share = extra * w / w.sum()
    base = np.floor(share).astype(int)
    left = extra - int(base.sum())
    order = sorted(range(L), key=lambda i: (-(share[i] - base[i]), i))
    for i in order[:left]:
        base[i] += 1
    return [int(c) + 1 for c in base]


# -- adapters ------------------------------------------------------------

class MoEAdapter(LoRAAdapter):
    """Routed LoRA experts with a linear softmax gate.

    Variant params: ``experts`` (N), ``top_k``, ``expert_rank`` (defaults to
    ``spec.rank``), ``renormalize``, ``balance_reg`` and ``router``
    (``"topk"`` or ``"adamole"`` with ``tau_max``).
    """

    kind = "moelora"
    materializable = False
    max_rank_check = False

    @property
    def N(self) -> int:
        return int(self.vparam("experts", 4))

    @property
    def k(self) -> int:
        return int(self.vparam("top_k", 2))

    @property
    def r_e(self) -> int:
        return int(self.vparam("expert_rank", self.r))

    @property
    def scaling(self):
        return self.spec.alpha / self.r_e

    def init_weights(self):
        if not 1 <= self.k <= self.N:
            raise AdapterError("need 1 <= top_k <= experts")
        self.params = {}
        for i in range(self.N):
            self.params[f"A{i}"] = kaiming_uniform(self.m, self.r_e, self.m, self.rng)
            self.params[f"B{i}"] = np.zeros((self.r_e, self.n))
        self.params["gate"] = self.rng.normal(0.02, (self.m, self.N))
        self.params["gate_bias"] = np.zeros((1, self.N))
        if self.vparam("router", "topk") == "adamole":
            self.params["tau_w"] = np.zeros((self.m, 1))
        self.trainable = set(self.params)
        self.counter = ExpertCounter()
        self.last_stats: RoutingStats | None = None

    def expert_factors(self):
        return [self.params[f"A{i}"] for i in range(self.N)], [self.params[f"B{i}"] for i in range(self.N)]

    def route(self, x) -> tuple[np.ndarray, np.ndarray]:
        """``(probabilities, routed weights)`` for a batch."""
        logits = as_mat(x) @ self.params["gate"] + self.params["gate_bias"]
        renorm = bool(self.vparam("renormalize", True))
        if self.vparam("router", "topk") == "adamole":
            w = adamole_route(logits, x, float(self.vparam("tau_max", 0.5)), self.params["tau_w"], 0.0, renorm)
        else:
            w = route_topk(logits, self.k, renorm)
        return softmax_rows(logits), w

    def delta_weight(self):
        raise NotMaterializable("routed experts have no input-independent delta")

    def _mixture(self, tape, h_fn, x, weights, nodes):
        """Per-expert gather, expert map, weighting and scatter back."""
        b = x.shape[0]
        self.counter.new_batch()
        out = None
        for i in range(self.N):
            rows = np.flatnonzero(weights.value[:, i])
            if rows.size == 0:
                continue
            self.counter.record(rows.size)
            gather = np.zeros((rows.size, b))
            gather[np.arange(rows.size), rows] = 1.0
            xi = tape.matmul(gather, x)
            wi = tape.matmul(gather, tape.matmul(weights, np.eye(self.N)[:, i:i + 1]))
            yi = tape.matmul(gather.T, tape.mul(h_fn(i, xi), wi))
            out = yi if out is None else tape.add(out, yi)
        if out is None:
            return tape.input(np.zeros((b, self.n)))
        return tape.scale(out, self.scaling)

    def _weights_graph(self, tape, x, nodes):
        logits = tape.add(tape.matmul(x, nodes["gate"]), nodes["gate_bias"])
        probs = tape.softmax(logits)
        _, w_val = self.route(x.value)
        mask = (w_val > 0).astype(float)
        kept = tape.mul(probs, mask)
        if bool(self.vparam("renormalize", True)):
            kept = tape.div(kept, tape.sum_cols(kept))
        self.last_stats = RoutingStats.from_routing(probs.value, w_val)
        self._probs_node, self._f = probs, self.last_stats.f
        return kept

    def adapter_graph(self, tape, x, nodes, train=False):
        weights = self._weights_graph(tape, x, nodes)
        return self._mixture(tape, lambda i, xi: tape.matmul(tape.matmul(xi, nodes[f"A{i}"]), nodes[f"B{i}"]), x, weights, nodes)

    def regularizer(self, tape, nodes):
        lam = float(self.vparam("balance_reg", 0.0))
        if lam == 0.0 or getattr(self, "_probs_node", None) is None:
            return None
        b = self._probs_node.shape[0]
        p_mean = tape.scale(tape.sum_rows(self._probs_node), 1.0 / b)
        return tape.scale(tape.sum(tape.mul(p_mean, self._f.reshape(1, -1))), lam * self.N)


class HydraLoRAAdapter(MoEAdapter):
    """Shared ``A`` with routed ``B`` heads; dense softmax routing by default."""

    kind = "hydralora"

    @property
    def k(self) -> int:
        return int(self.vparam("top_k", self.N))

    def init_weights(self):
        super().init_weights()
        A0 = self.params.pop("A0")
        for i in range(1, self.N):
            del self.params[f"A{i}"]
        self.params["A"] = A0
        self.trainable = set(self.params)

    def expert_factors(self):
        return [self.params["A"]] * self.N, [self.params[f"B{i}"] for i in range(self.N)]

    def adapter_graph(self, tape, x, nodes, train=False):
        weights = self._weights_graph(tape, x, nodes)
        return self._mixture(tape, lambda i, xi: tape.matmul(tape.matmul(xi, nodes["A"]), nodes[f"B{i}"]), x, weights, nodes)


def goat_factors(base, N: int, r_e: int, s: float):
    """Expert i takes singular triplets ``[i r_e, (i+1) r_e)`` scaled by ``sqrt(1/s)``."""
    W = as_mat(base)
    if N * r_e > min(W.shape):
        raise AdapterError("N * r_e exceeds min(m, n)")
    res = svd(W)
    c = np.sqrt(1.0 / s)
    As, Bs = [], []
    for i in range(N):
        sl = slice(i * r_e, (i + 1) * r_e)
        root = np.sqrt(res.S[sl])
        As.append(c * res.U[:, sl] * root)
        Bs.append(c * (res.V[:, sl] * root).T)
    return As, Bs


class GOATAdapter(MoEAdapter):
    """Experts seeded from disjoint SVD segments of the frozen weight.

    The router starts at zero, so the first forward routes every token to
    experts ``0..k-1`` with weight ``1/k`` each (lower-index tie rule); the
    base is adjusted by exactly that delta.
    """

    kind = "goat"

    def init_weights(self):
        super().init_weights()
        s = float(self.vparam("goat_s", self.N / self.k))
        As, Bs = goat_factors(self.base, self.N, self.r_e, s)
        for i in range(self.N):
            self.params[f"A{i}"], self.params[f"B{i}"] = As[i], Bs[i]
        self.params["gate"] = np.zeros((self.m, self.N))
        initial = sum(As[i] @ Bs[i] for i in range(self.k)) * (self.scaling / self.k)
        self.base = self.base - initial
        self.base_adjusted = True
