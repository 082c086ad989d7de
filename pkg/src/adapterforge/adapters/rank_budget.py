"""Adaptive rank allocation: masking, growth and one-shot allocation rules."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from ..linalg import RANK_RTOL, LinalgError, RngStream, as_mat, kaiming_uniform, qr
from .base import AdapterError, LoRAAdapter


def round_half_up(x) -> int:
    return int(math.floor(x + Fraction(1, 2) if isinstance(x, Fraction) else x + 0.5))


def orth_residual(A, B) -> float:
    """``||A^T A - I||_F^2 + ||B^T B - I||_F^2`` with both factors column-stacked."""
    A, B = as_mat(A), as_mat(B)
    ra = A.T @ A - np.eye(A.shape[1])
    rb = B.T @ B - np.eye(B.shape[1])
    return float(np.sum(ra * ra) + np.sum(rb * rb))


def _orth_graph(tape, A, B):
    def one(node):
        eye = np.eye(node.shape[1])
        return tape.square_sum(tape.sub(tape.matmul(tape.transpose(node), node), eye))
    return tape.add(one(A), one(B))


def _random_orthonormal(rows, cols, rng: RngStream) -> np.ndarray:
    q, _ = qr(rng.normal(1.0, (rows, cols)))
    return q


class SvdAdapter(LoRAAdapter):
    """``dW = A diag(mask * D) B^T`` with ``A`` (m x r) and ``B`` (n x r).

    ``A`` and ``B`` start with orthonormal columns and ``D = 0``, so the
    orthogonality residual and the delta both vanish at init.  Masked
    triplets contribute exactly zero.
    """

    kind = "adalora"

    def init_weights(self):
        self.params = {
            "A": _random_orthonormal(self.m, self.r, self.rng),
            "B": _random_orthonormal(self.n, self.r, self.rng),
            "D": np.zeros((1, self.r)),
        }
        self.trainable = {"A", "B", "D"}
        self.mask = np.ones((1, self.r))
        self.added_at: list[int | None] = [None] * self.r

    @property
    def current_rank(self) -> int:
        return self.params["D"].shape[1]

    @property
    def active(self) -> int:
        return int(self.mask.sum())

    def delta_weight(self):
        p = self.params
        return (p["A"] * (p["D"] * self.mask)) @ p["B"].T

    def adapter_graph(self, tape, x, nodes, train=False):
        d = tape.mul(nodes["D"], self.mask)
        h = tape.mul(tape.matmul(x, nodes["A"]), d)
        return tape.matmul(h, tape.transpose(nodes["B"]))

    def orth_residual(self) -> float:
        return orth_residual(self.params["A"], self.params["B"])

    def regularizer(self, tape, nodes):
        lam = float(self.vparam("orth_reg", 0.0))
        if lam == 0.0:
            return None
        return tape.scale(_orth_graph(tape, nodes["A"], nodes["B"]), lam)

    def grow(self, t: int):
        """Append one rank-one triplet with a tiny ``d`` (IncreLoRA)."""
        a = kaiming_uniform(self.m, 1, self.m, self.rng)
        b = kaiming_uniform(self.n, 1, self.n, self.rng)
        p = self.params
        p["A"] = np.hstack([p["A"], a / np.linalg.norm(a)])
        p["B"] = np.hstack([p["B"], b / np.linalg.norm(b)])
        p["D"] = np.hstack([p["D"], [[float(self.vparam("grow_d_init", 1e-5))]]])
        self.mask = np.hstack([self.mask, [[1.0]]])
        self.added_at.append(t)

    def lr_multipliers(self):
        warm = int(self.vparam("grow_warmup", 50))
        if all(t0 is None for t0 in self.added_at):
            return {}
        scale = np.array([[1.0 if t0 is None else min(1.0, max(self.step - t0, 0) / warm) for t0 in self.added_at]])
        return {"A": scale, "B": scale, "D": scale}

    def extra_state(self):
        return {"mask": self.mask.reshape(-1).tolist(), "added_at": list(self.added_at)}

    def load_extra_state(self, extras):
        self.mask = np.asarray(extras["mask"], dtype=np.float64).reshape(1, -1)
        self.added_at = list(extras["added_at"])


class IncreLoRAAdapter(SvdAdapter):
    """Starts small and grows by rank-one triplets; ``spec.rank`` is the start rank."""

    kind = "increlora"


def adalora_reg_loss(adapters, lam: float) -> float:
    return lam * sum(orth_residual(a.params["A"], a.params["B"]) for a in adapters)


# -- budget scheduler ------------------------------------------------------

@dataclass(frozen=True)
class BudgetSchedule:
    """Cubic budget decay from ``b0`` to ``bT`` between ``t_i`` and ``T - t_f``."""

    b0: int
    bT: int
    t_i: int
    t_f: int
    T: int

    def __post_init__(self):
        if self.t_i < 0 or self.t_f < 0 or self.t_i + self.t_f > self.T:
            raise AdapterError("need 0 <= t_i, t_f and t_i + t_f <= T")
        if not self.b0 >= self.bT >= 0:
            raise AdapterError("need b0 >= bT >= 0")

    @property
    def degenerate(self) -> bool:
        """No anneal window: the budget drops straight from ``b0`` to ``bT``."""
        return self.T - self.t_i - self.t_f == 0

    @classmethod
    def per_adapter(cls, init_rank, target_rank, n_adapters, t_i=100, t_f=900, T=2000):
        return cls(init_rank * n_adapters, target_rank * n_adapters, t_i, t_f, T)


def budget_at(schedule: BudgetSchedule, t: int) -> int:
    """Active-triplet budget at step ``t``; anneal values round half-up."""
    s = schedule
    if not 0 <= t <= s.T:
        raise AdapterError(f"t={t} outside [0, {s.T}]")
    if t < s.t_i:
        return s.b0
    if t >= s.T - s.t_f:
        return s.bT
    frac = 1 - Fraction(t - s.t_i, s.T - s.t_i - s.t_f)
    return round_half_up(s.bT + (s.b0 - s.bT) * frac**3)


# -- sensitivity ------------------------------------------------------------

@dataclass
class SensitivityState:
    beta1: float = 0.85
    beta2: float = 0.85
    ibar: dict = field(default_factory=dict)
    ubar: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise AdapterError("betas must lie in (0, 1)")

    def score(self, key) -> np.ndarray:
        return self.ibar[key] * self.ubar[key]


def sensitivity_update(stats: SensitivityState, key, w, g) -> SensitivityState:
    """Smoothed importance and uncertainty for one tensor.

    ``I = |w g|``, ``Ibar_t = b1 Ibar + (1-b1) I`` and
    ``Ubar_t = b2 Ubar + (1-b2) |I - Ibar_{t-1}|``.
    """
    inst = np.abs(np.asarray(w) * np.asarray(g))
    prev_i = stats.ibar.get(key)
    if prev_i is None or prev_i.shape != inst.shape:
        prev_i = _resize(prev_i, inst.shape)
    prev_u = _resize(stats.ubar.get(key), inst.shape)
    stats.ubar[key] = stats.beta2 * prev_u + (1 - stats.beta2) * np.abs(inst - prev_i)
    stats.ibar[key] = stats.beta1 * prev_i + (1 - stats.beta1) * inst
    return stats


def _resize(old, shape):
    """Zero-pad smoothed stats after a rank change."""
    out = np.zeros(shape)
    if old is not None:
        sl = tuple(slice(0, min(a, b)) for a, b in zip(old.shape, shape))
        out[sl] = old[sl]
    return out


def triplet_importance(s_a_col, s_b_col, s_d) -> float:
    """``s(d) + mean s(a) + mean s(b)`` for one singular triplet."""
    return float(s_d + np.mean(s_a_col) + np.mean(s_b_col))


def adapter_scores(adapter: SvdAdapter, stats: SensitivityState, prefix: str = "") -> np.ndarray:
    sa, sb, sd = (stats.score(prefix + k) for k in ("A", "B", "D"))
    return np.array([triplet_importance(sa[:, i], sb[:, i], sd[0, i]) for i in range(sd.shape[1])])


def update_adapter_stats(adapter: SvdAdapter, grads: dict, stats: SensitivityState, prefix: str = ""):
    for k in ("A", "B", "D"):
        sensitivity_update(stats, prefix + k, adapter.params[k], grads[prefix + k])


def top_b_mask(scores_per_adapter, b: int) -> list[np.ndarray]:
    """Keep the ``b`` largest scores; ties go to lower (adapter, rank) index."""
    flat = [(-float(s), i, j) for i, sc in enumerate(scores_per_adapter) for j, s in enumerate(sc)]
    if b > len(flat):
        raise AdapterError(f"budget {b} exceeds {len(flat)} available triplets")
    keep = sorted(flat)[:b]
    masks = [np.zeros((1, len(sc))) for sc in scores_per_adapter]
    for _, i, j in keep:
        masks[i][0, j] = 1.0
    return masks


def adalora_mask_step(adapters, stats: SensitivityState, schedule: BudgetSchedule, t: int, prefixes=None) -> int:
    """Mask all but the ``budget_at(t)`` most important triplets; returns the budget."""
    prefixes = prefixes or [""] * len(adapters)
    b = budget_at(schedule, t)
    scores = [adapter_scores(a, stats, p) for a, p in zip(adapters, prefixes)]
    for a, mask in zip(adapters, top_b_mask(scores, b)):
        a.mask = mask
    return b


# -- IncreLoRA --------------------------------------------------------------

def increlora_grow(modules, module_scores, t: int, t_n: int, h: int, budget_left: int):
    """Every ``t_n`` steps add one triplet to each of the top-``h`` modules.

    Returns ``(budget_left, grown_indices)``.  Ties go to the lower index.
    """
    if t_n < 1 or h < 1:
        raise AdapterError("t_n and h must be >= 1")
    if budget_left <= 0 or t % t_n:
        return budget_left, []
    order = sorted(range(len(modules)), key=lambda i: (-float(module_scores[i]), i))
    grown = order[: min(h, budget_left)]
    for i in grown:
        modules[i].grow(t)
    return budget_left - len(grown), grown


# -- SaLoRA ----------------------------------------------------------------

def _check_hc(tau, gamma, zeta):
    if tau <= 0 or not gamma < 0 < 1 < zeta:
        raise AdapterError("Hard-Concrete needs tau > 0 and gamma < 0 < 1 < zeta")


def salora_gate(log_d, u, tau=2 / 3, gamma=-0.1, zeta=1.1) -> np.ndarray:
    """Stretched and clamped Hard-Concrete sample; ``u=None`` gives the eval gate."""
    _check_hc(tau, gamma, zeta)
    log_d = np.asarray(log_d, dtype=np.float64)
    if u is None:
        pre = log_d
    else:
        u = np.asarray(u, dtype=np.float64)
        if np.any((u <= 0) | (u >= 1)):
            raise AdapterError("u must lie in (0, 1)")
        pre = (np.log(u / (1 - u)) + log_d) / tau
    return np.clip(_sigmoid(pre) * (zeta - gamma) + gamma, 0.0, 1.0)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def salora_l0(log_d, tau=2 / 3, gamma=-0.1, zeta=1.1) -> float:
    """Expected number of open gates ``sum sigmoid(log d - tau log(-gamma/zeta))``."""
    _check_hc(tau, gamma, zeta)
    return float(np.sum(_sigmoid(np.asarray(log_d) - tau * math.log(-gamma / zeta))))


def salora_reg(adapters, lam: float, beta: float, target: float) -> float:
    """``lam * sum R_orth + beta * (open fraction - target)^2``."""
    orth = sum(a.orth_residual() for a in adapters)
    total_r = sum(a.current_rank for a in adapters)
    l0 = sum(salora_l0(a.params["logd"], *a.hc) for a in adapters)
    return lam * orth + beta * (l0 / total_r - target) ** 2


class SaLoRAAdapter(SvdAdapter):
    """SVD-form adapter whose singular values pass through Hard-Concrete gates."""

    kind = "salora"

    def init_weights(self):
        super().init_weights()
        self.params["logd"] = np.full((1, self.r), float(self.vparam("logd_init", 3.0)))
        self.trainable.add("logd")
        self._gate_rng = self.rng.spawn(11)

    @property
    def hc(self):
        return (float(self.vparam("tau", 2 / 3)), float(self.vparam("gamma", -0.1)), float(self.vparam("zeta", 1.1)))

    def gate(self, u=None):
        return salora_gate(self.params["logd"], u, *self.hc)

    def delta_weight(self):
        p = self.params
        return (p["A"] * (p["D"] * self.gate())) @ p["B"].T

    def adapter_graph(self, tape, x, nodes, train=False):
        tau, gamma, zeta = self.hc
        if train:
            u = self._gate_rng.uniform(1e-6, 1 - 1e-6, (1, self.current_rank))
            pre = tape.scale(tape.add(nodes["logd"], np.log(u / (1 - u))), 1.0 / tau)
        else:
            pre = nodes["logd"]
        g = tape.clip(tape.add(tape.scale(tape.sigmoid(pre), zeta - gamma), gamma), 0.0, 1.0)
        h = tape.mul(tape.matmul(x, nodes["A"]), tape.mul(nodes["D"], g))
        return tape.matmul(h, tape.transpose(nodes["B"]))

    def regularizer(self, tape, nodes):
        lam = float(self.vparam("orth_reg", 0.0))
        beta = float(self.vparam("l0_reg", 0.0))
        target = float(self.vparam("target_fraction", 0.5))
        terms = []
        if lam:
            terms.append(tape.scale(_orth_graph(tape, nodes["A"], nodes["B"]), lam))
        if beta:
            tau, gamma, zeta = self.hc
            l0 = tape.sum(tape.sigmoid(tape.add(nodes["logd"], -tau * math.log(-gamma / zeta))))
            gap = tape.add(tape.scale(l0, 1.0 / self.current_rank), -target)
            terms.append(tape.scale(tape.mul(gap, gap), beta))
        if not terms:
            return None
        out = terms[0]
        for t in terms[1:]:
            out = tape.add(out, t)
        return out


# -- one-shot allocation rules -----------------------------------------------

def alora_importance(s_full: float, s_without: float, s_only: float) -> float:
    """``S(M) - S(M minus r_i) + S(M_{r_i})``."""
    return s_full - s_without + s_only


def gora_allocate(weights, grads, r_ref: int, r_min: int, r_max: int, budget_conserving: bool = False) -> list[int]:
    """Gradient-importance rank allocation.

    ``I_i = mean|W_i * G_i|`` normalized to ``a_i``; with
    ``P = sum (m_i + n_i) r_ref`` the rank is ``round(P a_i / sqrt(m_i + n_i))``
    clamped to ``[r_min, r_max]``.  ``budget_conserving`` divides by
    ``m_i + n_i`` instead so the parameter total matches ``P``.
    """
    if not weights or len(weights) != len(grads):
        raise AdapterError("need one gradient per weight and at least one layer")
    if not 1 <= r_min <= r_max:
        raise AdapterError("need 1 <= r_min <= r_max")
    imp = np.array([np.mean(np.abs(as_mat(w) * as_mat(g))) for w, g in zip(weights, grads)])
    dims = np.array([sum(as_mat(w).shape) for w in weights], dtype=np.float64)
    if imp.sum() == 0.0:
        warnings.warn("all layer importances are zero; falling back to r_ref", RuntimeWarning, stacklevel=2)
        return [int(min(max(r_ref, r_min), r_max))] * len(weights)
    frac = imp / imp.sum()
    total = float(np.sum(dims) * r_ref)
    denom = dims if budget_conserving else np.sqrt(dims)
    return [int(min(max(round_half_up(total * a / d), r_min), r_max)) for a, d in zip(frac, denom)]


def erank(g) -> float:
    """``exp(-sum p log p)`` with ``p = sigma / sum sigma``.

    Singular values below the numerical-rank threshold are dropped, so a
    rank-k matrix with equal singular values gives exactly ``k``.
    """
    s = np.linalg.svd(as_mat(g), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        raise LinalgError("erank of a zero matrix is undefined")
    s = s[s > RANK_RTOL * s[0]]
    p = s / s.sum()
    return float(math.exp(-float(np.sum(p * np.log(p)))))


def ralora_blocks(erank_value: float, r: int, r_max: int, m: int, n: int) -> int:
    """Smallest block count ``k`` dividing m and n with ``k r >= min(erank, r_max)``."""
    need = min(erank_value, r_max)
    valid = [k for k in range(1, min(m, n) + 1) if m % k == 0 and n % k == 0 and r <= min(m, n) // k]
    for k in valid:
        if k * r >= need:
            return k
    return valid[-1]


def eva_explained_variance(sigma, n_samples: int) -> np.ndarray:
    if n_samples < 2:
        raise AdapterError("explained variance needs at least two samples")
    s = np.asarray(sigma, dtype=np.float64)
    return s**2 / ((n_samples - 1) * np.sum(np.abs(s)))


def eva_allocate(sigmas, budget: int, n_samples: int) -> list[int]:
    """Greedy allocation by explained-variance ratio.

    Ties go to the lower component index first, then the lower module index,
    so equal ratios fill modules round-robin.
    """
    xi = [eva_explained_variance(s, n_samples) for s in sigmas]
    flat = [(-float(v), j, i) for i, x in enumerate(xi) for j, v in enumerate(x)]
    if budget > len(flat):
        raise AdapterError(f"budget {budget} exceeds {len(flat)} directions")
    counts = [0] * len(sigmas)
    for _, _, i in sorted(flat)[:budget]:
        counts[i] += 1
    return counts
