"""Variants that change how the adapter is optimized rather than its rank."""

from __future__ import annotations

import math

import numpy as np

from ..autodiff import spline_greville
from ..linalg import LinalgError, RngStream, as_mat, kaiming_uniform, solve_sylvester, spectral_norm
from .base import AdapterError, LoRAAdapter, NotMaterializable

NORM_FLOOR = 1e-12


# -- RsLoRA -----------------------------------------------------------------

def rs_scale(alpha: float, r: int) -> float:
    if r < 1:
        raise AdapterError("rank must be >= 1")
    return alpha / math.sqrt(r)


def stability_probe(m: int, ranks, mode: str, rng: RngStream, draws: int = 10_000,
                    n: int | None = None, alpha: float = 16.0, chunk: int = 500) -> dict:
    """Monte-Carlo ``E ||s x A B||^2`` per rank.

    ``A`` and ``B`` are i.i.d. unit-variance Gaussian and each ``x`` is a
    random unit-norm row.  Standard scaling gives a moment proportional to
    ``1/r``; rank-stabilized scaling keeps it flat.
    """
    n = m if n is None else n
    out = {}
    for r in ranks:
        s = rs_scale(alpha, r) if mode == "rank_stabilized" else alpha / r
        total, done = 0.0, 0
        while done < draws:
            k = min(chunk, draws - done)
            x = rng.normal(1.0, (k, 1, m))
            x /= np.linalg.norm(x, axis=2, keepdims=True)
            A = rng.normal(1.0, (k, m, r))
            B = rng.normal(1.0, (k, r, n))
            y = s * (x @ A @ B)
            total += float(np.sum(y * y))
            done += k
        out[int(r)] = total / draws
    return out


# -- LoRA+ ----------------------------------------------------------------

def lora_plus_lrs(lr: float, ratio: float = 16.0) -> tuple[float, float]:
    if ratio <= 0:
        raise AdapterError("learning-rate ratio must be positive")
    return lr, ratio * lr


class LoRAPlusAdapter(LoRAAdapter):
    kind = "lora_plus"

    def lr_multipliers(self):
        return {"B": float(self.vparam("lr_ratio", 16.0))}


class RsLoRAAdapter(LoRAAdapter):
    """Vanilla factors with ``alpha / sqrt(r)`` scaling regardless of the configured scaling mode."""

    kind = "rslora"

    @property
    def scaling(self):
        return rs_scale(self.spec.alpha, self.r)


# -- Riemannian preconditioning ------------------------------------------

def _gram_solve(gram: np.ndarray, rhs: np.ndarray, eps: float, left: bool):
    s = np.linalg.svd(gram, compute_uv=False)
    damped = bool(s[-1] <= 1e-10 * max(s[0], NORM_FLOOR))
    if damped:
        gram = gram + eps * np.eye(gram.shape[0])
    if left:
        return np.linalg.solve(gram, rhs), damped
    return np.linalg.solve(gram.T, rhs.T).T, damped


def riemannian_precondition(grad_a, grad_b, A, B, eps: float = 1e-8):
    """``(dA (B B^T)^-1, (A^T A)^-1 dB, damped)``.

    A Gram matrix whose smallest singular value falls below ``1e-10`` of its
    largest gets ``eps * I`` added; ``damped`` reports whether that happened.
    """
    A, B = as_mat(A), as_mat(B)
    ga, da = _gram_solve(B @ B.T, as_mat(grad_a), eps, left=False)
    gb, db = _gram_solve(A.T @ A, as_mat(grad_b), eps, left=True)
    return ga, gb, da or db


class RPLoRAAdapter(LoRAAdapter):
    kind = "rplora"

    def rewrite_grads(self, grads):
        ga, gb, self.last_damped = riemannian_precondition(grads["A"], grads["B"], self.A, self.B)
        return {**grads, "A": ga, "B": gb}


# -- DoRA -----------------------------------------------------------------

def column_norms(w) -> np.ndarray:
    """Norm of each output column (taken over the input dimension), shape (1, n)."""
    return np.linalg.norm(as_mat(w), axis=0, keepdims=True)


def dora_effective_weight(base, A, B, magnitude, scaling: float) -> np.ndarray:
    v = as_mat(base) + scaling * as_mat(A) @ as_mat(B)
    norms = column_norms(v)
    if np.any(norms == 0.0):
        raise LinalgError("DoRA direction has a zero column")
    return v * (np.asarray(magnitude).reshape(1, -1) / norms)


class DoRAAdapter(LoRAAdapter):
    """Magnitude vector times the column-normalized direction ``W~ + s A B``."""

    kind = "dora"

    def init_weights(self):
        super().init_weights()
        norms = column_norms(self.base)
        if np.any(norms == 0.0):
            raise AdapterError("DoRA needs a base weight without zero columns")
        self.params["magnitude"] = norms
        self.trainable.add("magnitude")

    def effective_weight(self):
        if self.merged:
            return self.base.copy()
        return dora_effective_weight(self.base, self.A, self.B, self.params["magnitude"], self.scaling)

    def delta_weight(self):
        return self.effective_weight() - self.base

    def graph(self, tape, x, nodes, train=False):
        if not self.enabled or self.merged:
            return tape.matmul(x, nodes["base"])
        v = tape.add(nodes["base"], tape.scale(tape.matmul(nodes["A"], nodes["B"]), self.scaling))
        norms = tape.sqrt(tape.sum_rows(tape.mul(v, v)))
        w = tape.mul(v, tape.div(nodes["magnitude"], norms))
        return tape.matmul(self._dropout(tape, x, train), w)


# -- DeLoRA ---------------------------------------------------------------

def delora_delta(A, B, lam: float, base_norm: float, r: int | None = None) -> np.ndarray:
    """``(lam ||W~||_2 / r) sum_i a_i b_i^T / (||a_i|| ||b_i||)``."""
    A, B = as_mat(A), as_mat(B)
    r = A.shape[1] if r is None else r
    an = np.maximum(np.linalg.norm(A, axis=0, keepdims=True), NORM_FLOOR)
    bn = np.maximum(np.linalg.norm(B, axis=1, keepdims=True), NORM_FLOOR)
    return (float(lam) * base_norm / r) * (A / an) @ (B / bn)


class DeLoRAAdapter(LoRAAdapter):
    """Normalized rank-one sum with a trainable bound ``lam``.

    Both factors are Kaiming-uniform, so the base is adjusted at init.
    """

    kind = "delora"

    def init_weights(self):
        if not hasattr(self, "base_norm"):
            self.base_norm = spectral_norm(self.base)
        self.params = {
            "A": kaiming_uniform(self.m, self.r, self.m, self.rng),
            "B": kaiming_uniform(self.r, self.n, self.r, self.rng),
            "lam": np.array([[float(self.vparam("lam", 8.0))]]),
        }
        self.trainable = {"A", "B", "lam"}
        self.adjust_base()

    def delta_weight(self):
        return delora_delta(self.A, self.B, self.params["lam"][0, 0], self.base_norm, self.r)

    def adapter_graph(self, tape, x, nodes, train=False):
        an = tape.sqrt(tape.sum_rows(tape.mul(nodes["A"], nodes["A"])))
        bn = tape.sqrt(tape.sum_cols(tape.mul(nodes["B"], nodes["B"])))
        a = tape.div(nodes["A"], an)
        b = tape.div(nodes["B"], bn)
        h = tape.matmul(tape.matmul(x, a), b)
        return tape.mul(tape.scale(h, self.base_norm / self.r), nodes["lam"])

    def extra_state(self):
        return {"base_norm": self.base_norm}

    def load_extra_state(self, extras):
        self.base_norm = float(extras["base_norm"])


# -- LoRA-Pro -------------------------------------------------------------

def lora_pro_gradients(A, B, grad_a, grad_b, alpha: float, r: int | None = None, return_m: bool = False):
    """Factor gradients whose combined update best matches the full gradient.

    With ``s = alpha / sqrt(r)`` and ``G`` the full-weight gradient (recovered
    from ``grad_a = s G B^T`` and ``grad_b = s A^T G``), returns the
    ``(dA*, dB*)`` closest to ``(grad_a, grad_b)`` among the minimizers of
    ``||s (A dB + dA B) - G||_F``:

        dA* = (1/s) G B^T (B B^T)^-1 + A M
        dB* = (1/s) (A^T A)^-1 A^T G [I - B^T (B B^T)^-1 B] - M B

    where ``M B B^T + A^T A M = -(1/s^2) A^T grad_a (B B^T)^-1``.
    """
    A, B = as_mat(A, "A"), as_mat(B, "B")
    grad_a, grad_b = as_mat(grad_a), as_mat(grad_b)
    r = A.shape[1] if r is None else r
    s = alpha / math.sqrt(r)
    ata, bbt = A.T @ A, B @ B.T
    for name, g in (("A^T A", ata), ("B B^T", bbt)):
        sv = np.linalg.svd(g, compute_uv=False)
        if sv[-1] <= 1e-12 * max(sv[0], NORM_FLOOR):
            raise LinalgError(f"{name} is singular; LoRA-Pro needs full-rank factors")
    bbt_inv = np.linalg.inv(bbt)
    x0 = grad_a @ bbt_inv / s**2
    proj = np.eye(B.shape[1]) - B.T @ bbt_inv @ B
    y0 = np.linalg.solve(ata, grad_b) @ proj / s**2
    M = solve_sylvester(ata, bbt, -(A.T @ grad_a @ bbt_inv) / s**2)
    ga, gb = x0 + A @ M, y0 - M @ B
    return (ga, gb, M) if return_m else (ga, gb)


class LoRAProAdapter(LoRAAdapter):
    """Rank-stabilized scaling with gradients rewritten by :func:`lora_pro_gradients`."""

    kind = "lora_pro"

    @property
    def scaling(self):
        return rs_scale(self.spec.alpha, self.r)

    def rewrite_grads(self, grads):
        try:
            ga, gb = lora_pro_gradients(self.A, self.B, grads["A"], grads["B"], self.spec.alpha, self.r)
        except LinalgError:
            # B starts at zero; plain gradients until both factors have full rank
            return grads
        return {**grads, "A": ga, "B": gb}


# -- FLoRA ----------------------------------------------------------------

class FloraOptimizer:
    """Runs an inner optimizer on randomly projected full-weight gradients.

    For each weight ``W`` (m x n) a fixed ``P`` (m x r) compresses the
    gradient to ``P^T G``.  The inner optimizer updates a zero placeholder of
    shape (r x n); its displacement ``u`` is decompressed to ``P u``.  Inner
    moments therefore stay at r x n.
    """

    def __init__(self, inner, rank: int, rng: RngStream):
        self.inner = inner
        self.rank = rank
        self.rng = rng
        self.proj: dict[str, np.ndarray] = {}

    def projection(self, name: str, m: int) -> np.ndarray:
        if name not in self.proj:
            self.proj[name] = self.rng.normal(1.0 / math.sqrt(self.rank), (m, self.rank))
        return self.proj[name]

    def step(self, params: dict, grads: dict, lr: float) -> dict:
        comp = {}
        zeros = {}
        for name, g in grads.items():
            P = self.projection(name, g.shape[0])
            comp[name] = P.T @ g
            zeros[name] = np.zeros_like(comp[name])
        moved = self.inner.step(zeros, comp, lr)
        return {name: params[name] + self.proj[name] @ moved[name] for name in grads}

    def state_sizes(self) -> dict:
        return self.inner.state_sizes()


# -- MoSLoRA --------------------------------------------------------------

def moslora_delta(A, C, B, scaling: float) -> np.ndarray:
    return scaling * as_mat(A) @ as_mat(C) @ as_mat(B)


class MoSLoRAAdapter(LoRAAdapter):
    """``s A C B`` with a trainable r x r mixer ``C`` (identity at init)."""

    kind = "moslora"

    def init_weights(self):
        super().init_weights()
        self.params["C"] = np.eye(self.r)
        self.trainable.add("C")

    def delta_weight(self):
        return moslora_delta(self.A, self.params["C"], self.B, self.scaling)

    def adapter_graph(self, tape, x, nodes, train=False):
        h = tape.matmul(tape.matmul(x, nodes["A"]), nodes["C"])
        return tape.scale(tape.matmul(h, nodes["B"]), self.scaling)


# -- nonlinear bottlenecks ---------------------------------------------------

class AuroraAdapter(LoRAAdapter):
    """``s f(x A) B`` with ``f(h) = tanh(tanh(h)) + v * S(h)`` elementwise.

    ``S`` is a cubic B-spline with ``spline_size`` coefficients on uniform
    knots over [-1, 1]; the coefficients start at the Greville points (so
    ``S`` is the identity on that range) and ``v`` starts at zero.
    """

    kind = "aurora"
    materializable = False

    def init_weights(self):
        super().init_weights()
        self.params["coef"] = spline_greville(int(self.vparam("spline_size", 8))).reshape(1, -1)
        self.params["v"] = np.zeros((1, self.r))
        self.trainable |= {"coef", "v"}

    def delta_weight(self):
        raise NotMaterializable("Aurora's update depends on the input")

    def adapter_graph(self, tape, x, nodes, train=False):
        h = tape.matmul(x, nodes["A"])
        f = tape.add(tape.tanh(tape.tanh(h)), tape.mul(tape.bspline(h, nodes["coef"]), nodes["v"]))
        return tape.scale(tape.matmul(f, nodes["B"]), self.scaling)


class LoDAAdapter(LoRAAdapter):
    """``s (h B + f2(f1(h)) B)`` on the bottleneck ``h = x A``.

    ``f1`` is leaky, linear, leaky, linear, leaky with two r x r maps and
    ``f2`` is leaky.
    """

    kind = "loda"
    materializable = False

    def init_weights(self):
        super().init_weights()
        self.params["W1"] = kaiming_uniform(self.r, self.r, self.r, self.rng)
        self.params["W2"] = kaiming_uniform(self.r, self.r, self.r, self.rng)
        self.trainable |= {"W1", "W2"}

    def delta_weight(self):
        raise NotMaterializable("LoDA's update depends on the input")

    def adapter_graph(self, tape, x, nodes, train=False):
        h = tape.matmul(x, nodes["A"])
        f = tape.leaky_relu(h)
        f = tape.leaky_relu(tape.matmul(f, nodes["W1"]))
        f = tape.leaky_relu(tape.matmul(f, nodes["W2"]))
        branch = tape.leaky_relu(f)
        return tape.scale(tape.matmul(tape.add(h, branch), nodes["B"]), self.scaling)
