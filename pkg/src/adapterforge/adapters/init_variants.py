"""Initialization strategies for the adapter factors.

Each strategy returns an :class:`InitResult`; :func:`apply_init` installs it
on an adapter.  Strategies that start from a non-zero delta subtract
``s * A0 @ B0`` from the base (``base_adjusted``) so the effective weight is
unchanged, except NZLoRA and LoRA-One, which deliberately start off the
frozen weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..linalg import RngStream, as_mat, kaiming_uniform, numerical_rank, pinv_left, qr, svd
from .base import AdapterError, AdapterSpec, LoRAAdapter
from .optim_variants import rs_scale

INIT_KINDS = (
    "default", "nz", "pissa", "milora", "olora", "sorsa",
    "lora_ga", "lora_one", "lora_sb", "gora", "corda_kpa", "corda_ipa", "eva",
)
NEEDS_GRADIENTS = {"lora_ga", "lora_one", "lora_sb", "gora"}
NEEDS_COVARIANCE = {"corda_kpa", "corda_ipa", "eva"}
# strategies whose initial delta is meant to be non-zero
NON_IDENTITY = {"nz", "lora_one"}


@dataclass
class GradContext:
    """Pre-training estimates keyed by layer name."""

    grads: dict = field(default_factory=dict)
    cov: dict = field(default_factory=dict)
    grad_steps: int = 0
    cov_steps: int = 0
    samples: int = 0

    def to_json(self) -> dict:
        def enc(d):
            return {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in sorted(d.items())}
        return {"grads": enc(self.grads), "cov": enc(self.cov), "grad_steps": self.grad_steps,
                "cov_steps": self.cov_steps, "samples": self.samples}

    @classmethod
    def from_json(cls, d: dict) -> "GradContext":
        def dec(e):
            return {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in e.items()}
        return cls(dec(d["grads"]), dec(d["cov"]), d["grad_steps"], d["cov_steps"], d["samples"])


@dataclass
class InitResult:
    params: dict
    base: np.ndarray
    base_adjusted: bool
    frozen: frozenset = frozenset()
    damped: bool = False


def estimate_gradients(model, batches, steps: int = 64) -> GradContext:
    """Average full-weight gradients over ``steps`` batches, adapters off.

    ``model`` must provide ``full_weight_gradients(x, y) -> {layer: G}``;
    no parameter is updated.
    """
    if steps < 1:
        raise AdapterError("steps must be >= 1")
    batches = list(batches)[:steps]
    if not batches:
        raise AdapterError("gradient estimation needs data")
    total = {}
    for x, y in batches:
        for name, g in model.full_weight_gradients(x, y).items():
            total[name] = total.get(name, 0.0) + g
    k = len(batches)
    return GradContext(grads={n: g / k for n, g in total.items()}, grad_steps=k,
                       samples=sum(len(x) for x, _ in batches))


def estimate_activation_cov(model, batches, steps: int = 64, ctx: GradContext | None = None) -> GradContext:
    """Accumulate ``X^T X`` of every adapted layer's input."""
    if steps < 1:
        raise AdapterError("steps must be >= 1")
    ctx = ctx or GradContext()
    batches = list(batches)[:steps]
    for x, _ in batches:
        for name, X in model.layer_inputs(x).items():
            ctx.cov[name] = ctx.cov.get(name, 0.0) + X.T @ X
    ctx.cov_steps += len(batches)
    return ctx


# -- data-independent ------------------------------------------------------

def init_default(spec: AdapterSpec, rng: RngStream, swap: bool = False):
    """``A ~ U(+-1/sqrt(m))`` and ``B = 0``; ``swap`` zeroes ``A`` instead."""
    m, n, r = spec.in_features, spec.out_features, spec.rank
    if swap:
        return np.zeros((m, r)), kaiming_uniform(r, n, m, rng)
    return kaiming_uniform(m, r, m, rng), np.zeros((r, n))


def init_nz(spec: AdapterSpec, gamma_a: float = 16.0, gamma_b: float = 16.0, rng: RngStream | None = None):
    """Both factors uniform with bounds ``gamma / sqrt(m)``; no base adjustment."""
    if gamma_a <= 0 or gamma_b <= 0:
        raise AdapterError("NZLoRA gammas must be positive")
    rng = rng or RngStream(spec.seed)
    m, n, r = spec.in_features, spec.out_features, spec.rank
    bound_a, bound_b = gamma_a / np.sqrt(m), gamma_b / np.sqrt(m)
    return rng.uniform(-bound_a, bound_a, (m, r)), rng.uniform(-bound_b, bound_b, (r, n))


def _check_rank(spec: AdapterSpec, k: int):
    if spec.rank > k:
        raise AdapterError(f"rank {spec.rank} exceeds {k}")


def init_spectral(spec: AdapterSpec, base, kind: str, scaling: float | None = None) -> InitResult:
    """PiSSA, MiLoRA, OLoRA or SORSA factors from the frozen weight."""
    W = as_mat(base, "base")
    r = spec.rank
    s = spec.scaling if scaling is None else scaling
    _check_rank(spec, min(W.shape))
    if kind in ("pissa", "milora", "sorsa"):
        res = svd(W)
        sel = slice(0, r) if kind != "milora" else slice(len(res.S) - r, len(res.S))
        U, S, V = res.U[:, sel], res.S[sel], res.V[:, sel]
        if kind == "sorsa":
            params = {"A": U.copy(), "B": V.T.copy(), "D": S.reshape(1, -1).copy()}
            delta = (U * S) @ V.T
        else:
            root = np.sqrt(S)
            params = {"A": U * root, "B": (V * root).T}
            delta = params["A"] @ params["B"]
    elif kind == "olora":
        Q, R = qr(W, complete=W.shape[0] < W.shape[1])
        params = {"A": Q[:, :r].copy(), "B": R[:r, :].copy()}
        delta = params["A"] @ params["B"]
    else:
        raise AdapterError(f"unknown spectral kind {kind!r}")
    return InitResult(params, W - s * delta, True)


def sorsa_reg_loss(A, B) -> float:
    """``||A^T A - I||^2 + ||B B^T - I||^2`` (``B`` is r x n here)."""
    A, B = as_mat(A), as_mat(B)
    ra = A.T @ A - np.eye(A.shape[1])
    rb = B @ B.T - np.eye(B.shape[0])
    return float(np.sum(ra * ra) + np.sum(rb * rb))


# -- gradient-driven -------------------------------------------------------

def init_from_gradient(spec: AdapterSpec, base, grad, kind: str, gamma: float | None = None,
                       rng: RngStream | None = None, scaling: float | None = None) -> InitResult:
    W, G = as_mat(base, "base"), as_mat(grad, "gradient")
    if G.shape != W.shape:
        raise AdapterError("gradient shape does not match the base")
    m, r = W.shape[0], spec.rank
    s = spec.scaling if scaling is None else scaling
    _check_rank(spec, min(W.shape))
    if kind == "lora_ga":
        gamma = 16.0 if gamma is None else gamma
        if 2 * r > min(W.shape) or numerical_rank(G) < 2 * r:
            raise AdapterError("LoRA-GA needs a gradient of rank >= 2r")
        res = svd(G)
        c = m**0.25 / np.sqrt(gamma)
        A, B = c * res.U[:, :r], c * res.V[:, r:2 * r].T
        return InitResult({"A": A, "B": B}, W - s * A @ B, True)
    if kind == "lora_one":
        gamma = 128.0 if gamma is None else gamma
        res = svd(-G)
        if res.S[0] == 0.0:
            raise AdapterError("LoRA-One needs a non-zero gradient")
        root = np.sqrt(res.S[:r] / res.S[0])
        c = 1.0 / np.sqrt(gamma)
        A, B = c * res.U[:, :r] * root, c * (res.V[:, :r] * root).T
        return InitResult({"A": A, "B": B}, W.copy(), False)
    if kind == "lora_sb":
        res = svd(-G)
        A, B = res.U[:, :r].copy(), res.V[:, :r].T.copy()
        D = np.diag(res.S[:r])
        return InitResult({"A": A, "B": B, "D": D}, W - s * A @ D @ B, True, frozenset({"A", "B"}))
    if kind == "gora":
        gamma = 0.05 if gamma is None else gamma
        rng = rng or RngStream(spec.seed)
        A = kaiming_uniform(m, r, m, rng)
        B = -(gamma * np.sqrt(m) / spec.alpha) * (pinv_left(A) @ G)
        return InitResult({"A": A, "B": B}, W - s * A @ B, True)
    raise AdapterError(f"unknown gradient init {kind!r}")


# -- activation-aware -------------------------------------------------------

def _check_cov(C) -> np.ndarray:
    C = as_mat(C, "covariance")
    if C.shape[0] != C.shape[1] or not np.allclose(C, C.T, atol=1e-10 * max(1.0, np.abs(C).max())):
        raise AdapterError("covariance must be symmetric")
    ev = np.linalg.eigvalsh(C)
    if ev[0] < -1e-10 * max(ev[-1], 1.0):
        raise AdapterError("covariance is not positive semidefinite")
    return C


def damp_covariance(C) -> tuple[np.ndarray, bool]:
    """Add ``1e-6 tr(C)/m`` to the diagonal when ``C`` is near singular."""
    C = _check_cov(C)
    ev = np.linalg.eigvalsh(C)
    if ev[0] > 1e-10 * ev[-1] and ev[-1] > 0:
        return C, False
    eps = 1e-6 * max(np.trace(C), 1e-300) / C.shape[0]
    return C + eps * np.eye(C.shape[0]), True


def init_corda(spec: AdapterSpec, base, C, mode: str, scaling: float | None = None) -> InitResult:
    """Components of ``(C^-1 U) S V^T`` where ``C W~ = U S V^T``.

    ``kpa`` keeps the r smallest components, ``ipa`` the r largest.
    """
    if mode not in ("kpa", "ipa"):
        raise AdapterError("CorDA mode must be 'kpa' or 'ipa'")
    W = as_mat(base, "base")
    s = spec.scaling if scaling is None else scaling
    _check_rank(spec, min(W.shape))
    Cd, damped = damp_covariance(C)
    res = svd(Cd @ W)
    k, r = len(res.S), spec.rank
    sel = slice(k - r, k) if mode == "kpa" else slice(0, r)
    left = np.linalg.solve(Cd, res.U[:, sel])
    root = np.sqrt(res.S[sel])
    A, B = left * root, (res.V[:, sel] * root).T
    return InitResult({"A": A, "B": B}, W - s * A @ B, True, damped=damped)


def corda_components(base, C):
    """``(C^-1 U, S, V)``; their product reconstructs the base."""
    Cd, _ = damp_covariance(C)
    res = svd(Cd @ as_mat(base))
    return np.linalg.solve(Cd, res.U), res.S, res.V


def top_eigenvectors(C, r: int) -> tuple[np.ndarray, np.ndarray]:
    C = _check_cov(C)
    if r > C.shape[0]:
        raise AdapterError("rank exceeds the covariance dimension")
    w, v = np.linalg.eigh(C)
    order = np.argsort(-w, kind="stable")[:r]
    vecs = v[:, order]
    idx = np.argmax(np.abs(vecs), axis=0)
    vecs = vecs * np.where(vecs[idx, np.arange(r)] < 0, -1.0, 1.0)
    return w[order], vecs


def init_eva(spec: AdapterSpec, C) -> InitResult:
    """``A`` = top-r eigenvectors of the activation covariance, ``B = 0``."""
    if spec.rank > spec.in_features:
        raise AdapterError("rank exceeds m")
    _, A = top_eigenvectors(C, spec.rank)
    return InitResult({"A": A, "B": np.zeros((spec.rank, spec.out_features))}, None, False)


# -- adapters needing extra tensors ----------------------------------------

class SORSAAdapter(LoRAAdapter):
    """``s A diag(D) B`` with an orthonormality penalty on ``A`` and ``B``."""

    kind = "sorsa"

    def init_weights(self):
        super().init_weights()
        self.params["D"] = np.ones((1, self.r))
        self.trainable.add("D")

    def delta_weight(self):
        return self.scaling * (self.A * self.params["D"]) @ self.B

    def adapter_graph(self, tape, x, nodes, train=False):
        h = tape.mul(tape.matmul(x, nodes["A"]), nodes["D"])
        return tape.scale(tape.matmul(h, nodes["B"]), self.scaling)

    def regularizer(self, tape, nodes):
        lam = float(self.vparam("orth_reg", 0.0))
        if lam == 0.0:
            return None
        A, B = nodes["A"], nodes["B"]
        ra = tape.sub(tape.matmul(tape.transpose(A), A), np.eye(self.r))
        rb = tape.sub(tape.matmul(B, tape.transpose(B)), np.eye(self.r))
        return tape.scale(tape.add(tape.square_sum(ra), tape.square_sum(rb)), lam)


class LoRASBAdapter(LoRAAdapter):
    """Frozen ``A`` and ``B`` around a trainable r x r core ``D``."""

    kind = "lora_sb"

    def init_weights(self):
        super().init_weights()
        self.params["D"] = np.zeros((self.r, self.r))
        self.trainable = {"D"}

    def delta_weight(self):
        return self.scaling * self.A @ self.params["D"] @ self.B

    def adapter_graph(self, tape, x, nodes, train=False):
        h = tape.matmul(tape.matmul(x, nodes["A"]), nodes["D"])
        return tape.scale(tape.matmul(h, nodes["B"]), self.scaling)


class GoRAAdapter(LoRAAdapter):
    """Vanilla factors with rank-stabilized scaling (GoRA's convention)."""

    kind = "gora"

    @property
    def scaling(self):
        return rs_scale(self.spec.alpha, self.r)


# -- dispatch --------------------------------------------------------------

def apply_init(adapter: LoRAAdapter, kind: str, ctx: GradContext | None = None, layer: str | None = None,
               **opts) -> LoRAAdapter:
    """Initialize ``adapter`` in place with strategy ``kind``."""
    if kind not in INIT_KINDS:
        raise AdapterError(f"unknown init kind {kind!r}; expected one of {INIT_KINDS}")
    spec, s = adapter.spec, adapter.scaling
    if kind in NEEDS_GRADIENTS | NEEDS_COVARIANCE and (ctx is None or layer is None):
        raise AdapterError(f"init {kind!r} needs a GradContext and a layer name")
    if kind == "default":
        A, B = init_default(spec, adapter.rng, swap=bool(opts.get("swap", False)))
        res = InitResult({"A": A, "B": B}, None, False)
    elif kind == "nz":
        A, B = init_nz(spec, opts.get("gamma_a", 16.0), opts.get("gamma_b", 16.0), adapter.rng)
        res = InitResult({"A": A, "B": B}, None, False)
    elif kind in ("pissa", "milora", "olora", "sorsa"):
        res = init_spectral(spec, adapter.base, kind, s)
    elif kind in NEEDS_GRADIENTS:
        if layer not in ctx.grads:
            raise AdapterError(f"no gradient estimate for layer {layer!r}")
        res = init_from_gradient(spec, adapter.base, ctx.grads[layer], kind, opts.get("gamma"), adapter.rng, s)
    elif kind in ("corda_kpa", "corda_ipa"):
        res = init_corda(spec, adapter.base, ctx.cov[layer], kind.split("_")[1], s)
    else:
        res = init_eva(spec, ctx.cov[layer])
    for name, value in res.params.items():
        if name not in adapter.params:
            raise AdapterError(f"{adapter.kind} adapter has no tensor {name!r} for init {kind!r}")
        if adapter.params[name].shape != value.shape:
            raise AdapterError(f"init {kind!r} gives {name} shape {value.shape}, adapter has {adapter.params[name].shape}")
        adapter.params[name] = np.array(value, dtype=np.float64)
    adapter.trainable -= set(res.frozen)
    if res.base is not None:
        adapter.base = res.base
    adapter.base_adjusted = res.base_adjusted
    adapter.init_kind = kind
    adapter.identity_at_init = kind not in NON_IDENTITY
    return adapter


def init_delta_contract(adapter: LoRAAdapter, original_base) -> float:
    """``||W_eff - W~||_F`` right after init (0 for identity-preserving kinds)."""
    return float(np.linalg.norm(adapter.effective_weight() - as_mat(original_base)))


def lora_ga_projection(A, B, G) -> np.ndarray:
    """``A A^T G + G B^T B``, the first-step update direction of a LoRA pair."""
    return A @ (A.T @ G) + (G @ B.T) @ B


def eckart_young_tail(W, r: int) -> float:
    return float(np.sqrt(np.sum(np.linalg.svd(as_mat(W), compute_uv=False)[r:] ** 2)))

