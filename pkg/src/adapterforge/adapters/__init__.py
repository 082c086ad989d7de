"""Variant registry: one name per adapter variant, mapped to its class and init."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..linalg import RngStream
from .base import (
    AdapterError,
    AdapterSpec,
    LoRAAdapter,
    NotMaterializable,
    frozen_a_accumulation,
    lora_gradients,
    mat_from_json,
    stepwise_update_approx,
)
from .init_variants import (
    NEEDS_COVARIANCE,
    NEEDS_GRADIENTS,
    GoRAAdapter,
    GradContext,
    LoRASBAdapter,
    SORSAAdapter,
    apply_init,
)
from .moe import GOATAdapter, HydraLoRAAdapter, MoEAdapter
from .optim_variants import (
    AuroraAdapter,
    DeLoRAAdapter,
    DoRAAdapter,
    LoDAAdapter,
    LoRAPlusAdapter,
    LoRAProAdapter,
    MoSLoRAAdapter,
    RPLoRAAdapter,
    RsLoRAAdapter,
)
from .rank_budget import IncreLoRAAdapter, SaLoRAAdapter, SvdAdapter
from .rank_expand import HiRAAdapter, LoHaAdapter, LoKrAdapter, MELoRAAdapter, ReLoRAAdapter
from .rank_share import (
    DenseLoRAAdapter,
    ProLoRAAdapter,
    RandLoRAAdapter,
    RaSAAdapter,
    SharedBank,
    ShareLoRAAdapter,
    VeRAAdapter,
)

_COMMON = {"swap_init"}
_ADALORA = {"orth_reg", "t_i", "t_f", "target_rank", "beta1", "beta2", "mask_interval"}


@dataclass(frozen=True)
class VariantInfo:
    name: str
    cls: type
    init: str = "default"
    params: dict = field(default_factory=dict)
    allowed: frozenset = frozenset()

    @property
    def needs_gradients(self) -> bool:
        return self.init in NEEDS_GRADIENTS

    @property
    def needs_covariance(self) -> bool:
        return self.init in NEEDS_COVARIANCE


def _v(name, cls, init="default", params=None, allowed=()):
    params = params or {}
    return VariantInfo(name, cls, init, params, frozenset(set(allowed) | set(params) | _COMMON))


REGISTRY: dict[str, VariantInfo] = {
    v.name: v
    for v in [
        _v("lora", LoRAAdapter),
        # rank expansion
        _v("relora", ReLoRAAdapter, params={"phase_length": 100, "phases": 4, "rewarmup_steps": 10}),
        _v("melora", MELoRAAdapter, params={"blocks": 2}),
        _v("loha", LoHaAdapter),
        _v("hira", HiRAAdapter),
        _v("lokr", LoKrAdapter, params={"factor": 8}),
        # rank sharing
        _v("sharelora", ShareLoRAAdapter, params={"mode": "share_A"}),
        _v("vera", VeRAAdapter, params={"freeze": ["A", "B"]}),
        _v("tied_lora", VeRAAdapter, params={"freeze": ["A", "B"]}),
        _v("rasa", RaSAAdapter, params={"shared_rank": 1, "layers": 1}),
        _v("denselora", DenseLoRAAdapter, params={"train_shared": True}),
        _v("prolora", ProLoRAAdapter, params={"chunks": 2}, allowed={"local_rank", "stride_a", "stride_b"}),
        _v("randlora", RandLoRAAdapter, params={"cap": 1024}),
        # rank budgeting
        _v("adalora", SvdAdapter, params={"orth_reg": 0.1, "t_i": 100, "t_f": 900, "target_rank": 8},
           allowed=_ADALORA),
        _v("increlora", IncreLoRAAdapter, params={"grow_every": 50, "grow_top": 1, "grow_budget": 8,
                                                  "grow_warmup": 50, "grow_d_init": 1e-5},
           allowed=_ADALORA),
        _v("salora", SaLoRAAdapter, params={"orth_reg": 0.1, "l0_reg": 0.0, "target_fraction": 0.5},
           allowed={"tau", "gamma", "zeta", "logd_init"}),
        # optimization process
        _v("rslora", RsLoRAAdapter),
        _v("lora_plus", LoRAPlusAdapter, params={"lr_ratio": 16.0}),
        _v("rplora", RPLoRAAdapter),
        _v("dora", DoRAAdapter),
        _v("delora", DeLoRAAdapter, params={"lam": 8.0}),
        _v("lora_pro", LoRAProAdapter),
        _v("moslora", MoSLoRAAdapter),
        _v("aurora", AuroraAdapter, params={"spline_size": 8}),
        _v("loda", LoDAAdapter),
        # initialization
        _v("nzlora", LoRAAdapter, "nz", params={"gamma_a": 16.0, "gamma_b": 16.0}),
        _v("pissa", LoRAAdapter, "pissa", params={"svd_iters": 64}),
        _v("milora", LoRAAdapter, "milora"),
        _v("olora", LoRAAdapter, "olora"),
        _v("sorsa", SORSAAdapter, "sorsa", params={"orth_reg": 0.0}),
        _v("lora_ga", LoRAAdapter, "lora_ga", params={"gamma": 16.0, "estimation_steps": 64}),
        _v("lora_one", LoRAAdapter, "lora_one", params={"gamma": 128.0, "estimation_steps": 64}),
        _v("lora_sb", LoRASBAdapter, "lora_sb", params={"estimation_steps": 64}),
        _v("gora", GoRAAdapter, "gora", params={"gamma": 0.05, "estimation_steps": 64}),
        _v("corda_kpa", LoRAAdapter, "corda_kpa", params={"estimation_steps": 64}),
        _v("corda_ipa", LoRAAdapter, "corda_ipa", params={"estimation_steps": 64}),
        _v("eva", LoRAAdapter, "eva", params={"estimation_steps": 64, "svd_threshold": 0.9}),
        # mixture of experts
        _v("moelora", MoEAdapter, params={"experts": 4, "top_k": 2, "renormalize": True, "balance_reg": 0.0},
           allowed={"expert_rank", "router", "tau_max"}),
        _v("loramoe", MoEAdapter, params={"experts": 8, "top_k": 2, "expert_rank": 1, "renormalize": True,
                                          "balance_reg": 0.0, "delta": 0.1}),
        _v("adamole", MoEAdapter, params={"experts": 4, "top_k": 1, "router": "adamole", "tau_max": 0.5,
                                          "renormalize": True, "balance_reg": 0.0}, allowed={"expert_rank"}),
        _v("hydralora", HydraLoRAAdapter, params={"experts": 4, "renormalize": True, "balance_reg": 0.0},
           allowed={"top_k"}),
        _v("goat", GOATAdapter, params={"experts": 4, "top_k": 2, "expert_rank": 2, "renormalize": True,
                                        "balance_reg": 0.0}, allowed={"goat_s"}),
    ]
}

# variant params consumed by apply_init rather than the adapter class
_INIT_OPTS = {"gamma", "gamma_a", "gamma_b"}


def variant_info(name: str) -> VariantInfo:
    try:
        return REGISTRY[name]
    except KeyError:
        raise AdapterError(f"unknown variant {name!r}; known: {sorted(REGISTRY)}") from None


def resolve_spec(spec: AdapterSpec) -> AdapterSpec:
    """Fill registry defaults into ``spec.params`` and reject unknown keys."""
    info = variant_info(spec.variant)
    unknown = set(spec.params) - info.allowed
    if unknown:
        raise AdapterError(f"unknown params for {spec.variant}: {sorted(unknown)}")
    return spec.with_params(**{**info.params, **dict(spec.params)})


def build_adapter(spec: AdapterSpec, base, rng: RngStream | None = None, ctx: GradContext | None = None,
                  layer: str | None = None, bank: SharedBank | None = None) -> LoRAAdapter:
    """Construct and initialize the adapter named by ``spec.variant``."""
    spec = resolve_spec(spec)
    info = variant_info(spec.variant)
    kwargs = {"bank": bank} if bank is not None else {}
    adapter = info.cls(spec, base, rng, True, **kwargs)
    adapter.kind = spec.variant
    if info.init != "default":
        opts = {k: spec.params[k] for k in _INIT_OPTS if k in spec.params}
        apply_init(adapter, info.init, ctx, layer, **opts)
    return adapter


def from_state_dict(state: dict) -> LoRAAdapter:
    """Rebuild an adapter from :meth:`LoRAAdapter.state_dict` output."""
    sd = dict(state["spec"])
    spec = AdapterSpec(**{**sd, "params": dict(sd["params"])})
    info = variant_info(spec.variant)
    adapter = info.cls(spec, mat_from_json(state["base"]), None, True)
    adapter.kind = spec.variant
    # init may have adjusted the base; the saved one is authoritative
    adapter.base = mat_from_json(state["base"])
    adapter.params = {k: mat_from_json(v) for k, v in state["params"].items()}
    if state["shared"]:
        tensors = {k: mat_from_json(v) for k, v in state["shared"].items()}
        bank = SharedBank(spec.variant, tensors, trainable=state.get("shared_trainable", ()))
        for local in tensors:
            adapter.shared[local] = (bank, local)
        adapter.bank = bank
    adapter.trainable = set(state["trainable"])
    adapter.step = state["step"]
    adapter.base_adjusted = state["base_adjusted"]
    adapter.init_kind = state["init_kind"]
    adapter.load_extra_state(state["extras"])
    if state["merged"]:
        adapter._merged_delta = mat_from_json(state["merged_delta"])
        adapter.merged = True
    return adapter


__all__ = [
    "AdapterError", "AdapterSpec", "LoRAAdapter", "NotMaterializable", "REGISTRY", "SharedBank",
    "VariantInfo", "build_adapter", "frozen_a_accumulation", "from_state_dict", "lora_gradients",
    "resolve_spec", "stepwise_update_approx", "variant_info",
]
