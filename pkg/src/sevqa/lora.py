"""Low-rank adapters over attention projections with a frozen base model.

Each adapted projection W (stored d_in x d_out, used as x @ W) gains a pair
A (r x d_in) and B (d_out x r) with effective weight W + (alpha/r) * B A
acting on column vectors; in row convention the forward is
``x @ W + s * (x @ A.T) @ B.T``. B starts at zero, so attaching adapters
never changes model behavior, and :func:`merge` bakes the delta back into
a plain model for deployment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import Model

_KNOWN_TARGETS = ("q", "k", "v", "o")


class UnknownTarget(ValueError):
    pass


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 4
    alpha: float = 8.0
    targets: tuple[str, ...] = ("q", "v")
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def as_dict(self) -> dict:
        return {
            "rank": self.rank,
            "alpha": self.alpha,
            "targets": list(self.targets),
            "seed": self.seed,
        }


class AdaptedModel:
    """Frozen base plus per-target (A, B) pairs; only A/B are trainable."""

    def __init__(self, base: Model, config: LoraConfig,
                 adapters: dict[tuple[int, str], tuple[ad.Tensor, ad.Tensor]]):
        self.base = base
        self.lora_config = config
        self.adapters = adapters

    def __getattr__(self, name):
        return getattr(self.base, name)

    def project(self, layer: int, which: str, x: ad.Tensor) -> ad.Tensor:
        y = self.base.project(layer, which, x)
        pair = self.adapters.get((layer, which))
        if pair is None:
            return y
        a, b = pair
        delta = ad.matmul(ad.matmul(x, ad.transpose(a)), ad.transpose(b))
        return ad.add(y, ad.scale(delta, self.lora_config.scaling))

    def adapter_items(self) -> list[tuple[str, ad.Tensor]]:
        """Adapter tensors in canonical (checkpoint) order."""
        items = []
        for (layer, which), (a, b) in sorted(self.adapters.items()):
            items.append((f"layer{layer}.{which}.lora_A", a))
            items.append((f"layer{layer}.{which}.lora_B", b))
        return items

    def adapter_bytes(self) -> bytes:
        return b"".join(t.data.astype("<f8").tobytes() for _, t in self.adapter_items())


def attach(model: Model, config: LoraConfig) -> AdaptedModel:
    """Wrap `model` with zero-initialized adapters; freezes the base in place."""
    for target in config.targets:
        if target not in _KNOWN_TARGETS:
            raise UnknownTarget(f"no projection named {target!r} (know {_KNOWN_TARGETS})")
    d = model.config.embed_dim
    rng = np.random.default_rng(config.seed)
    adapters: dict[tuple[int, str], tuple[ad.Tensor, ad.Tensor]] = {}
    for layer in range(model.config.n_layers):
        for which in _KNOWN_TARGETS:
            if which not in config.targets:
                continue
            a = ad.Tensor(rng.normal(0.0, 0.02, (config.rank, d)),
                          requires_grad=True, name=f"layer{layer}.{which}.lora_A")
            b = ad.Tensor(np.zeros((d, config.rank)),
                          requires_grad=True, name=f"layer{layer}.{which}.lora_B")
            adapters[(layer, which)] = (a, b)
    for p in model.parameters():
        p.requires_grad = False
    return AdaptedModel(base=model, config=config, adapters=adapters)


def trainable_parameters(adapted: AdaptedModel) -> list[ad.Tensor]:
    """Exactly the A and B tensors; the optimizer must touch nothing else."""
    return [t for _, t in adapted.adapter_items()]


def merge(adapted: AdaptedModel) -> Model:
    """Plain model with W <- W + scaling * (B A) baked into every target."""
    merged = adapted.base.copy()
    s = adapted.lora_config.scaling
    for (layer, which), (a, b) in adapted.adapters.items():
        w = getattr(merged.layers[layer], f"w{which}")
        w.data = w.data + s * (b.data @ a.data).T
    return merged
