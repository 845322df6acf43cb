"""Named parameter store with freezing groups, LoRA adapters, and buffers.

Parameters are the trainable tensors, organized into the stage-freezing groups.
Buffers hold the frozen stand-ins for pretrained components (the vision
codec); they are serialized with checkpoints but never receive gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from u4d import autodiff as ad
from u4d.autodiff import Parameter, Tensor
from u4d.errors import ConfigError, ContractError

STAGE_GROUPS = {
    1: ("embeddings", "projector", "llm_lower", "heads"),
    2: ("ste", "fusion", "llm_higher", "heads"),
    3: ("lora",),
}


@dataclass
class LoRAAdapter:
    target: str
    A: Tensor
    B: Tensor
    rank: int
    scaling: float


class ModelState:
    def __init__(self):
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, Tensor] = {}
        self.lora: dict[str, LoRAAdapter] = {}

    # -- registration -----------------------------------------------------
    def add(self, name: str, array: np.ndarray, group: str) -> Tensor:
        if name in self.params or name in self.buffers:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(array, requires_grad=True)
        self.params[name] = Parameter(name, t, group)
        return t

    def add_buffer(self, name: str, array: np.ndarray) -> Tensor:
        if name in self.params or name in self.buffers:
            raise ContractError(f"duplicate buffer name {name!r}")
        t = Tensor(array, requires_grad=False)
        self.buffers[name] = t
        return t

    # -- access -----------------------------------------------------------
    def tensor(self, name: str) -> Tensor:
        if name in self.params:
            return self.params[name].tensor
        if name in self.buffers:
            return self.buffers[name]
        raise ContractError(f"unknown parameter {name!r}")

    def weight(self, name: str) -> Tensor:
        """Weight for the forward pass; includes the LoRA delta when attached."""
        base = self.tensor(name)
        adapter = self.lora.get(name)
        if adapter is None:
            return base
        return ad.add(base, ad.scale(ad.matmul(adapter.A, adapter.B), adapter.scaling))

    def trainable(self):
        return [p for p in self.params.values() if p.tensor.requires_grad]

    def zero_grad(self):
        for p in self.params.values():
            p.tensor.grad = None

    # -- LoRA ---------------------------------------------------------------
    def apply_lora(self, targets, rank: int, scaling: float = 1.0,
                   rng: np.random.Generator | None = None):
        """Attach rank-`rank` adapters; B starts at zero so outputs are unchanged."""
        if rank < 1:
            raise ContractError("LoRA rank must be >= 1")
        rng = rng or np.random.default_rng(0)
        for target in targets:
            if target not in self.params:
                raise ContractError(f"LoRA target {target!r} does not exist")
            if target in self.lora:
                raise ContractError(f"LoRA already applied to {target!r}")
            w = self.params[target].tensor
            if w.data.ndim != 2:
                raise ContractError(f"LoRA target {target!r} is not a weight matrix")
            d_in, d_out = w.data.shape
            if rank >= min(d_in, d_out):
                raise ContractError(f"LoRA rank {rank} too large for {target!r} {w.data.shape}")
            a = self.add(f"{target}.lora_A", ad.xavier_uniform(rng, d_in, rank), "lora")
            b = self.add(f"{target}.lora_B", np.zeros((rank, d_out)), "lora")
            self.lora[target] = LoRAAdapter(target, a, b, rank, scaling)

    def merge_lora(self):
        """Fold every adapter delta into its base weight and drop the adapters."""
        for target, adapter in list(self.lora.items()):
            base = self.params[target].tensor
            base.data = base.data + adapter.scaling * (adapter.A.data @ adapter.B.data)
            del self.params[f"{target}.lora_A"]
            del self.params[f"{target}.lora_B"]
            del self.lora[target]

    # -- stage freezing -----------------------------------------------------
    def set_trainable(self, stage: int):
        if stage not in STAGE_GROUPS:
            raise ConfigError(f"unknown training stage {stage!r}")
        groups = STAGE_GROUPS[stage]
        if stage == 3 and not self.lora:
            raise ContractError("stage 3 trains LoRA adapters; apply_lora first")
        for p in self.params.values():
            p.tensor.requires_grad = p.group in groups

    # -- serialization ------------------------------------------------------
    def arrays(self) -> dict:
        out = {name: p.tensor.data for name, p in self.params.items()}
        out.update({name: t.data for name, t in self.buffers.items()})
        return out

    def snapshot(self) -> dict:
        return {name: arr.copy() for name, arr in self.arrays().items()}

    def load_arrays(self, arrays: dict):
        """Two-phase load: validate everything, then assign (no partial state)."""
        own = self.arrays()
        missing = sorted(set(own) - set(arrays))
        extra = sorted(set(arrays) - set(own))
        if missing or extra:
            raise ContractError(f"parameter name mismatch: missing={missing} extra={extra}")
        for name, arr in arrays.items():
            if tuple(arr.shape) != tuple(own[name].shape):
                raise ContractError(
                    f"shape mismatch for {name!r}: {arr.shape} vs {own[name].shape}"
                )
        for name, p in self.params.items():
            p.tensor.data = np.array(arrays[name], dtype=np.float64, copy=True)
        for name, t in self.buffers.items():
            t.data = np.array(arrays[name], dtype=np.float64, copy=True)
