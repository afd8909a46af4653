from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from .tensor import Tensor

ROLES = ("dense", "conv", "batchnorm_stat", "batchnorm_affine", "bias")
BATCHNORM_ROLES = frozenset({"batchnorm_stat", "batchnorm_affine"})


@dataclass
class ParamEntry:
    name: str
    tensor: Tensor
    role: str


class ParamSet:
    """Ordered, uniquely named parameter tensors tagged with a layer role.

    Trainable entries are tensors with ``requires_grad``; batch-norm running
    statistics live here too (role ``batchnorm_stat``) so that they travel
    with the model through cloning, aggregation and checkpoints.
    """

    def __init__(self, entries=()):
        self._entries: dict[str, ParamEntry] = {}
        for name, tensor, role in entries:
            self.add(name, tensor, role)

    def add(self, name: str, tensor: Tensor, role: str) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}; expected one of {ROLES}")
        self._entries[name] = ParamEntry(name, tensor, role)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[ParamEntry]:
        return iter(self._entries.values())

    def names(self) -> list[str]:
        return list(self._entries)

    def role(self, name: str) -> str:
        return self._entries[name].role

    def trainable(self) -> list[ParamEntry]:
        return [e for e in self if e.tensor.requires_grad]

    def num_trainable(self) -> int:
        return sum(e.tensor.size for e in self.trainable())

    def signature(self) -> list[tuple[str, str, tuple[int, ...]]]:
        return [(e.name, e.role, e.tensor.shape) for e in self]

    def congruent(self, other: "ParamSet") -> bool:
        return self.signature() == other.signature()

    def clone(self) -> "ParamSet":
        out = ParamSet()
        for e in self:
            out.add(e.name, Tensor(e.tensor.data.copy(), requires_grad=e.tensor.requires_grad), e.role)
        return out

    def zero_grad(self) -> None:
        for e in self:
            e.tensor.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {e.name: e.tensor.data for e in self}

    def load_arrays(self, arrays: Mapping[str, np.ndarray], names=None) -> None:
        """Copy values into the existing tensors (shapes must match)."""
        for name in self.names() if names is None else names:
            src = np.asarray(arrays[name], dtype=np.float64)
            dst = self[name].data
            if src.shape != dst.shape:
                raise ValueError(f"shape mismatch for {name!r}: {src.shape} vs {dst.shape}")
            dst[...] = src

    def equal(self, other: "ParamSet") -> bool:
        """Bit-exact equality of names, roles, shapes and values."""
        return self.congruent(other) and all(
            np.array_equal(a.tensor.data, b.tensor.data) for a, b in zip(self, other)
        )

    def __repr__(self) -> str:
        return f"ParamSet({len(self)} entries, {self.num_trainable()} trainable scalars)"
