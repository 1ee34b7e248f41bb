"""Named trainable parameters.

A ParamStore is an ordered mapping from dotted names (e.g. ``tgt.value.w0``)
to leaf tensors. Ordering is insertion order, which the builders keep fixed,
so byte-level comparisons and checkpoint layouts are deterministic.
"""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


class ParamStore:
    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def tensors(self, predicate: Callable[[str], bool] | None = None) -> dict[str, Tensor]:
        if predicate is None:
            return dict(self._params)
        return {n: t for n, t in self._params.items() if predicate(n)}

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def copy(self) -> "ParamStore":
        dup = ParamStore()
        for name, t in self._params.items():
            dup.add(name, t.data.copy())
        return dup

    def load_state(self, other: "ParamStore") -> None:
        """Copy values from `other` in place (names and shapes must match)."""
        if other.names() != self.names():
            raise ContractError("parameter stores have different names")
        for name, t in self._params.items():
            src = other[name]
            if src.shape != t.shape:
                raise ContractError(f"parameter {name!r}: shape {src.shape} != {t.shape}")
            t.data[...] = src.data

    def to_bytes(self) -> bytes:
        """Concatenated little-endian float64 payload (for bit-level checks)."""
        return b"".join(
            np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in self._params.values()
        )

    def n_values(self) -> int:
        return sum(t.size for t in self._params.values())
