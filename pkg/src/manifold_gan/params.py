"""Named, ordered parameter collections."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Mapping

import numpy as np

from .autodiff import Tape, Tensor


class ParameterStore:
    """Ordered mapping of parameter name to array.

    ``bind`` places every array on a tape as a leaf so one forward pass can
    be differentiated; ``gradients`` maps the tape's result back to names.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None):
        self._arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, arr in (arrays or {}).items():
            self[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value) -> None:
        self._arrays[name] = np.asarray(value)

    def __contains__(self, name) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: v.copy() for k, v in self._arrays.items()})

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore({k: v.astype(dtype) for k, v in self._arrays.items()})

    def size(self) -> int:
        return int(sum(v.size for v in self._arrays.values()))

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self._arrays.items()}

    def bind(self, tape: Tape) -> dict[str, Tensor]:
        return {k: tape.watch(v) for k, v in self._arrays.items()}

    @staticmethod
    def gradients(tape: Tape, loss: Tensor, bound: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        names = list(bound)
        grads = tape.gradient(loss, [bound[n] for n in names])
        return dict(zip(names, grads))

    def equal(self, other: "ParameterStore") -> bool:
        """Bitwise equality of names, shapes and values."""
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[n], other[n]) and self[n].dtype == other[n].dtype
                   for n in self)
