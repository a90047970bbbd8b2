"""Named parameters with group tags and trainability flags.

Every learnable tensor in a model lives in exactly one registry under a
unique hierarchical name and carries one of three group tags: Backbone
(the pre-trained trunk), Target (parameters a PEFT mechanism introduces),
or Head (task heads and reconstruction scaffolding). Freezing is enforced
at the tensor level: a non-trainable param has ``requires_grad=False`` so
backward never computes a gradient for it, and optimizers only ever see
trainable params.
"""

from __future__ import annotations

from contextlib import contextmanager
from enum import Enum

import numpy as np

from .errors import StateError, StructuralError
from .tensor import Tensor


class ParamGroup(Enum):
    BACKBONE = "backbone"
    TARGET = "target"
    HEAD = "head"


class Param:
    """One named parameter: tensor + group tag + trainable flag."""

    __slots__ = ("name", "tensor", "group", "_trainable")

    def __init__(self, name: str, tensor: Tensor, group: ParamGroup, trainable: bool):
        self.name = name
        self.tensor = tensor
        self.group = group
        self._trainable = bool(trainable)
        tensor.requires_grad = self._trainable

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self._trainable = bool(flag)
        self.tensor.requires_grad = self._trainable
        if not self._trainable:
            self.tensor.grad = None

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    def __repr__(self) -> str:
        return f"Param({self.name}, shape={list(self.tensor.shape)}, group={self.group.value}, trainable={self.trainable})"


class ParamRegistry:
    """Insertion-ordered collection of uniquely named params."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def register(self, name: str, data, group: ParamGroup, trainable: bool = True) -> Param:
        if name in self._params:
            raise StateError(f"parameter name already registered: {name}")
        tensor = data if isinstance(data, Tensor) else Tensor(np.asarray(data, dtype=np.float64))
        param = Param(name, tensor, group, trainable)
        self._params[name] = param
        return param

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self):
        return iter(self._params.values())

    def get(self, name: str) -> Param:
        try:
            return self._params[name]
        except KeyError:
            raise StructuralError(f"no such parameter: {name}") from None

    def names(self) -> list[str]:
        return list(self._params)

    def params(self, group: ParamGroup | None = None, trainable: bool | None = None,
               prefix: str | None = None) -> list[Param]:
        out = []
        for p in self._params.values():
            if group is not None and p.group is not group:
                continue
            if trainable is not None and p.trainable is not trainable:
                continue
            if prefix is not None and not p.name.startswith(prefix):
                continue
            out.append(p)
        return out

    # -- accounting ----------------------------------------------------

    def count(self, group: ParamGroup | None = None, trainable: bool | None = None) -> int:
        """Total number of scalar parameters matching the filters."""
        return sum(p.tensor.size for p in self.params(group, trainable))

    def trainable_ratio(self) -> float:
        """Trainable / total parameters, as a percentage."""
        total = self.count()
        if total == 0:
            return 0.0
        return 100.0 * self.count(trainable=True) / total

    # -- freezing ------------------------------------------------------

    def set_group_trainable(self, group: ParamGroup, flag: bool) -> None:
        for p in self.params(group):
            p.trainable = flag

    def retag(self, name: str, group: ParamGroup) -> None:
        self.get(name).group = group

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.tensor.grad = None

    # -- state movement --------------------------------------------------

    def state(self, groups=None, exclude_prefixes: tuple[str, ...] = ()) -> dict[str, np.ndarray]:
        """Copy of parameter data, optionally filtered by group / name prefix."""
        out = {}
        for p in self._params.values():
            if groups is not None and p.group not in groups:
                continue
            if any(p.name.startswith(pref) for pref in exclude_prefixes):
                continue
            out[p.name] = p.data.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray], strict_extra: bool = True) -> None:
        """Copy arrays into same-named params; shape mismatches are collected."""
        offenders = []
        for name, arr in state.items():
            if name not in self._params:
                if strict_extra:
                    offenders.append(f"{name}: not in registry")
                continue
            p = self._params[name]
            if p.data.shape != arr.shape:
                offenders.append(
                    f"{name}: checkpoint {list(arr.shape)} vs model {list(p.data.shape)}"
                )
                continue
            p.tensor.data = np.array(arr, dtype=np.float64)
        if offenders:
            raise StructuralError("load_state mismatches: " + "; ".join(offenders))

    @contextmanager
    def swap(self, values: dict[str, np.ndarray]):
        """Temporarily substitute parameter data (used for teacher forwards)."""
        saved = {}
        try:
            for name, arr in values.items():
                p = self.get(name)
                saved[name] = p.tensor.data
                p.tensor.data = arr
            yield self
        finally:
            for name, arr in saved.items():
                self._params[name].tensor.data = arr
