from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .fbt import read_fbt, write_fbt
from .tensor import DEFAULT_DTYPE, Tensor


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Named learnable tensors with gradient accumulators.

    Initialization draws from one seeded generator in registration order, so
    (seed, architecture) fixes every initial value.
    """

    def __init__(self, seed: int = 0, dtype=DEFAULT_DTYPE):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, shape, init: str | np.ndarray = "uniform", fan_in: int | None = None) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        shape = tuple(int(s) for s in shape)
        if isinstance(init, np.ndarray):
            data = np.array(init, dtype=self.dtype).reshape(shape)
        elif init == "uniform":
            bound = 1.0 / np.sqrt(fan_in if fan_in else shape[0])
            data = self.rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data.astype(self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self):
        return iter(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def count(self) -> int:
        return sum(t.size for t in self._params.values())

    def grad(self, name: str) -> np.ndarray:
        t = self._params[name]
        return np.zeros_like(t.data) if t.grad is None else t.grad

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def fill_missing_grads(self) -> None:
        for t in self._params.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        problems = []
        for k, t in self._params.items():
            if k not in state:
                problems.append(f"{k}: missing from checkpoint")
            elif state[k].shape != t.shape:
                problems.append(f"{k}: checkpoint {state[k].shape} vs model {t.shape}")
        for k in state:
            if k not in self._params:
                problems.append(f"{k}: not in model")
        if problems:
            raise CheckpointError("checkpoint/config mismatch:\n  " + "\n  ".join(problems))
        for k, t in self._params.items():
            t.data = np.array(state[k], dtype=self.dtype)

    # -- checkpoint directory: one FBT1 file per tensor plus manifest.txt

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        lines = []
        for name, t in self._params.items():
            fname = f"{name}.fbt"
            write_fbt(d / fname, t.data)
            dims = "x".join(str(s) for s in t.shape) or "scalar"
            kind = "real64" if t.dtype == np.float64 else "real32"
            lines.append(f"{name} {fname} {dims} {kind}")
        (d / "manifest.txt").write_text("\n".join(lines) + "\n")

    def load(self, directory) -> None:
        self.load_state(read_checkpoint(directory))


def read_checkpoint(directory) -> dict[str, np.ndarray]:
    d = Path(directory)
    manifest = d / "manifest.txt"
    if not manifest.exists():
        raise CheckpointError(f"{os.fspath(manifest)}: missing")
    state = {}
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise CheckpointError(f"{manifest}:{lineno}: expected 'name file shape dtype'")
        name, fname, _, _ = parts
        state[name] = read_fbt(d / fname)
    return state
