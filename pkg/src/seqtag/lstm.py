"""LSTM memory cell shared by the tagger BiLSTM and the character language models."""
from __future__ import annotations

import numpy as np

from .numerics import (
    ContractViolation,
    Parameter,
    Tensor,
    add,
    as_tensor,
    concat,
    glorot_uniform,
    linear,
    mul,
    sigmoid,
    tanh,
)

GATES = ("f", "i", "c", "o")


class LstmCell:
    """One LSTM cell with separate forget/input/candidate/output weights.

    Every gate matrix has shape ``(hidden, hidden + input)`` and acts on the
    concatenation ``[h_prev, x]``.
    """

    def __init__(self, input_size: int, hidden_size: int, name: str = "lstm",
                 rng: np.random.Generator | None = None, requires_grad: bool = True):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.name = name
        shape = (hidden_size, hidden_size + input_size)
        self.W = {}
        self.b = {}
        for g in GATES:
            w = glorot_uniform(shape, rng) if rng is not None else np.zeros(shape)
            self.W[g] = Parameter(w, f"{name}.W_{g}", requires_grad)
            self.b[g] = Parameter(np.zeros(hidden_size), f"{name}.b_{g}", requires_grad)

    def parameters(self) -> list[Parameter]:
        return [self.W[g] for g in GATES] + [self.b[g] for g in GATES]

    def zero_state(self, batch: int | None = None) -> tuple[Tensor, Tensor]:
        shape = (self.hidden_size,) if batch is None else (batch, self.hidden_size)
        return Tensor(np.zeros(shape)), Tensor(np.zeros(shape))

    def step(self, x, h_prev, c_prev) -> tuple[Tensor, Tensor]:
        x, h_prev, c_prev = as_tensor(x), as_tensor(h_prev), as_tensor(c_prev)
        if x.shape[-1] != self.input_size or h_prev.shape[-1] != self.hidden_size \
                or c_prev.shape != h_prev.shape or x.shape[:-1] != h_prev.shape[:-1]:
            raise ContractViolation(
                f"{self.name}: got x{x.shape}, h{h_prev.shape}, c{c_prev.shape} for "
                f"input {self.input_size}, hidden {self.hidden_size}")
        hx = concat([h_prev, x])
        f = sigmoid(linear(self.W["f"], hx, self.b["f"]))
        i = sigmoid(linear(self.W["i"], hx, self.b["i"]))
        c_tilde = tanh(linear(self.W["c"], hx, self.b["c"]))
        c = add(mul(f, c_prev), mul(i, c_tilde))
        o = sigmoid(linear(self.W["o"], hx, self.b["o"]))
        h = mul(o, tanh(c))
        return h, c

    def arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self.parameters()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.value[...] = arrays[p.name]


def lstm_cell_step(cell: LstmCell, x_t, h_prev, c_prev) -> tuple[Tensor, Tensor]:
    return cell.step(x_t, h_prev, c_prev)
