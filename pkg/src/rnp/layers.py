"""Linear layers, MLPs and LSTMs built on :mod:`rnp.autodiff`.

All layers work on batched inputs of shape ``[batch, features]``.
"""

from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ACTIVATIONS = {
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "softplus": ad.softplus,
    "linear": lambda t: t,
}


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def _uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    fan_out, fan_in = shape
    a = xavier_bound(fan_in, fan_out)
    return rng.uniform(-a, a, size=shape)


class Module:
    """Parameter bookkeeping: subclasses list their children in ``_children``."""

    _children: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for attr in self._children:
            obj = getattr(self, attr)
            name = f"{prefix}{attr}"
            if obj is None:
                continue
            if isinstance(obj, Tensor):
                yield name, obj
            elif isinstance(obj, Module):
                yield from obj.named_parameters(name + ".")
            else:
                for i, sub in enumerate(obj):
                    yield from sub.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_dict(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())


class Linear(Module):
    """Affine map ``x @ weight.T + bias`` with ``weight`` of shape ``[out, in]``."""

    _children = ("weight", "bias")

    def __init__(self, in_size: int, out_size: int, rng: np.random.Generator):
        if in_size <= 0 or out_size <= 0:
            raise ValueError(f"layer sizes must be positive, got {in_size} -> {out_size}")
        self.in_size = in_size
        self.out_size = out_size
        self.weight = ad.parameter(_uniform(rng, (out_size, in_size)))
        self.bias = ad.parameter(np.zeros(out_size))

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.in_size:
            raise ValueError(f"Linear expects [batch, {self.in_size}], got {x.shape}")
        return ad.matmul(x, ad.transpose(self.weight)) + ad.tile_rows(self.bias, x.shape[0])


class Mlp(Module):
    """Chain of :class:`Linear` layers with an activation between them.

    No activation follows the last layer.
    """

    _children = ("layers",)

    def __init__(
        self,
        sizes: Sequence[int],
        rng: np.random.Generator,
        activation: str = "tanh",
    ):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.sizes = tuple(sizes)
        self.activation = activation
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    @property
    def in_size(self) -> int:
        return self.sizes[0]

    @property
    def out_size(self) -> int:
        return self.sizes[-1]

    def __call__(self, x: Tensor) -> Tensor:
        act = ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x


def mlp_forward(m: Mlp, x: Tensor) -> Tensor:
    return m(x)


class LstmCell(Module):
    """Standard LSTM cell without peepholes.

    Gate blocks inside ``w_ih``, ``w_hh`` and ``bias`` are ordered
    (input, forget, output, candidate); the forget block of ``bias`` starts at 1.
    """

    _children = ("w_ih", "w_hh", "bias")

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator):
        if input_size <= 0 or hidden_size <= 0:
            raise ValueError("LSTM sizes must be positive")
        self.input_size = input_size
        self.hidden_size = hidden_size
        h = hidden_size
        self.w_ih = ad.parameter(_uniform(rng, (4 * h, input_size)))
        self.w_hh = ad.parameter(_uniform(rng, (4 * h, h)))
        bias = np.zeros(4 * h)
        bias[h : 2 * h] = 1.0
        self.bias = ad.parameter(bias)

    def prepare(self, batch: int) -> tuple[Tensor, Tensor, Tensor]:
        """Transposed weights and tiled bias, built once per sequence."""
        return (
            ad.transpose(self.w_ih),
            ad.transpose(self.w_hh),
            ad.tile_rows(self.bias, batch),
        )

    def step(self, x: Tensor, h: Tensor, c: Tensor, prepared=None) -> tuple[Tensor, Tensor]:
        hs = self.hidden_size
        if x.data.ndim != 2 or x.shape[1] != self.input_size:
            raise ValueError(f"LSTM input must be [batch, {self.input_size}], got {x.shape}")
        if h.shape != (x.shape[0], hs) or c.shape != (x.shape[0], hs):
            raise ValueError(f"LSTM state must be [batch, {hs}], got {h.shape} / {c.shape}")
        w_ih_t, w_hh_t, bias = prepared or self.prepare(x.shape[0])
        gates = ad.matmul(x, w_ih_t) + ad.matmul(h, w_hh_t) + bias
        sig = ad.sigmoid(ad.slice_(gates, 1, 0, 3 * hs))
        i = ad.slice_(sig, 1, 0, hs)
        f = ad.slice_(sig, 1, hs, 2 * hs)
        o = ad.slice_(sig, 1, 2 * hs, 3 * hs)
        g = ad.tanh(ad.slice_(gates, 1, 3 * hs, 4 * hs))
        c_new = f * c + i * g
        h_new = o * ad.tanh(c_new)
        return h_new, c_new


def lstm_step(cell: LstmCell, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    return cell.step(x, h, c)


def zeros(batch: int, size: int) -> Tensor:
    return ad.constant(np.zeros((batch, size)))


class LstmStack(Module):
    """Layers of LSTM cells; layer ``k`` reads the hidden states of layer ``k-1``."""

    _children = ("cells",)

    def __init__(self, input_size: int, hidden_size: int, num_layers: int, rng: np.random.Generator):
        if num_layers < 1:
            raise ValueError("need at least one LSTM layer")
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.cells = [
            LstmCell(input_size if k == 0 else hidden_size, hidden_size, rng)
            for k in range(num_layers)
        ]

    def run(
        self,
        steps: Sequence[Tensor],
        init: Sequence[tuple[Tensor, Tensor]] | None = None,
    ) -> list[Tensor]:
        """Top-layer hidden state after every step."""
        if not steps:
            raise ValueError("cannot encode an empty sequence")
        batch = steps[0].shape[0]
        layer_inputs = list(steps)
        for k, cell in enumerate(self.cells):
            prepared = cell.prepare(batch)
            if init is None:
                h = c = zeros(batch, self.hidden_size)
            else:
                h, c = init[k]
            outputs = []
            for x in layer_inputs:
                h, c = cell.step(x, h, c, prepared)
                outputs.append(h)
            layer_inputs = outputs
        return layer_inputs


class SequenceEncoder(Module):
    """(Optionally bidirectional) stacked LSTM starting from zero state."""

    _children = ("forward", "backward")

    def __init__(
        self,
        input_size: int,
        hidden_size: int,
        num_layers: int = 1,
        bidirectional: bool = False,
        rng: np.random.Generator | None = None,
        backward_rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.bidirectional = bidirectional
        self.forward = LstmStack(input_size, hidden_size, num_layers, rng)
        self.backward = (
            LstmStack(input_size, hidden_size, num_layers, backward_rng or rng)
            if bidirectional
            else None
        )

    @property
    def out_size(self) -> int:
        return self.hidden_size * (2 if self.bidirectional else 1)

    def _runs(self, steps: Sequence[Tensor]) -> tuple[list[Tensor], list[Tensor] | None]:
        fwd = self.forward.run(steps)
        if not self.bidirectional:
            return fwd, None
        bwd = self.backward.run(list(reversed(steps)))
        bwd.reverse()  # bwd[j] has read steps j..J-1
        return fwd, bwd

    def encode(self, steps: Sequence[Tensor]) -> list[Tensor]:
        """Per-step states; bidirectional states are ``[fwd_j, bwd_j]``."""
        fwd, bwd = self._runs(steps)
        if bwd is None:
            return fwd
        return [ad.concat([f, b], axis=1) for f, b in zip(fwd, bwd)]

    def final_state(self, steps: Sequence[Tensor]) -> Tensor:
        """Last forward state, joined with the last backward state if bidirectional."""
        fwd, bwd = self._runs(steps)
        if bwd is None:
            return fwd[-1]
        return ad.concat([fwd[-1], bwd[0]], axis=1)


def encode_sequence(enc: SequenceEncoder, steps: Sequence[Tensor]) -> list[Tensor]:
    return enc.encode(steps)


def init_params(sizes: Sequence[int], seed: int, activation: str = "tanh") -> Mlp:
    """Seeded MLP with Xavier-uniform weights and zero biases."""
    if any(s <= 0 for s in sizes):
        raise ValueError(f"layer sizes must be positive, got {list(sizes)}")
    return Mlp(sizes, np.random.default_rng(seed), activation)
