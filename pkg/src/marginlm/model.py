"""Two-layer LSTM language model.

Produces the context vectors consumed by the margin head and owns every
trainable parameter: the (untied) input embedding, two stacked LSTM
layers, the output word-vector matrix whose rows the head rescales, and
the output bias.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LstmLayer:
    w_x: Tensor   # [d_in × 4·d_h], gate order i|f|g|o
    w_h: Tensor   # [d_h × 4·d_h]
    bias: Tensor  # [4·d_h], forget slice starts at 1.0


@dataclass
class LstmState:
    """Per-layer (cell, hidden) pairs, each [num_streams × d_h]."""

    layers: list[tuple[Tensor, Tensor]]

    def detach(self) -> "LstmState":
        """Sever gradient flow between BPTT windows; values unchanged."""
        return LstmState([(c.detach(), h.detach()) for c, h in self.layers])

    @staticmethod
    def zeros(num_layers: int, num_streams: int, d_hidden: int,
              dtype=np.float64) -> "LstmState":
        return LstmState([
            (Tensor(np.zeros((num_streams, d_hidden), dtype=dtype)),
             Tensor(np.zeros((num_streams, d_hidden), dtype=dtype)))
            for _ in range(num_layers)
        ])


class LmModel:
    """LSTM language model with deterministic seeded initialization.

    Weights draw uniformly from [-r, r] with r = 1/sqrt(d_hidden); LSTM
    biases start at zero except the forget gate at 1.0; the output bias
    starts at zero.  The embedding is not tied to the output matrix.
    """

    NUM_LAYERS = 2

    def __init__(self, vocab_size: int, d_hidden: int,
                 d_emb: int | None = None, seed: int = 0,
                 dtype=np.float64):
        if vocab_size < 1 or d_hidden < 1:
            raise ValueError("vocab_size and d_hidden must be positive")
        self.vocab_size = vocab_size
        self.d_hidden = d_hidden
        self.d_emb = d_hidden if d_emb is None else d_emb
        self.dtype = np.dtype(dtype)
        self.seed = seed

        rng = np.random.default_rng(seed)
        r = 1.0 / np.sqrt(d_hidden)

        def uniform(*shape):
            return Tensor(rng.uniform(-r, r, size=shape).astype(self.dtype),
                          requires_grad=True)

        self.embedding = uniform(vocab_size, self.d_emb)
        self.layers: list[LstmLayer] = []
        for k in range(self.NUM_LAYERS):
            d_in = self.d_emb if k == 0 else d_hidden
            bias = np.zeros(4 * d_hidden, dtype=self.dtype)
            bias[d_hidden:2 * d_hidden] = 1.0
            self.layers.append(LstmLayer(
                w_x=uniform(d_in, 4 * d_hidden),
                w_h=uniform(d_hidden, 4 * d_hidden),
                bias=Tensor(bias, requires_grad=True),
            ))
        self.w_out = uniform(vocab_size, d_hidden)
        self.b_out = Tensor(np.zeros(vocab_size, dtype=self.dtype),
                            requires_grad=True)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Parameters in the fixed order used by checkpoints."""
        out = [("embedding", self.embedding)]
        for k, layer in enumerate(self.layers):
            out.extend([(f"lstm{k}.w_x", layer.w_x),
                        (f"lstm{k}.w_h", layer.w_h),
                        (f"lstm{k}.bias", layer.bias)])
        out.extend([("w_out", self.w_out), ("b_out", self.b_out)])
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def set_parameters(self, tensors: list[Tensor]) -> None:
        """Swap in replacement parameter Tensors, checkpoint order."""
        names = [n for n, _ in self.named_parameters()]
        if len(tensors) != len(names):
            raise ValueError(f"expected {len(names)} tensors, "
                             f"got {len(tensors)}")
        it = iter(tensors)
        self.embedding = next(it)
        for layer in self.layers:
            layer.w_x, layer.w_h, layer.bias = next(it), next(it), next(it)
        self.w_out, self.b_out = next(it), next(it)

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def zero_state(self, num_streams: int) -> LstmState:
        return LstmState.zeros(self.NUM_LAYERS, num_streams, self.d_hidden,
                               self.dtype)

    def _step(self, layer: LstmLayer, x: Tensor, c: Tensor,
              h: Tensor) -> tuple[Tensor, Tensor]:
        d = self.d_hidden
        gates = x @ layer.w_x + h @ layer.w_h + layer.bias
        i = ad.sigmoid(gates[:, :d])
        f = ad.sigmoid(gates[:, d:2 * d])
        g = ad.tanh(gates[:, 2 * d:3 * d])
        o = ad.sigmoid(gates[:, 3 * d:])
        c_new = f * c + i * g
        return c_new, o * ad.tanh(c_new)

    def forward(self, inputs: np.ndarray,
                state: LstmState) -> tuple[Tensor, LstmState]:
        """Run the recurrence over an id matrix [num_streams × steps].

        Returns the top-layer context vectors with shape
        [num_streams × steps × d_hidden] and the new state.  The state is
        returned live; callers detach it between BPTT windows.
        """
        inputs = np.asarray(inputs)
        if inputs.ndim != 2:
            raise ValueError(f"inputs must be 2-D, got shape {inputs.shape}")
        num_streams, steps = inputs.shape
        x_all = ad.rows(self.embedding, inputs)  # [S × T × d_emb]
        cells = [c for c, _ in state.layers]
        hiddens = [h for _, h in state.layers]
        outputs = []
        for t in range(steps):
            x = x_all[:, t, :]
            for k, layer in enumerate(self.layers):
                cells[k], hiddens[k] = self._step(layer, x, cells[k],
                                                  hiddens[k])
                x = hiddens[k]
            outputs.append(x.reshape((num_streams, 1, self.d_hidden)))
        h_top = ad.concat(outputs, axis=1)
        return h_top, LstmState(list(zip(cells, hiddens)))
