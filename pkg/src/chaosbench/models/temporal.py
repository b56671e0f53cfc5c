"""One-step surrogates G(s_t, s_0) -> s_{t+1} behind a common interface.

Every model exposes ``step(z, cond, rstate) -> (z_next, rstate)`` on batched
autodiff tensors of shape (B, D), plus ``teacher_forced(seq)`` which maps a
ground-truth sequence (B, T, D) to one-step predictions (B, T-1, D).
``rstate`` is whatever the architecture carries between steps: nothing for the
memoryless models, per-layer (h, c) for the LSTM, the recent input window for
the TCN. It is owned by the caller.
"""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..nn import MLP, Linear, Module, uniform_init
from .dopri5 import Dopri5Config, dopri5_integrate


class TemporalModel(Module):
    arch = "base"
    receptive_field = 1

    def __init__(self, state_dim: int, conditioned: bool = True):
        super().__init__()
        self.state_dim = state_dim
        self.conditioned = conditioned

    @property
    def input_dim(self) -> int:
        return 2 * self.state_dim if self.conditioned else self.state_dim

    def _inputs(self, z: Tensor, cond: Tensor | None) -> Tensor:
        if z.shape[-1] != self.state_dim:
            raise ad.ShapeError(f"{self.arch}: state has width {z.shape[-1]}, expected {self.state_dim}")
        if not self.conditioned:
            return z
        if cond is None or cond.shape != z.shape:
            raise ad.ShapeError(f"{self.arch}: conditioning must match state shape {z.shape}")
        return ad.concat([z, cond], axis=-1)

    def init_rstate(self, batch: int):
        return None

    def step(self, z: Tensor, cond: Tensor | None, rstate=None):
        raise NotImplementedError

    def teacher_forced(self, seq: Tensor) -> Tensor:
        """Memoryless default: evaluate every (s_t, s_0) pair in one batch."""
        B, T, D = seq.shape
        if T < 2:
            raise ValueError("teacher forcing needs at least two snapshots")
        cur = seq[:, :-1, :]
        cond = ad.concat([seq[:, :1, :]] * (T - 1), axis=1) if self.conditioned else None
        flat_z = cur.reshape(B * (T - 1), D)
        flat_c = cond.reshape(B * (T - 1), D) if cond is not None else None
        out, _ = self.step(flat_z, flat_c, None)
        return out.reshape(B, T - 1, D)

    def config(self) -> dict:
        raise NotImplementedError


class MLPModel(TemporalModel):
    """Direct next-state prediction with an L-layer GELU MLP."""

    arch = "mlp"

    def __init__(self, state_dim: int, width: int, depth: int, rng, conditioned: bool = True):
        super().__init__(state_dim, conditioned)
        if depth < 1:
            raise ValueError("depth counts linear layers and must be >= 1")
        self.width, self.depth = width, depth
        self.net = self.add_module("net", MLP([self.input_dim] + [width] * (depth - 1) + [state_dim], rng))

    def step(self, z, cond, rstate=None):
        return self.net(self._inputs(z, cond)), rstate

    def config(self):
        return {"width": self.width, "depth": self.depth, "conditioned": self.conditioned}


class CoRDModel(TemporalModel):
    """Conditioned residual dynamics: K explicit Euler sub-steps of a learned field.

    ``residual=False`` replaces each sub-step by the direct map x <- f([x, s_0]).
    """

    arch = "cord"

    def __init__(
        self, state_dim: int, width: int, depth: int, rng, substeps: int = 3, dt: float = 1.0,
        residual: bool = True, conditioned: bool = True,
    ):
        super().__init__(state_dim, conditioned)
        if substeps < 1:
            raise ValueError("substeps must be >= 1")
        self.width, self.depth = width, depth
        self.substeps, self.dt, self.residual = substeps, dt, residual
        self.field = self.add_module("field", MLP([self.input_dim] + [width] * (depth - 1) + [state_dim], rng))

    def vector_field(self, x: Tensor, cond: Tensor | None) -> Tensor:
        return self.field(self._inputs(x, cond))

    def step(self, z, cond, rstate=None):
        h = self.dt / self.substeps
        x = z
        for _ in range(self.substeps):
            fx = self.vector_field(x, cond)
            x = x + fx * h if self.residual else fx
        return x, rstate

    def config(self):
        return {
            "width": self.width, "depth": self.depth, "substeps": self.substeps, "dt": self.dt,
            "residual": self.residual, "conditioned": self.conditioned,
        }


class NeuralODEModel(TemporalModel):
    """Integrates ds/dtau = f([s, s_0]) over ``h_ode`` with adaptive Dormand-Prince."""

    arch = "node"

    def __init__(self, state_dim: int, width: int, depth: int, rng, h_ode: float = 1.0,
                 solver: Dopri5Config | None = None):
        super().__init__(state_dim, True)
        self.width, self.depth, self.h_ode = width, depth, h_ode
        self.solver = solver or Dopri5Config()
        self.field = self.add_module("field", MLP([self.input_dim] + [width] * (depth - 1) + [state_dim], rng))

    def vector_field(self, x: Tensor, cond: Tensor) -> Tensor:
        return self.field(self._inputs(x, cond))

    def step(self, z, cond, rstate=None):
        self._inputs(z, cond)
        return dopri5_integrate(lambda x: self.vector_field(x, cond), z, self.h_ode, self.solver), rstate

    def config(self):
        s = self.solver
        return {
            "width": self.width, "depth": self.depth, "h_ode": self.h_ode,
            "rtol": s.rtol, "atol": s.atol, "max_steps": s.max_steps,
        }


class LSTMModel(TemporalModel):
    """Stacked LSTM on u_t = [s_t, s_0] with a linear readout of the top hidden state."""

    arch = "lstm"

    def __init__(self, state_dim: int, hidden: int, layers: int, rng):
        super().__init__(state_dim, True)
        self.hidden, self.layers = hidden, layers
        # uniform(+-1/sqrt(hidden)) for all gate parameters
        self.cells = []
        n_in = self.input_dim
        for i in range(layers):
            cell = Module()
            cell.add_param("W", uniform_init(rng, (n_in, 4 * hidden), hidden))
            cell.add_param("U", uniform_init(rng, (hidden, 4 * hidden), hidden))
            cell.add_param("b", uniform_init(rng, (4 * hidden,), hidden))
            self.cells.append(self.add_module(f"cells.{i}", cell))
            n_in = hidden
        self.readout = self.add_module("readout", Linear(hidden, state_dim, rng))

    def init_rstate(self, batch: int):
        zero = np.zeros((batch, self.hidden))
        return [(Tensor(zero), Tensor(zero)) for _ in range(self.layers)]

    def cell_step(self, i: int, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        p = self.cells[i]._params
        H = self.hidden
        gates = ad.matmul(x, p["W"]) + ad.matmul(h, p["U"]) + p["b"]
        ifo = ad.sigmoid(gates[..., : 3 * H])
        g = ad.tanh(gates[..., 3 * H :])
        i_g, f_g, o_g = ifo[..., :H], ifo[..., H : 2 * H], ifo[..., 2 * H :]
        c_new = f_g * c + i_g * g
        h_new = o_g * ad.tanh(c_new)
        return h_new, c_new

    def step(self, z, cond, rstate=None):
        x = self._inputs(z, cond)
        if rstate is None:
            rstate = self.init_rstate(z.shape[0])
        new_state = []
        for i, (h, c) in enumerate(rstate):
            h, c = self.cell_step(i, x, h, c)
            new_state.append((h, c))
            x = h
        return self.readout(x), new_state

    def teacher_forced(self, seq: Tensor) -> Tensor:
        B, T, D = seq.shape
        if T < 2:
            raise ValueError("teacher forcing needs at least two snapshots")
        cond = seq[:, 0, :]
        state = self.init_rstate(B)
        outs = []
        for t in range(T - 1):
            y, state = self.step(seq[:, t, :], cond, state)
            outs.append(y)
        return ad.stack(outs, axis=1)

    def config(self):
        return {"hidden": self.hidden, "layers": self.layers}


class TCNModel(TemporalModel):
    """Input projection, residual blocks of two dilated causal convolutions, linear readout.

    Block ``b`` uses dilation ``2**b`` in both of its convolutions.
    """

    arch = "tcn"

    def __init__(self, state_dim: int, channels: int, blocks: int, rng, kernel: int = 3):
        super().__init__(state_dim, True)
        self.channels, self.blocks, self.kernel = channels, blocks, kernel
        self.proj = self.add_module("proj", Linear(self.input_dim, channels, rng))
        self.convs = []
        for b in range(blocks):
            blk = Module()
            for j in (1, 2):
                blk.add_param(f"w{j}", uniform_init(rng, (kernel, channels, channels), kernel * channels))
                blk.add_param(f"b{j}", uniform_init(rng, (channels,), kernel * channels))
            self.convs.append(self.add_module(f"blocks.{b}", blk))
        self.readout = self.add_module("readout", Linear(channels, state_dim, rng))

    @property
    def receptive_field(self) -> int:
        return 1 + 2 * (self.kernel - 1) * sum(2**b for b in range(self.blocks))

    def forward_sequence(self, u: Tensor) -> Tensor:
        """(B, T, 2D) conditioned inputs -> (B, T, D) predictions, causally."""
        h = self.proj(u)
        for b, blk in enumerate(self.convs):
            p = blk._params
            d = 2**b
            z1 = ad.gelu(ad.conv1d_causal(h, p["w1"], p["b1"], d))
            z2 = ad.gelu(ad.conv1d_causal(z1, p["w2"], p["b2"], d))
            h = h + z2
        return self.readout(h)

    def init_rstate(self, batch: int):
        return Tensor(np.zeros((batch, 0, self.input_dim)))

    def step(self, z, cond, rstate=None):
        u = self._inputs(z, cond)
        if rstate is None:
            rstate = self.init_rstate(z.shape[0])
        seq = ad.concat([rstate, u.reshape(u.shape[0], 1, u.shape[1])], axis=1)
        out = self.forward_sequence(seq)[:, -1, :]
        keep = self.receptive_field - 1
        window = seq[:, seq.shape[1] - keep :, :] if keep and seq.shape[1] > keep else seq
        if keep == 0:
            window = self.init_rstate(z.shape[0])
        return out, window

    def teacher_forced(self, seq: Tensor) -> Tensor:
        B, T, D = seq.shape
        if T < 2:
            raise ValueError("teacher forcing needs at least two snapshots")
        cond = ad.concat([seq[:, :1, :]] * (T - 1), axis=1)
        u = ad.concat([seq[:, :-1, :], cond], axis=-1)
        return self.forward_sequence(u)

    def config(self):
        return {"channels": self.channels, "blocks": self.blocks, "kernel": self.kernel}
