"""Recurrent cells over the autodiff core: GRU, LSTM, a spline-basis KAN
layer, and the TKAN cell that embeds KAN sub-layers with per-sub-layer
memory. Cells step batched states: inputs are [batch, features], hidden
states [batch, units].

Weight matrices are stored input-major for right multiplication
(x_cat @ W + b). Initialization is Glorot-style uniform with zero biases,
except the LSTM/TKAN forget bias which starts at 1 to favor memory carry.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

__all__ = [
    "CellConfig",
    "GruCell",
    "LstmCell",
    "KanLayer",
    "TkanCell",
    "CellStack",
    "make_cell",
    "make_stack",
]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass(frozen=True)
class CellConfig:
    """Serializable cell hyperparameters."""

    kind: str                    # gru | lstm | tkan
    input_size: int
    units: int
    sub_layers: int = 3          # TKAN only
    sub_out: int = 10            # TKAN KAN sub-layer output width
    grid_size: int = 5
    degree: int = 3

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "CellConfig":
        return cls(**json.loads(s))


class GruCell:
    """Gated recurrent unit: update/reset gates and a tanh candidate
    blended convexly with the previous hidden state."""

    def __init__(self, input_size: int, units: int, rng: np.random.Generator,
                 prefix: str = "gru"):
        self.input_size = input_size
        self.units = units
        din = units + input_size
        self.w_z = Parameter(_glorot(rng, din, units), f"{prefix}.w_z")
        self.b_z = Parameter(np.zeros(units), f"{prefix}.b_z")
        self.w_r = Parameter(_glorot(rng, din, units), f"{prefix}.w_r")
        self.b_r = Parameter(np.zeros(units), f"{prefix}.b_r")
        self.w_h = Parameter(_glorot(rng, din, units), f"{prefix}.w_h")
        self.b_h = Parameter(np.zeros(units), f"{prefix}.b_h")

    def parameters(self):
        return [self.w_z, self.b_z, self.w_r, self.b_r, self.w_h, self.b_h]

    def init_state(self, batch: int):
        return Tensor(np.zeros((batch, self.units)))

    def step(self, state, x: Tensor):
        h_prev = state
        cat = ad.concat([h_prev, x], axis=-1)
        z = ad.sigmoid(ad.add(ad.matmul(cat, self.w_z), self.b_z))
        r = ad.sigmoid(ad.add(ad.matmul(cat, self.w_r), self.b_r))
        gated = ad.concat([ad.mul(r, h_prev), x], axis=-1)
        cand = ad.tanh(ad.add(ad.matmul(gated, self.w_h), self.b_h))
        one_minus_z = ad.sub(ad.constant(1.0), z)
        h = ad.add(ad.mul(one_minus_z, h_prev), ad.mul(z, cand))
        return h, h


class LstmCell:
    """LSTM with forget/input/output gates and a tanh candidate."""

    def __init__(self, input_size: int, units: int, rng: np.random.Generator,
                 prefix: str = "lstm"):
        self.input_size = input_size
        self.units = units
        din = units + input_size
        self.w_f = Parameter(_glorot(rng, din, units), f"{prefix}.w_f")
        self.b_f = Parameter(np.ones(units), f"{prefix}.b_f")
        self.w_i = Parameter(_glorot(rng, din, units), f"{prefix}.w_i")
        self.b_i = Parameter(np.zeros(units), f"{prefix}.b_i")
        self.w_c = Parameter(_glorot(rng, din, units), f"{prefix}.w_c")
        self.b_c = Parameter(np.zeros(units), f"{prefix}.b_c")
        self.w_o = Parameter(_glorot(rng, din, units), f"{prefix}.w_o")
        self.b_o = Parameter(np.zeros(units), f"{prefix}.b_o")

    def parameters(self):
        return [self.w_f, self.b_f, self.w_i, self.b_i,
                self.w_c, self.b_c, self.w_o, self.b_o]

    def init_state(self, batch: int):
        z = np.zeros((batch, self.units))
        return (Tensor(z.copy()), Tensor(z.copy()))

    def step(self, state, x: Tensor):
        h_prev, c_prev = state
        cat = ad.concat([h_prev, x], axis=-1)
        f = ad.sigmoid(ad.add(ad.matmul(cat, self.w_f), self.b_f))
        i = ad.sigmoid(ad.add(ad.matmul(cat, self.w_i), self.b_i))
        c_tilde = ad.tanh(ad.add(ad.matmul(cat, self.w_c), self.b_c))
        c = ad.add(ad.mul(f, c_prev), ad.mul(i, c_tilde))
        o = ad.sigmoid(ad.add(ad.matmul(cat, self.w_o), self.b_o))
        h = ad.mul(o, ad.tanh(c))
        return h, (h, c)


class KanLayer:
    """Spline-edge layer: each output sums silu base terms and learnable
    B-spline expansions of each input.

    The knot grid is fixed on [-1, 1]; inputs outside the span are clamped
    for the basis only, so the silu path still carries gradient there.
    """

    def __init__(self, input_size: int, output_size: int,
                 rng: np.random.Generator, grid_size: int = 5,
                 degree: int = 3, prefix: str = "kan"):
        self.input_size = input_size
        self.output_size = output_size
        self.grid_size = grid_size
        self.degree = degree
        self.knots = ad.make_knots(grid_size, degree)
        self.n_basis = grid_size + degree
        self.base_w = Parameter(_glorot(rng, input_size, output_size).T,
                                f"{prefix}.base_w")        # [out, in]
        coef = rng.normal(0.0, 0.1 / np.sqrt(input_size),
                          size=(output_size, input_size, self.n_basis))
        self.spline_c = Parameter(coef, f"{prefix}.spline_c")

    def parameters(self):
        return [self.base_w, self.spline_c]

    def forward(self, x: Tensor) -> Tensor:
        batch = x.shape[0]
        basis = ad.bspline_basis(x, self.knots, self.degree)     # [B, in, nb]
        flat = ad.reshape(basis, (batch, self.input_size * self.n_basis))
        spline_mat = ad.reshape(
            self.spline_c, (self.output_size, self.input_size * self.n_basis)
        )
        y_spline = ad.matmul(flat, _t(spline_mat))
        y_base = ad.matmul(ad.silu(x), _t(self.base_w))
        return ad.add(y_base, y_spline)


def _t(a: Tensor) -> Tensor:
    """2-D transpose as a recorded op."""
    out = a.data.T.copy()

    def vjp(g):
        return (np.ascontiguousarray(g.T),)

    return ad.custom_op(out, (a,), vjp)


class TkanCell:
    """LSTM-style cell whose output gate reads a concatenation of KAN
    sub-layer responses, each sub-layer carrying its own memory vector.

    Per sub-layer l: s_l = x W_lx + mem_l W_lh; out_l = phi_l(s_l);
    mem_l' = mem_l W_hh + out_l W_hz. The candidate uses a sigmoid, not
    the tanh of a plain LSTM.
    """

    def __init__(self, input_size: int, units: int, rng: np.random.Generator,
                 sub_layers: int = 3, sub_out: int = 10, grid_size: int = 5,
                 degree: int = 3, prefix: str = "tkan"):
        self.input_size = input_size
        self.units = units
        self.sub_layers = sub_layers
        self.sub_out = sub_out
        u, d, r_dim = units, input_size, sub_layers * sub_out
        self.w_f = Parameter(_glorot(rng, d, u), f"{prefix}.w_f")
        self.u_f = Parameter(_glorot(rng, u, u), f"{prefix}.u_f")
        self.b_f = Parameter(np.ones(u), f"{prefix}.b_f")
        self.w_i = Parameter(_glorot(rng, d, u), f"{prefix}.w_i")
        self.u_i = Parameter(_glorot(rng, u, u), f"{prefix}.u_i")
        self.b_i = Parameter(np.zeros(u), f"{prefix}.b_i")
        self.w_c = Parameter(_glorot(rng, d, u), f"{prefix}.w_c")
        self.u_c = Parameter(_glorot(rng, u, u), f"{prefix}.u_c")
        self.b_c = Parameter(np.zeros(u), f"{prefix}.b_c")
        self.w_o = Parameter(_glorot(rng, r_dim, u), f"{prefix}.w_o")
        self.b_o = Parameter(np.zeros(u), f"{prefix}.b_o")
        self.sub_wx = []
        self.sub_wh = []
        self.sub_phi = []
        self.sub_whh = []
        self.sub_whz = []
        for l in range(sub_layers):
            self.sub_wx.append(Parameter(_glorot(rng, d, sub_out),
                                         f"{prefix}.sub{l}.w_x"))
            self.sub_wh.append(Parameter(_glorot(rng, sub_out, sub_out),
                                         f"{prefix}.sub{l}.w_h"))
            self.sub_phi.append(KanLayer(sub_out, sub_out, rng, grid_size,
                                         degree, prefix=f"{prefix}.sub{l}.phi"))
            self.sub_whh.append(Parameter(_glorot(rng, sub_out, sub_out),
                                          f"{prefix}.sub{l}.w_hh"))
            self.sub_whz.append(Parameter(_glorot(rng, sub_out, sub_out),
                                          f"{prefix}.sub{l}.w_hz"))

    def parameters(self):
        ps = [self.w_f, self.u_f, self.b_f, self.w_i, self.u_i, self.b_i,
              self.w_c, self.u_c, self.b_c, self.w_o, self.b_o]
        for l in range(self.sub_layers):
            ps.extend([self.sub_wx[l], self.sub_wh[l]])
            ps.extend(self.sub_phi[l].parameters())
            ps.extend([self.sub_whh[l], self.sub_whz[l]])
        return ps

    def init_state(self, batch: int):
        h = Tensor(np.zeros((batch, self.units)))
        c = Tensor(np.zeros((batch, self.units)))
        mems = tuple(Tensor(np.zeros((batch, self.sub_out)))
                     for _ in range(self.sub_layers))
        return (h, c, mems)

    def step(self, state, x: Tensor):
        h_prev, c_prev, mems = state
        f = ad.sigmoid(ad.add(ad.add(ad.matmul(x, self.w_f),
                                     ad.matmul(h_prev, self.u_f)), self.b_f))
        i = ad.sigmoid(ad.add(ad.add(ad.matmul(x, self.w_i),
                                     ad.matmul(h_prev, self.u_i)), self.b_i))
        c_tilde = ad.sigmoid(ad.add(ad.add(ad.matmul(x, self.w_c),
                                           ad.matmul(h_prev, self.u_c)), self.b_c))
        outs = []
        new_mems = []
        for l in range(self.sub_layers):
            s = ad.add(ad.matmul(x, self.sub_wx[l]),
                       ad.matmul(mems[l], self.sub_wh[l]))
            out_l = self.sub_phi[l].forward(s)
            outs.append(out_l)
            new_mems.append(ad.add(ad.matmul(mems[l], self.sub_whh[l]),
                                   ad.matmul(out_l, self.sub_whz[l])))
        r = ad.concat(outs, axis=-1)
        o = ad.sigmoid(ad.add(ad.matmul(r, self.w_o), self.b_o))
        c = ad.add(ad.mul(f, c_prev), ad.mul(i, c_tilde))
        h = ad.mul(o, ad.tanh(c))
        return h, (h, c, tuple(new_mems))


class CellStack:
    """Layered cells; layer n+1 consumes layer n's hidden sequence."""

    def __init__(self, cells):
        self.cells = list(cells)

    def parameters(self):
        ps = []
        for c in self.cells:
            ps.extend(c.parameters())
        return ps

    def init_state(self, batch: int):
        return [c.init_state(batch) for c in self.cells]

    def step(self, states, x: Tensor):
        new_states = []
        h = x
        for cell, st in zip(self.cells, states):
            h, st2 = cell.step(st, h)
            new_states.append(st2)
        return h, new_states

    def forward(self, sequence, return_sequence: bool = False):
        """Run over a list of [batch, features] tensors; returns the top
        layer's final hidden state (and the full sequence on request)."""
        if not sequence:
            raise ad.ShapeError("empty sequence")
        states = self.init_state(sequence[0].shape[0])
        hs = []
        h = None
        for x in sequence:
            h, states = self.step(states, x)
            if return_sequence:
                hs.append(h)
        if return_sequence:
            return h, hs
        return h


def make_cell(cfg: CellConfig, rng: np.random.Generator, prefix: str):
    if cfg.kind == "gru":
        return GruCell(cfg.input_size, cfg.units, rng, prefix=prefix)
    if cfg.kind == "lstm":
        return LstmCell(cfg.input_size, cfg.units, rng, prefix=prefix)
    if cfg.kind == "tkan":
        return TkanCell(cfg.input_size, cfg.units, rng,
                        sub_layers=cfg.sub_layers, sub_out=cfg.sub_out,
                        grid_size=cfg.grid_size, degree=cfg.degree,
                        prefix=prefix)
    raise ValueError(f"unknown cell kind {cfg.kind!r}")


def make_stack(kind: str, input_size: int, units: int, layers: int,
               rng: np.random.Generator, prefix: str, **tkan_kw) -> CellStack:
    cells = []
    for i in range(layers):
        cfg = CellConfig(kind=kind, input_size=input_size if i == 0 else units,
                         units=units, **tkan_kw)
        cells.append(make_cell(cfg, rng, prefix=f"{prefix}.layer{i}"))
    return CellStack(cells)
