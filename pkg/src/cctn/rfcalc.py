"""Receptive-field audit: analytic recurrence and measured gradient footprint."""
from dataclasses import dataclass

import numpy as np

from . import network as N
from . import tensor as T

CLAIMED_POOL5_RF = 403
DISCREPANCY_NOTE = (
    "note: the recurrence gives the architectural field of new pool5 in this graph; "
    "the published figure is {claim}x{claim}, which the standard recurrence does not reproduce "
    "from the described layers. Both are reported and neither is asserted against the other."
)


@dataclass(frozen=True)
class RfState:
    rf_h: float
    rf_w: float
    jump: float
    offset_h: float = 0.0  # input-pixel position of the first cell's centre (pixel index units)
    offset_w: float = 0.0

    @property
    def offset(self):
        return (self.offset_h, self.offset_w)


def _conv_step(s, kh, kw, ph, pw, stride):
    return RfState(s.rf_h + (kh - 1) * s.jump, s.rf_w + (kw - 1) * s.jump, s.jump * stride,
                   s.offset_h + ((kh - 1) / 2 - ph) * s.jump,
                   s.offset_w + ((kw - 1) / 2 - pw) * s.jump)


def analytic_table(graph, input_shape=None):
    """RfState for every layer, in graph order.

    ``input_shape`` (H, W) is only needed to place the centre crop; the sizes
    of the fields never depend on it.
    """
    shapes = N.infer_shapes(graph, *(input_shape or (500, 500))) if _has_crop(graph) else None
    states = {}
    for lay in graph.layers:
        k = lay.kind
        if k == "input":
            states[lay.name] = RfState(1, 1, 1, 0.0, 0.0)
            continue
        s = states[lay.inputs[0]]
        if k == "conv":
            c = lay.conv
            states[lay.name] = _conv_step(s, c.kernel_h, c.kernel_w, c.pad_h, c.pad_w, c.stride)
        elif k == "maxpool2":
            states[lay.name] = _conv_step(s, 2, 2, 0, 0, 2)
        elif k == "relu":
            states[lay.name] = s
        elif k == "eltwise_sum":
            parts = [states[n] for n in lay.inputs]
            if len({p.jump for p in parts}) != 1:
                raise ValueError(f"{lay.name}: summed inputs have different jumps")
            states[lay.name] = RfState(max(p.rf_h for p in parts), max(p.rf_w for p in parts),
                                       s.jump, s.offset_h, s.offset_w)
        elif k == "upsample2x":
            # output cell i samples source position (i + 0.5) / 2 - 0.5
            states[lay.name] = RfState(s.rf_h, s.rf_w, s.jump / 2,
                                       s.offset_h - 0.25 * s.jump, s.offset_w - 0.25 * s.jump)
        elif k == "crop_center":
            src, ref = shapes[lay.inputs[0]], shapes[lay.inputs[1]]
            top, left = T.crop_offsets(src[1], src[2], ref[1], ref[2])
            states[lay.name] = RfState(s.rf_h, s.rf_w, s.jump,
                                       s.offset_h + top * s.jump, s.offset_w + left * s.jump)
        elif k == "upscore":
            states[lay.name] = RfState(s.rf_h, s.rf_w, 1.0, 0.0, 0.0)
        else:  # pragma: no cover
            raise ValueError(f"unknown layer kind {k}")
    return states


def _has_crop(graph):
    return any(lay.kind == "crop_center" for lay in graph.layers)


def analytic_rf(graph, layer_name, input_shape=None):
    graph.layer(layer_name)
    return analytic_table(graph, input_shape)[layer_name]


@dataclass(frozen=True)
class Footprint:
    top: int
    left: int
    bottom: int  # inclusive
    right: int

    @property
    def rf_h(self):
        return self.bottom - self.top + 1

    @property
    def rf_w(self):
        return self.right - self.left + 1

    def within(self, other):
        return (self.top >= other.top and self.left >= other.left
                and self.bottom <= other.bottom and self.right <= other.right)


def analytic_footprint(state, cell):
    """Input-pixel box covered by ``cell`` according to the recurrence."""
    ch = state.offset_h + cell[0] * state.jump
    cw = state.offset_w + cell[1] * state.jump
    return Footprint(int(round(ch - (state.rf_h - 1) / 2)), int(round(cw - (state.rf_w - 1) / 2)),
                     int(round(ch + (state.rf_h - 1) / 2)), int(round(cw + (state.rf_w - 1) / 2)))


def _auto_input(state):
    side = int(state.rf_h + state.rf_w) + 8 * int(np.ceil(state.jump))
    side = max(side, N.MIN_INPUT)
    return (-(-side // 32) * 32,) * 2


def positive_weights(graph, seed=0):
    rng = np.random.default_rng(seed)
    store = N.WeightStore()
    for lay in graph.conv_layers():
        store[f"{lay.name}.weight"] = rng.uniform(0.1, 1.0, lay.conv.weight_shape)
        store[f"{lay.name}.bias"] = np.zeros(lay.conv.out_channels)
    return store


def empirical_rf(graph, weights, layer_name, cell=None, input_shape=None, tol=1e-12):
    """Measured input footprint of one cell of ``layer_name``.

    A unit gradient on every channel of ``cell`` is propagated back with
    ReLUs passing everything and max-pools spreading over their window, so
    only the wiring decides which pixels are reached.  ``weights=None``
    draws all-positive random weights.  Returns a :class:`Footprint`.
    """
    graph.layer(layer_name)
    if input_shape is None:
        input_shape = _auto_input(analytic_rf(graph, layer_name))
    if weights is None:
        weights = positive_weights(graph)
    h, w = input_shape
    x = np.zeros((3, h, w))
    acts, cache = N.run_forward(graph, weights, x)
    shape = cache["shapes"][layer_name]
    if cell is None:
        cell = (shape[1] // 2, shape[2] // 2)
    if not (0 <= cell[0] < shape[1] and 0 <= cell[1] < shape[2]):
        raise ValueError(f"cell {cell} outside {layer_name} map of size {shape[1]}x{shape[2]}")
    seed = np.zeros(shape)
    seed[:, cell[0], cell[1]] = 1.0
    _, gx = N.backward(graph, weights, acts, cache, {layer_name: seed}, architectural=True)
    hit = np.abs(gx).sum(axis=0) > tol
    rows, cols = np.nonzero(hit)
    if rows.size == 0:
        raise ValueError(f"no input pixel reaches {layer_name} cell {cell}")
    return Footprint(int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))


def _num(v):
    return f"{int(v)}" if float(v).is_integer() else f"{v:g}"


def format_table(graph, input_shape=None):
    states = analytic_table(graph, input_shape)
    lines = ["layer rf_h rf_w jump"]
    for name, s in states.items():
        lines.append(f"{name} {_num(s.rf_h)} {_num(s.rf_w)} {_num(s.jump)}")
    return "\n".join(lines) + "\n"


def pool5_report(graph, input_shape=None):
    """Analytic new-pool5 field next to the published claim, with a note."""
    s = analytic_rf(graph, "pool5", input_shape)
    return (f"analytic pool5 {_num(s.rf_h)}x{_num(s.rf_w)}\n"
            f"claimed pool5 {CLAIMED_POOL5_RF}x{CLAIMED_POOL5_RF}\n"
            + DISCREPANCY_NOTE.format(claim=CLAIMED_POOL5_RF) + "\n")
