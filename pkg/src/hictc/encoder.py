"""Stacked bidirectional LSTM encoder with frame pairing and per-layer taps.

Layer 1 consumes pairs of consecutive input frames (time halves, feature
width doubles); every layer emits the concatenation of a left-to-right and a
right-to-left LSTM pass, so tap width is twice the per-direction hidden
size. Each whole bidirectional layer is a single node on the gradient tape
with a hand-written backward-through-time rule; caching per-step gate
activations keeps the graph small and the backward pass vectorized.

Batches are time-major [T', B, width] with per-utterance lengths. Positions
past an utterance's length hold the state unchanged (mask-hold), which makes
a padded batch pass exactly equal to running each utterance alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numeric as nm
from .util import substream

GATES = 4  # packed order: input, forget, cell candidate, output


@dataclass
class EncoderConfig:
    input_dim: int
    num_layers: int = 5
    hidden_per_direction: int = 320
    dropout_rate: float = 0.1
    time_reduction_factor: int = 2  # fixed; layer 1 consumes frame pairs

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be at least 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.time_reduction_factor != 2:
            raise ValueError("time reduction is fixed at 2")

    def layer_input_width(self, layer: int) -> int:
        return 2 * self.input_dim if layer == 1 else 2 * self.hidden_per_direction


@dataclass
class DirectionParams:
    wx: nm.Parameter  # [in_width, 4*hidden]
    wh: nm.Parameter  # [hidden, 4*hidden]
    b: nm.Parameter  # [4*hidden]


@dataclass
class LstmLayerParams:
    fwd: DirectionParams
    bwd: DirectionParams

    @property
    def hidden(self) -> int:
        return self.fwd.wh.shape[0]

    @property
    def input_width(self) -> int:
        return self.fwd.wx.shape[0]

    def parameters(self) -> list[nm.Parameter]:
        return [self.fwd.wx, self.fwd.wh, self.fwd.b, self.bwd.wx, self.bwd.wh, self.bwd.b]


@dataclass
class LayerTaps:
    """Per-layer encoder outputs plus the bookkeeping heads need."""

    taps: list[nm.Tensor]
    lengths: np.ndarray
    dropout_masks: list[np.ndarray | None] = field(default_factory=list)

    def tap(self, layer: int) -> nm.Tensor:
        return self.taps[layer - 1]


def pair_frames(x: np.ndarray) -> np.ndarray:
    """Concatenate consecutive frame pairs; odd T gets one zero frame of padding."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise nm.ShapeError(f"pair_frames expects [T, d] with T >= 1, got {x.shape}")
    frames, dim = x.shape
    if frames % 2:
        x = np.concatenate([x, np.zeros((1, dim))], axis=0)
    return x.reshape(-1, 2 * dim)


def paired_length(frames: int) -> int:
    return (frames + 1) // 2


def _init_direction(prefix: str, in_width: int, hidden: int, seed: int) -> DirectionParams:
    def uniform(name, shape):
        rng = substream(seed, f"init/{prefix}.{name}")
        return nm.Parameter(f"{prefix}.{name}", rng.uniform(-0.05, 0.05, size=shape))

    wx = uniform("wx", (in_width, GATES * hidden))
    wh = uniform("wh", (hidden, GATES * hidden))
    b = nm.Parameter(f"{prefix}.b", np.zeros(GATES * hidden))
    b.data[hidden : 2 * hidden] = 1.0  # forget-gate bias starts open
    return DirectionParams(wx=wx, wh=wh, b=b)


def init_layer(name: str, in_width: int, hidden: int, seed: int) -> LstmLayerParams:
    return LstmLayerParams(
        fwd=_init_direction(f"{name}.fwd", in_width, hidden, seed),
        bwd=_init_direction(f"{name}.bwd", in_width, hidden, seed),
    )


def init_encoder(cfg: EncoderConfig, seed: int, name: str = "enc") -> list[LstmLayerParams]:
    return [
        init_layer(f"{name}.l{k}", cfg.layer_input_width(k), cfg.hidden_per_direction, seed)
        for k in range(1, cfg.num_layers + 1)
    ]


def encoder_parameters(layers: Sequence[LstmLayerParams]) -> list[nm.Parameter]:
    out: list[nm.Parameter] = []
    for layer in layers:
        out.extend(layer.parameters())
    return out


def _direction_forward(
    x: np.ndarray,
    lengths: np.ndarray,
    d: DirectionParams,
    reverse: bool,
    keep_cache: bool,
):
    frames, batch, width = x.shape
    hidden = d.wh.shape[0]
    xz = (x.reshape(frames * batch, width) @ d.wx.data + d.b.data).reshape(
        frames, batch, GATES * hidden
    )
    mask = (np.arange(frames)[:, None] < lengths[None, :]).astype(np.float64)
    mask3 = mask[:, :, None]
    order = range(frames - 1, -1, -1) if reverse else range(frames)

    h = np.zeros((batch, hidden))
    c = np.zeros((batch, hidden))
    out = np.empty((frames, batch, hidden))
    cache = None
    if keep_cache:
        cache = {
            key: np.empty((frames, batch, hidden))
            for key in ("i", "f", "g", "o", "tc", "c_prev", "h_prev")
        }
        cache["mask"] = mask
        cache["x"] = x

    for t in order:
        z = xz[t] + h @ d.wh.data
        gif = nm._sigmoid_np(z[:, : 2 * hidden])
        gi = gif[:, :hidden]
        gf = gif[:, hidden:]
        gg = np.tanh(z[:, 2 * hidden : 3 * hidden])
        go = nm._sigmoid_np(z[:, 3 * hidden :])
        c_new = gf * c + gi * gg
        tc = np.tanh(c_new)
        h_new = go * tc
        m = mask3[t]
        if keep_cache:
            cache["i"][t] = gi
            cache["f"][t] = gf
            cache["g"][t] = gg
            cache["o"][t] = go
            cache["tc"][t] = tc
            cache["c_prev"][t] = c
            cache["h_prev"][t] = h
        h = m * h_new + (1.0 - m) * h
        c = m * c_new + (1.0 - m) * c
        out[t] = h
    return out, cache


def _direction_backward(dh_out: np.ndarray, d: DirectionParams, cache: dict, reverse: bool):
    x = cache["x"]
    mask = cache["mask"]
    frames, batch, width = x.shape
    hidden = d.wh.shape[0]
    order = range(frames - 1, -1, -1) if reverse else range(frames)

    dz_all = np.empty((frames, batch, GATES * hidden))
    dh_carry = np.zeros((batch, hidden))
    dc_carry = np.zeros((batch, hidden))
    wh_t = d.wh.data.T
    mask3 = mask[:, :, None]
    for t in reversed(order):
        m = mask3[t]
        dh_total = dh_out[t] + dh_carry
        dh_new = dh_total * m
        dc_new = dc_carry * m
        pass_h = dh_total * (1.0 - m)
        pass_c = dc_carry * (1.0 - m)

        tc = cache["tc"][t]
        go = cache["o"][t]
        do = dh_new * tc
        dc_new = dc_new + dh_new * go * (1.0 - tc * tc)

        gi, gf, gg = cache["i"][t], cache["f"][t], cache["g"][t]
        di = dc_new * gg
        dg = dc_new * gi
        df = dc_new * cache["c_prev"][t]
        dc_prev = dc_new * gf + pass_c

        dz = dz_all[t]
        dz[:, :hidden] = di * gi * (1.0 - gi)
        dz[:, hidden : 2 * hidden] = df * gf * (1.0 - gf)
        dz[:, 2 * hidden : 3 * hidden] = dg * (1.0 - gg * gg)
        dz[:, 3 * hidden :] = do * go * (1.0 - go)

        dh_carry = pass_h + dz @ wh_t
        dc_carry = dc_prev

    flat_dz = dz_all.reshape(frames * batch, GATES * hidden)
    dwx = x.reshape(frames * batch, width).T @ flat_dz
    dwh = cache["h_prev"].reshape(frames * batch, hidden).T @ flat_dz
    db = flat_dz.sum(axis=0)
    dx = (flat_dz @ d.wx.data.T).reshape(frames, batch, width)
    return dx, dwx, dwh, db


def bilstm_layer_forward(
    x: nm.Tensor | np.ndarray,
    params: LstmLayerParams,
    lengths: np.ndarray | None = None,
) -> nm.Tensor:
    """One bidirectional layer; [T', w] in gives [T', 2*hidden] out, or batched
    [T', B, w] with per-utterance lengths."""
    x = x if isinstance(x, nm.Tensor) else nm.Tensor(x)
    single = x.ndim == 2
    data = x.data[:, None, :] if single else x.data
    if data.ndim != 3:
        raise nm.ShapeError(f"expected [T, w] or [T, B, w] input, got {x.shape}")
    frames, batch, width = data.shape
    if width != params.input_width:
        raise nm.ShapeError(f"input width {width}, parameters expect {params.input_width}")
    if lengths is None:
        lengths = np.full(batch, frames, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)

    keep_cache = nm.grad_enabled()
    out_f, cache_f = _direction_forward(data, lengths, params.fwd, False, keep_cache)
    out_b, cache_b = _direction_forward(data, lengths, params.bwd, True, keep_cache)
    out = np.concatenate([out_f, out_b], axis=2)
    if single:
        out = out[:, 0, :]
    if not keep_cache:
        return nm.Tensor(out)

    hidden = params.hidden
    x_tracked = x.tracked

    def vjp(g):
        g3 = g[:, None, :] if single else g
        dxf, dwxf, dwhf, dbf = _direction_backward(g3[..., :hidden], params.fwd, cache_f, False)
        dxb, dwxb, dwhb, dbb = _direction_backward(g3[..., hidden:], params.bwd, cache_b, True)
        dx = None
        if x_tracked:
            dx = dxf + dxb
            if single:
                dx = dx[:, 0, :]
        return dx, dwxf, dwhf, dbf, dwxb, dwhb, dbb

    parents = (x, params.fwd.wx, params.fwd.wh, params.fwd.b, params.bwd.wx, params.bwd.wh, params.bwd.b)
    return nm.Tensor(out, parents, vjp)


def encoder_forward(
    x: np.ndarray | Sequence[np.ndarray],
    cfg: EncoderConfig,
    layers: Sequence[LstmLayerParams],
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    dropout_masks: Sequence[np.ndarray] | None = None,
) -> LayerTaps:
    """Pair frames, run the stack, and keep every layer's output.

    ``x`` is one [T, d] utterance or a sequence of them (padded batch). In
    train mode a fresh dropout mask is applied to each layer's output; masks
    are recorded on the result so a checking pass can replay them exactly.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if len(layers) != cfg.num_layers:
        raise nm.ShapeError(f"{len(layers)} layers supplied, config says {cfg.num_layers}")
    single = isinstance(x, np.ndarray) and np.asarray(x).ndim == 2
    utts = [np.asarray(x)] if single else [np.asarray(u) for u in x]
    for u in utts:
        if u.ndim != 2 or u.shape[1] != cfg.input_dim:
            raise nm.ShapeError(f"utterance of shape {u.shape}, expected [T, {cfg.input_dim}]")

    paired = [pair_frames(u) for u in utts]
    lengths = np.array([p.shape[0] for p in paired], dtype=np.int64)
    t_max = int(lengths.max())
    batch = len(paired)
    stacked = np.zeros((t_max, batch, 2 * cfg.input_dim))
    for b, p in enumerate(paired):
        stacked[: p.shape[0], b, :] = p

    out = encoder_forward_paired(stacked, lengths, cfg, layers, mode, rng, dropout_masks)
    if single:
        out.taps = [nm.reshape(t, (t.shape[0], t.shape[2])) for t in out.taps]
    return out


def encoder_forward_paired(
    x: np.ndarray,
    lengths: np.ndarray,
    cfg: EncoderConfig,
    layers: Sequence[LstmLayerParams],
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    dropout_masks: Sequence[np.ndarray] | None = None,
) -> LayerTaps:
    """Stack forward on an already frame-paired, padded [T', B, 2d] batch."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != 2 * cfg.input_dim:
        raise nm.ShapeError(f"paired batch of shape {x.shape}, expected [T', B, {2 * cfg.input_dim}]")
    if len(layers) != cfg.num_layers:
        raise nm.ShapeError(f"{len(layers)} layers supplied, config says {cfg.num_layers}")

    use_dropout = mode == "train" and cfg.dropout_rate > 0.0
    if use_dropout and rng is None and dropout_masks is None:
        raise ValueError("train mode with dropout needs an rng or recorded masks")
    keep = 1.0 - cfg.dropout_rate

    cur: nm.Tensor = nm.Tensor(x)
    taps: list[nm.Tensor] = []
    masks: list[np.ndarray | None] = []
    for idx, layer in enumerate(layers):
        out = bilstm_layer_forward(cur, layer, lengths)
        if use_dropout:
            if dropout_masks is not None:
                mask = dropout_masks[idx]
            else:
                mask = (rng.random(out.shape) < keep).astype(np.float64)
            out = nm.dropout_apply(out, mask, keep)
            masks.append(mask)
        else:
            masks.append(None)
        taps.append(out)
        cur = out

    return LayerTaps(taps=taps, lengths=lengths, dropout_masks=masks)


def encoder_backward(taps: LayerTaps, upstream: dict[int, np.ndarray]) -> None:
    """Seed gradients at the given taps (1-based layer index) and backpropagate.

    Gradients accumulate into the layer parameters; a tap without an entry
    contributes nothing.
    """
    seeds = []
    for layer, grad in sorted(upstream.items()):
        if not 1 <= layer <= len(taps.taps):
            raise nm.ShapeError(f"no tap for layer {layer}")
        seeds.append((taps.tap(layer), np.asarray(grad, dtype=np.float64)))
    nm.backward_multi(seeds)
