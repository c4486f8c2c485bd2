"""Compact residual CNN with explicit forward/backward passes, plus Adam.

The refiner is three 3x3 convolutions (1->16->16->1 channels, rectifier after
the first two) whose output is added to the bilinearly upsampled input, so a
zero-weight network is the identity map. Padding replicates edges, keeping
every layer the same size as its input.

Convolutions run on "padded plane" buffers of shape (channels, batch, h+2,
w+2): because every sample carries its own one-pixel border, a 3x3 stencil
never reaches a neighboring sample, and each kernel tap becomes a contiguous
slice of the flattened buffer feeding one small matrix product. The backward
pass is hand-derived and checked against finite differences in the test
suite. Model files use a small versioned binary container.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, fields

import numpy as np

from .errors import IoFailure, ShapeMismatch, StaleCache

KERNEL = 3
HIDDEN_CHANNELS = 16

PARAM_SHAPES = {
    "w1": (HIDDEN_CHANNELS, 1, KERNEL, KERNEL),
    "b1": (HIDDEN_CHANNELS,),
    "w2": (HIDDEN_CHANNELS, HIDDEN_CHANNELS, KERNEL, KERNEL),
    "b2": (HIDDEN_CHANNELS,),
    "w3": (1, HIDDEN_CHANNELS, KERNEL, KERNEL),
    "b3": (1,),
}

PARAMS_MAGIC = b"DWIRNET\x00"
PARAMS_VERSION = 1


@dataclass
class ConvNetParams:
    """All trainable tensors of the refiner (also reused as a gradient container)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "ConvNetParams":
        return ConvNetParams(**{k: v.copy() for k, v in self.tensors().items()})

    @classmethod
    def zeros(cls) -> "ConvNetParams":
        return cls(**{k: np.zeros(s) for k, s in PARAM_SHAPES.items()})


def init_network(seed: int) -> ConvNetParams:
    """He-style fan-in uniform weights (bound sqrt(6/fan_in)), zero biases."""
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    values = {}
    for name, shape in PARAM_SHAPES.items():
        if name.startswith("b"):
            values[name] = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            values[name] = rng.uniform(-bound, bound, size=shape)
    return ConvNetParams(**values)


# --- padded-plane plumbing ----------------------------------------------------

def _tap_offsets(wp: int) -> list[int]:
    # flattened-buffer offset of each kernel tap relative to the output pixel
    return [(di - 1) * wp + (dj - 1) for di in range(KERNEL) for dj in range(KERNEL)]


def _edge_replicate(buf: np.ndarray) -> None:
    # in place; assumes the interior [1:-1, 1:-1] is already filled
    buf[:, :, 0, 1:-1] = buf[:, :, 1, 1:-1]
    buf[:, :, -1, 1:-1] = buf[:, :, -2, 1:-1]
    buf[:, :, :, 0] = buf[:, :, :, 1]
    buf[:, :, :, -1] = buf[:, :, :, -2]


def _fold_edges(buf: np.ndarray) -> None:
    # adjoint of _edge_replicate: accumulate border gradients onto the interior
    buf[:, :, :, 1] += buf[:, :, :, 0]
    buf[:, :, :, -2] += buf[:, :, :, -1]
    buf[:, :, 1, 1:-1] += buf[:, :, 0, 1:-1]
    buf[:, :, -2, 1:-1] += buf[:, :, -1, 1:-1]


def _pad_input(x: np.ndarray) -> np.ndarray:
    # (B, H, W) single-channel input -> (1, B, H+2, W+2) padded plane
    b, h, w = x.shape
    buf = np.empty((1, b, h + 2, w + 2))
    buf[0, :, 1:-1, 1:-1] = x
    _edge_replicate(buf)
    return buf


def _conv_planes(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Centered 3x3 correlation of padded planes; border cells are scratch.

    Returns an (out_channels, B, Hp, Wp) buffer whose interior holds the
    convolution of the interior of ``xp``; the caller overwrites the border.
    """
    c, b, hp, wp = xp.shape
    m = b * hp * wp
    xf = xp.reshape(c, m)
    out_ch = w.shape[0]
    acc = np.zeros((out_ch, m))
    taps = w.reshape(out_ch, c, KERNEL * KERNEL)
    for t, off in enumerate(_tap_offsets(wp)):
        lo = max(0, -off)
        span = m - abs(off)
        acc[:, lo:lo + span] += taps[:, :, t] @ xf[:, lo + off:lo + off + span]
    return acc.reshape(out_ch, b, hp, wp)


def _conv_backward_planes(dy_plane: np.ndarray, xp: np.ndarray, w: np.ndarray,
                          need_dx: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Gradients of _conv_planes; ``dy_plane`` has zeros on all border cells."""
    c, b, hp, wp = xp.shape
    m = b * hp * wp
    out_ch = w.shape[0]
    xf = xp.reshape(c, m)
    dyf = dy_plane.reshape(out_ch, m)
    dw = np.empty_like(w)
    dxacc = np.zeros((c, m)) if need_dx else None
    for t, off in enumerate(_tap_offsets(wp)):
        di, dj = divmod(t, KERNEL)
        lo = max(0, -off)
        span = m - abs(off)
        dy_view = dyf[:, lo:lo + span]
        x_view = xf[:, lo + off:lo + off + span]
        dw[:, :, di, dj] = dy_view @ x_view.T
        if need_dx:
            dxacc[:, lo + off:lo + off + span] += w[:, :, di, dj].T @ dy_view
    db = dyf.sum(axis=1)
    dx_plane = dxacc.reshape(c, b, hp, wp) if need_dx else None
    return dw, db, dx_plane


@dataclass
class ForwardCache:
    """Intermediates of one forward call, consumed by backward."""

    params: ConvNetParams
    batched_input: bool
    xp1: np.ndarray
    mask1: np.ndarray
    xp2: np.ndarray
    mask2: np.ndarray
    xp3: np.ndarray


def _to_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        return x[None], False
    if x.ndim == 3:
        return x, True
    raise ShapeMismatch(f"expected (h, w) or (batch, h, w), got {x.shape}")


def forward(params: ConvNetParams, input_slice: np.ndarray
            ) -> tuple[np.ndarray, ForwardCache]:
    """Residual prediction input + net(input); accepts (h, w) or (batch, h, w)."""
    x, batched = _to_batch(input_slice)
    xp1 = _pad_input(x)

    buf1 = _conv_planes(xp1, params.w1)
    inner1 = buf1[:, :, 1:-1, 1:-1]
    inner1 += params.b1[:, None, None, None]
    mask1 = inner1 > 0
    np.maximum(inner1, 0.0, out=inner1)
    _edge_replicate(buf1)  # buf1 is now the padded activation plane

    buf2 = _conv_planes(buf1, params.w2)
    inner2 = buf2[:, :, 1:-1, 1:-1]
    inner2 += params.b2[:, None, None, None]
    mask2 = inner2 > 0
    np.maximum(inner2, 0.0, out=inner2)
    _edge_replicate(buf2)

    buf3 = _conv_planes(buf2, params.w3)
    out = buf3[0, :, 1:-1, 1:-1] + params.b3[0]
    pred = x + out

    cache = ForwardCache(params, batched, xp1, mask1, buf2, mask2, buf2)
    cache.xp2 = buf1
    cache.xp3 = buf2
    return (pred if batched else pred[0]), cache


def backward(params: ConvNetParams, cache: ForwardCache, loss_gradient: np.ndarray
             ) -> tuple[ConvNetParams, np.ndarray]:
    """Exact loss gradients for every parameter plus the input gradient.

    ``loss_gradient`` is dLoss/dPred with the same shape the forward call
    returned. Raises StaleCache if the cache came from different parameters.
    """
    if cache.params is not params:
        raise StaleCache("cache was produced by a different parameter set")
    dy, batched = _to_batch(loss_gradient)
    b, h, w = dy.shape
    if batched != cache.batched_input or cache.xp1.shape[1:] != (b, h + 2, w + 2):
        raise ShapeMismatch("loss gradient shape does not match the forward call")

    dplane3 = np.zeros((1, b, h + 2, w + 2))
    dplane3[0, :, 1:-1, 1:-1] = dy
    dw3, db3, dact2 = _conv_backward_planes(dplane3, cache.xp3, params.w3, need_dx=True)

    _fold_edges(dact2)
    _zero_border(dact2)
    dact2[:, :, 1:-1, 1:-1] *= cache.mask2
    dw2, db2, dact1 = _conv_backward_planes(dact2, cache.xp2, params.w2, need_dx=True)

    _fold_edges(dact1)
    _zero_border(dact1)
    dact1[:, :, 1:-1, 1:-1] *= cache.mask1
    dw1, db1, dxp = _conv_backward_planes(dact1, cache.xp1, params.w1, need_dx=True)

    _fold_edges(dxp)
    dinput = dy + dxp[0, :, 1:-1, 1:-1]  # residual path adds the loss gradient
    grads = ConvNetParams(w1=dw1, b1=db1, w2=dw2, b2=db2, w3=dw3, b3=db3)
    return grads, (dinput if batched else dinput[0])


def _zero_border(buf: np.ndarray) -> None:
    buf[:, :, 0, :] = 0.0
    buf[:, :, -1, :] = 0.0
    buf[:, :, :, 0] = 0.0
    buf[:, :, :, -1] = 0.0


@dataclass
class AdamState:
    """First/second-moment accumulators; shapes mirror the parameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init_like(cls, params: ConvNetParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(t) for k, t in params.tensors().items()},
            v={k: np.zeros_like(t) for k, t in params.tensors().items()},
        )


def adam_step(params: ConvNetParams, grads: ConvNetParams, state: AdamState,
              lr: float) -> tuple[ConvNetParams, AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    new_params = {}
    new_m = {}
    new_v = {}
    t = state.step + 1
    for name, p in params.tensors().items():
        g = getattr(grads, name)
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient {name} has shape {g.shape}, want {p.shape}")
        m = state.beta1 * state.m[name] + (1 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1 - state.beta2) * (g * g)
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name] = m
        new_v[name] = v
    return (
        ConvNetParams(**new_params),
        AdamState(m=new_m, v=new_v, step=t, beta1=state.beta1, beta2=state.beta2,
                  eps=state.eps),
    )


def save_params(path, params: ConvNetParams) -> None:
    """Write the versioned little-endian container (magic, shape table, f64 payload)."""
    blob = bytearray()
    blob += PARAMS_MAGIC
    tensors = params.tensors()
    blob += struct.pack("<II", PARAMS_VERSION, len(tensors))
    for name, t in tensors.items():
        encoded = name.encode("ascii")
        blob += struct.pack("<H", len(encoded)) + encoded
        blob += struct.pack("<B", t.ndim)
        blob += struct.pack(f"<{t.ndim}I", *t.shape)
    for t in tensors.values():
        blob += np.ascontiguousarray(t, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_params(path) -> ConvNetParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(PARAMS_MAGIC)] != PARAMS_MAGIC:
        raise IoFailure(f"{path}: bad parameter-file magic")
    offset = len(PARAMS_MAGIC)
    version, count = struct.unpack_from("<II", data, offset)
    offset += 8
    if version != PARAMS_VERSION:
        raise IoFailure(f"{path}: unsupported parameter-file version {version}")
    shapes: list[tuple[str, tuple[int, ...]]] = []
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset:offset + name_len].decode("ascii")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", data, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", data, offset)
            offset += 4 * ndim
            shapes.append((name, shape))
        values = {}
        for name, shape in shapes:
            n = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset)
            offset += 8 * n
            values[name] = arr.reshape(shape).astype(float)
    except (struct.error, ValueError) as exc:
        raise IoFailure(f"{path}: truncated parameter file ({exc})") from exc
    missing = set(PARAM_SHAPES) - set(values)
    if missing:
        raise IoFailure(f"{path}: parameter file missing tensors {sorted(missing)}")
    for name, shape in PARAM_SHAPES.items():
        if values[name].shape != shape:
            raise IoFailure(
                f"{path}: tensor {name} has shape {values[name].shape}, want {shape}"
            )
    return ConvNetParams(**{k: values[k] for k in PARAM_SHAPES})
