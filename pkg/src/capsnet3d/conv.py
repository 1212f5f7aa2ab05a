"""3D convolution, its exact adjoint, and window-mean pooling.

Kernels are stored ``[kT, kH, kW, Cin, Cout]`` over channels-last inputs
``[T, H, W, Cin]`` (an optional leading batch axis is accepted everywhere).
``conv3d_transposed`` is built from the same window decomposition as
``conv3d``, so the pair satisfies the adjoint identity
``<conv3d(x), y> == <x, conv3d_transposed(y)>`` to rounding error.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigurationError
from . import tensor as T
from .tensor import Tensor, _make

# im2col buffers above this many elements are processed in row blocks to keep
# peak memory bounded on the full-size preset.
_COL_BLOCK_ELEMS = 16 * 1024 * 1024


def normalize_padding(padding) -> tuple:
    """Accepts an int, three ints, or three (before, after) pairs."""
    if isinstance(padding, int):
        return ((padding, padding),) * 3
    padding = tuple(padding)
    if len(padding) != 3:
        raise ConfigurationError(f"padding must cover 3 spatio-temporal axes, got {padding!r}")
    out = []
    for p in padding:
        if isinstance(p, int):
            out.append((p, p))
        else:
            before, after = p
            out.append((int(before), int(after)))
    return tuple(out)


def same_padding(in_extents: Sequence[int], kernel: Sequence[int], stride: Sequence[int]) -> tuple:
    """Per-axis (before, after) pads giving output extent ceil(in / stride)."""
    pads = []
    for n, k, s in zip(in_extents, kernel, stride):
        out = -(-n // s)
        total = max((out - 1) * s + k - n, 0)
        pads.append((total // 2, total - total // 2))
    return tuple(pads)


def conv_output_extent(n: int, k: int, s: int, pad: tuple) -> int:
    return (n + pad[0] + pad[1] - k) // s + 1


def _with_batch(x: np.ndarray):
    if x.ndim == 4:
        return x[None], True
    if x.ndim == 5:
        return x, False
    raise ConfigurationError(f"conv input must be rank 4 or 5, got rank {x.ndim}")


def _pad_input(x: np.ndarray, pads) -> np.ndarray:
    if all(p == (0, 0) for p in pads):
        return x
    return np.pad(x, ((0, 0), pads[0], pads[1], pads[2], (0, 0)))


def _gather_cols(xp: np.ndarray, kdims, stride, out_dims) -> np.ndarray:
    """Strided window view [B, To, Ho, Wo, kT, kH, kW, C] over a padded input."""
    b, _, _, _, c = xp.shape
    kt, kh, kw = kdims
    to, ho, wo = out_dims
    sb, st, sh, sw, sc = xp.strides
    return as_strided(
        xp,
        shape=(b, to, ho, wo, kt, kh, kw, c),
        strides=(sb, st * stride[0], sh * stride[1], sw * stride[2], st, sh, sw, sc),
        writeable=False,
    )


def _blocked_matmul(cols_view: np.ndarray, k2: np.ndarray) -> np.ndarray:
    """Flatten the window view to [N, kvol*C] and multiply by ``k2``.

    Reshaping the strided view performs the im2col copy; above the block
    threshold the copy+matmul runs per (batch, t) slab to bound peak memory.
    """
    lead = int(np.prod(cols_view.shape[:4]))
    width = int(np.prod(cols_view.shape[4:]))
    if lead * width <= _COL_BLOCK_ELEMS:
        return cols_view.reshape(lead, width) @ k2
    out = np.empty((lead, k2.shape[1]), dtype=cols_view.dtype)
    b, to = cols_view.shape[0], cols_view.shape[1]
    idx = 0
    for bb in range(b):
        for tt in range(to):
            chunk = cols_view[bb, tt].reshape(-1, width)
            out[idx : idx + chunk.shape[0]] = chunk @ k2
            idx += chunk.shape[0]
    return out


def _conv3d_fwd(x: np.ndarray, k: np.ndarray, stride, pads) -> np.ndarray:
    xp = _pad_input(x, pads)
    kt, kh, kw, cin, cout = k.shape
    out_dims = tuple(
        conv_output_extent(x.shape[1 + i], k.shape[i], stride[i], pads[i]) for i in range(3)
    )
    cols = _gather_cols(xp, (kt, kh, kw), stride, out_dims)
    out2 = _blocked_matmul(cols, k.reshape(-1, cout))
    return out2.reshape((x.shape[0],) + out_dims + (cout,))


def _conv3d_dk(x: np.ndarray, dout: np.ndarray, stride, pads, kshape) -> np.ndarray:
    xp = _pad_input(x, pads)
    kt, kh, kw, cin, cout = kshape
    out_dims = dout.shape[1:4]
    cols = _gather_cols(xp, (kt, kh, kw), stride, out_dims)
    width = kt * kh * kw * cin
    dk2 = np.zeros((width, cout), dtype=x.dtype)
    b, to = cols.shape[0], cols.shape[1]
    if int(np.prod(cols.shape[:4])) * width <= _COL_BLOCK_ELEMS:
        flat = cols.reshape(-1, width)
        dk2 += flat.T @ dout.reshape(-1, cout)
    else:
        for bb in range(b):
            for tt in range(to):
                chunk = cols[bb, tt].reshape(-1, width)
                dk2 += chunk.T @ dout[bb, tt].reshape(-1, cout)
    return dk2.reshape(kshape)


def _convT_fwd(
    y: np.ndarray, k: np.ndarray, stride, pads, output_extents: Optional[tuple] = None
) -> np.ndarray:
    kt, kh, kw, cin, cout = k.shape
    ydims = y.shape[1:4]
    default = tuple(
        (ydims[i] - 1) * stride[i] + k.shape[i] - pads[i][0] - pads[i][1] for i in range(3)
    )
    if output_extents is None:
        output_extents = default
    else:
        output_extents = tuple(output_extents)
        for i in range(3):
            hi = default[i] + stride[i] - 1
            if not (default[i] <= output_extents[i] <= hi):
                raise ConfigurationError(
                    f"requested transposed-conv extent {output_extents[i]} on axis {i} "
                    f"outside attainable range [{default[i]}, {hi}]"
                )
    buf_dims = tuple(output_extents[i] + pads[i][0] + pads[i][1] for i in range(3))
    buf = np.zeros((y.shape[0],) + buf_dims + (cin,), dtype=y.dtype)
    cols = (y.reshape(-1, cout) @ k.reshape(-1, cout).T).reshape(
        y.shape[:4] + (kt, kh, kw, cin)
    )
    ty, hy, wy = ydims
    st, sh, sw = stride
    for a in range(kt):
        for bx in range(kh):
            for c in range(kw):
                buf[:, a : a + ty * st : st, bx : bx + hy * sh : sh, c : c + wy * sw : sw, :] += cols[
                    :, :, :, :, a, bx, c, :
                ]
    slices = tuple(slice(pads[i][0], buf_dims[i] - pads[i][1]) for i in range(3))
    return buf[:, slices[0], slices[1], slices[2], :]


def _convT_dy(dout: np.ndarray, k: np.ndarray, stride, pads, ydims) -> np.ndarray:
    # adjoint of the scatter: gather conv-style windows of the padded gradient
    gp = np.pad(dout, ((0, 0), pads[0], pads[1], pads[2], (0, 0)))
    kt, kh, kw, cin, cout = k.shape
    needed = tuple((ydims[i] - 1) * stride[i] + k.shape[i] for i in range(3))
    extra = tuple(needed[i] - gp.shape[1 + i] for i in range(3))
    if any(e > 0 for e in extra):
        gp = np.pad(
            gp,
            ((0, 0),) + tuple((0, max(e, 0)) for e in extra) + ((0, 0),),
        )
    cols = _gather_cols(gp, (kt, kh, kw), stride, ydims)
    out2 = _blocked_matmul(cols, k.reshape(-1, cout))
    return out2.reshape(dout.shape[:1] + tuple(ydims) + (cout,))


def _convT_dk(y: np.ndarray, dout: np.ndarray, stride, pads, kshape) -> np.ndarray:
    gp = np.pad(dout, ((0, 0), pads[0], pads[1], pads[2], (0, 0)))
    kt, kh, kw, cin, cout = kshape
    ydims = y.shape[1:4]
    needed = tuple((ydims[i] - 1) * stride[i] + kshape[i] for i in range(3))
    extra = tuple(needed[i] - gp.shape[1 + i] for i in range(3))
    if any(e > 0 for e in extra):
        gp = np.pad(gp, ((0, 0),) + tuple((0, max(e, 0)) for e in extra) + ((0, 0),))
    cols = _gather_cols(gp, (kt, kh, kw), stride, ydims)
    width = kt * kh * kw * cin
    flat = cols.reshape(-1, width)
    dk2 = flat.T @ y.reshape(-1, cout)
    return dk2.reshape(kshape)


def _validate_conv_args(x: Tensor, kernel: Tensor, stride, pads) -> tuple:
    stride = tuple(int(s) for s in stride)
    if len(stride) != 3 or any(s < 1 for s in stride):
        raise ConfigurationError(f"stride must be three integers >= 1, got {stride!r}")
    if kernel.data.ndim != 5:
        raise ConfigurationError(f"kernel must be rank 5 [kT,kH,kW,Cin,Cout], got rank {kernel.data.ndim}")
    return stride


def conv3d(x: Tensor, kernel: Tensor, stride=(1, 1, 1), padding=0) -> Tensor:
    """Strided 3D cross-correlation over a channels-last video tensor."""
    pads = normalize_padding(padding)
    stride = _validate_conv_args(x, kernel, stride, pads)
    xb, squeeze = _with_batch(x.data)
    kt, kh, kw, cin, cout = kernel.data.shape
    if xb.shape[4] != cin:
        raise ConfigurationError(
            f"conv3d channel mismatch: input has {xb.shape[4]}, kernel expects {cin}"
        )
    for i in range(3):
        if xb.shape[1 + i] + pads[i][0] + pads[i][1] < kernel.data.shape[i]:
            raise ConfigurationError(
                f"conv3d kernel extent {kernel.data.shape[i]} exceeds padded input "
                f"extent on axis {i} ({xb.shape[1 + i]} + pads {pads[i]})"
            )
    T._check_finite(xb, "conv3d.input")
    out = _conv3d_fwd(xb, kernel.data, stride, pads)
    if squeeze:
        out = out[0]

    x_shape = xb.shape

    def backward(g, needs):
        gb = g[None] if squeeze else g
        gx = gk = None
        if needs[0]:
            gx = _convT_fwd(gb, kernel.data, stride, pads, output_extents=x_shape[1:4])
            if squeeze:
                gx = gx[0]
        if needs[1]:
            gk = _conv3d_dk(xb, gb, stride, pads, kernel.data.shape)
        return (gx, gk)

    return _make(np.ascontiguousarray(out), "conv3d", (x, kernel), backward)


def conv3d_transposed(
    y: Tensor, kernel: Tensor, stride=(1, 1, 1), padding=0, output_extents: Optional[tuple] = None
) -> Tensor:
    """Exact adjoint of ``conv3d`` with the same kernel/stride/padding.

    Maps Cout channels back to Cin. ``output_extents`` resolves the stride
    ambiguity when the matching forward input had a dead zone.
    """
    pads = normalize_padding(padding)
    stride = _validate_conv_args(y, kernel, stride, pads)
    yb, squeeze = _with_batch(y.data)
    kt, kh, kw, cin, cout = kernel.data.shape
    if yb.shape[4] != cout:
        raise ConfigurationError(
            f"conv3d_transposed channel mismatch: input has {yb.shape[4]}, kernel expects {cout}"
        )
    out = _convT_fwd(yb, kernel.data, stride, pads, output_extents)
    if squeeze:
        out = out[0]
    y_dims = yb.shape[1:4]

    def backward(g, needs):
        gb = g[None] if squeeze else g
        gy = gk = None
        if needs[0]:
            gy = _convT_dy(gb, kernel.data, stride, pads, y_dims)
            if squeeze:
                gy = gy[0]
        if needs[1]:
            gk = _convT_dk(yb, gb, stride, pads, kernel.data.shape)
        return (gy, gk)

    return _make(np.ascontiguousarray(out), "conv3d_transposed", (y, kernel), backward)


def window_mean3d(x: Tensor, window, stride) -> Tensor:
    """Mean over valid [kT,kH,kW] windows of a [..., T, H, W, F] tensor."""
    window = tuple(int(w) for w in window)
    stride = tuple(int(s) for s in stride)
    data = x.data
    if data.ndim < 4:
        raise ConfigurationError("window_mean3d needs at least [T,H,W,F] axes")
    dims = data.shape[-4:-1]
    out_dims = []
    for i in range(3):
        if dims[i] < window[i]:
            raise ConfigurationError(
                f"pooling window {window[i]} exceeds grid extent {dims[i]} on axis {i}"
            )
        out_dims.append((dims[i] - window[i]) // stride[i] + 1)
    to, ho, wo = out_dims
    kt, kh, kw = window
    st, sh, sw = stride
    count = kt * kh * kw
    acc = None
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                piece = data[
                    ...,
                    a : a + to * st : st,
                    b : b + ho * sh : sh,
                    c : c + wo * sw : sw,
                    :,
                ]
                acc = piece.copy() if acc is None else acc + piece
    out = acc / count

    def backward(g, needs):
        gx = np.zeros_like(data)
        gshare = g / count
        for a in range(kt):
            for b in range(kh):
                for c in range(kw):
                    gx[
                        ...,
                        a : a + to * st : st,
                        b : b + ho * sh : sh,
                        c : c + wo * sw : sw,
                        :,
                    ] += gshare
        return (gx,)

    return _make(np.ascontiguousarray(out), "window_mean3d", (x,), backward)
