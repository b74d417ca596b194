"""Dense float64 tensors with reverse-mode automatic differentiation.

A ``Graph`` is a define-by-run tape: every operation appends a node holding
its exact forward value. Gradients are available at *any* node, including
intermediates such as post-softmax attention weights, which is what the
attribution pass differentiates. ``finite_diff`` is the independent oracle
used by the test suite; it perturbs a node's stored value and replays only
the downstream subgraph.

All values are float64. Broadcasting is restricted to scalar operands;
anything else needs an explicit ``reshape``/``permute``/``tile_hw`` so the
gradient rules stay auditable.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Graph",
    "Node",
    "ShapeError",
    "backward",
    "backward_batch",
    "finite_diff",
    "OP_TAGS",
]


class ShapeError(ValueError):
    """An operation was called with incompatible input shapes."""


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _neg_axes(axis, ndim):
    """Normalize an axis spec to a tuple of negative axes.

    Negative axes address the same dimensions whether or not a leading
    seed axis has been prepended, so every reduction below uses them.
    """
    if axis is None:
        axes = tuple(range(ndim))
    elif isinstance(axis, (int, np.integer)):
        axes = (int(axis),)
    else:
        axes = tuple(int(a) for a in axis)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for {ndim}-d tensor")
        out.append(a - ndim if a >= 0 else a)
    if len(set(out)) != len(out):
        raise ShapeError(f"duplicate axes in {axes}")
    return tuple(sorted(out))


# ---------------------------------------------------------------------------
# convolution helpers


def _conv_out_hw(h, w, kh, kw, stride, pad):
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    return oh, ow


def _pad2d(x, pad, pad_mode):
    if pad == 0:
        return x
    mode = "edge" if pad_mode == "replicate" else "constant"
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode=mode)


def _im2col(x, kh, kw, stride, pad, pad_mode):
    """(B,C,H,W) -> (B, C*kh*kw, OH*OW) patch matrix."""
    b, c, h, w = x.shape
    oh, ow = _conv_out_hw(h, w, kh, kw, stride, pad)
    xp = _pad2d(x, pad, pad_mode)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (B, C, OH, OW, kh, kw) -> (B, C, kh, kw, OH, OW)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(b, c * kh * kw, oh * ow), (oh, ow)

def _col2im(gcols, xshape, kh, kw, stride, pad, pad_mode):
    """Adjoint of ``_im2col``: (N, C*kh*kw, OH*OW) -> (N, C, H, W)."""
    n = gcols.shape[0]
    c, h, w = xshape[-3:]
    oh, ow = _conv_out_hw(h, w, kh, kw, stride, pad)
    g = gcols.reshape(n, c, kh, kw, oh, ow)
    hp, wp = h + 2 * pad, w + 2 * pad
    xp = np.zeros((n, c, hp, wp))
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += g[:, :, i, j]
    if pad == 0:
        return xp
    if pad_mode == "replicate":
        # replicated border pixels alias the outermost rows/cols: fold their
        # gradient back in (rows first, then columns, so corners land right)
        xp[:, :, pad, :] += xp[:, :, :pad, :].sum(axis=2)
        xp[:, :, -pad - 1, :] += xp[:, :, -pad:, :].sum(axis=2)
        rows = xp[:, :, pad:-pad, :]
        rows[:, :, :, pad] += rows[:, :, :, :pad].sum(axis=3)
        rows[:, :, :, -pad - 1] += rows[:, :, :, -pad:].sum(axis=3)
        return rows[:, :, :, pad:-pad]
    return xp[:, :, pad:-pad, pad:-pad]


# ---------------------------------------------------------------------------
# op registry
#
# forward(vals, attrs) -> ndarray; validates shapes, raises ShapeError.
# vjp(g, vals, out, attrs, needed) -> list of per-input gradients (or None
# for a constant or unneeded input). ``g`` always carries a leading seed
# axis K: g.shape == (K,) + out.shape, and each returned gradient has
# shape (K,) + input.shape. ``needed`` flags which input gradients the
# caller will use; expensive ops honor it, cheap ones may ignore it.


def _fw_add(vals, attrs):
    a, b = vals
    if a.shape == b.shape or b.ndim == 0 or a.ndim == 0:
        return a + b
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} (only equal or scalar)")


def _vjp_scalar_aware(g, a, b):
    """Gradient pair for elementwise a (+/-) b with optional scalar operand."""
    k = g.shape[0]

    def reduce_to(shape):
        if shape == g.shape[1:]:
            return g
        return g.reshape(k, -1).sum(axis=1).reshape((k,) + shape)

    return reduce_to(a.shape), reduce_to(b.shape)


def _vjp_add(g, vals, out, attrs, needed):
    a, b = vals
    ga, gb = _vjp_scalar_aware(g, a, b)
    return [ga, gb]


def _fw_sub(vals, attrs):
    a, b = vals
    if a.shape == b.shape or b.ndim == 0 or a.ndim == 0:
        return a - b
    raise ShapeError(f"sub: shapes {a.shape} and {b.shape} (only equal or scalar)")


def _vjp_sub(g, vals, out, attrs, needed):
    a, b = vals
    ga, gb = _vjp_scalar_aware(g, a, b)
    return [ga, -gb]


def _fw_mul(vals, attrs):
    a, b = vals
    if a.shape == b.shape or b.ndim == 0 or a.ndim == 0:
        return a * b
    raise ShapeError(f"mul: shapes {a.shape} and {b.shape} (only equal or scalar)")


def _vjp_mul(g, vals, out, attrs, needed):
    a, b = vals
    k = g.shape[0]

    def reduce_to(arr, shape):
        if shape == arr.shape[1:]:
            return arr
        return arr.reshape(k, -1).sum(axis=1).reshape((k,) + shape)

    return [reduce_to(g * b, a.shape), reduce_to(g * a, b.shape)]


def _fw_scale(vals, attrs):
    (a,) = vals
    return a * float(attrs["factor"])


def _vjp_scale(g, vals, out, attrs, needed):
    return [g * float(attrs["factor"])]


def _fw_matmul(vals, attrs):
    a, b = vals
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-d, got {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dims differ, {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    return np.matmul(a, b)


def _vjp_matmul(g, vals, out, attrs, needed):
    a, b = vals
    ga = np.matmul(g, np.swapaxes(b, -1, -2)) if needed[0] else None
    gb = np.matmul(np.swapaxes(a, -1, -2), g) if needed[1] else None
    return [ga, gb]


def _fw_linear(vals, attrs):
    x, w, b = vals
    if w.ndim != 2 or b.ndim != 1:
        raise ShapeError(f"linear: weight/bias must be 2-d/1-d, got {w.shape}, {b.shape}")
    if x.shape[-1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"linear: {x.shape} @ {w.shape} + {b.shape}")
    return x @ w + b


def _vjp_linear(g, vals, out, attrs, needed):
    x, w, b = vals
    k = g.shape[0]
    gx = np.matmul(g, w.T) if needed[0] else None
    gw = gb = None
    if needed[1] or needed[2]:
        gm = g.reshape(k, -1, w.shape[1])
        if needed[1]:
            gw = np.matmul(x.reshape(-1, x.shape[-1]).T, gm)
        if needed[2]:
            gb = gm.sum(axis=1)
    return [gx, gw, gb]


def _fw_conv2d(vals, attrs):
    x, w, b = vals
    stride = int(attrs.get("stride", 1))
    pad = int(attrs.get("pad", 0))
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need (B,C,H,W) and (O,C,kh,kw), got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch, input {x.shape} vs kernel {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {b.shape} does not match {w.shape[0]} filters")
    kh, kw = w.shape[2], w.shape[3]
    oh, ow = _conv_out_hw(x.shape[2], x.shape[3], kh, kw, stride, pad)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: empty output for input {x.shape}, kernel {w.shape}, stride {stride}, pad {pad}")
    cols, (oh, ow) = _im2col(x, kh, kw, stride, pad, attrs.get("pad_mode", "zeros"))
    out = np.matmul(w.reshape(w.shape[0], -1), cols) + b[:, None]
    return out.reshape(x.shape[0], w.shape[0], oh, ow)


def _vjp_conv2d(g, vals, out, attrs, needed):
    x, w, b = vals
    stride = int(attrs.get("stride", 1))
    pad = int(attrs.get("pad", 0))
    pad_mode = attrs.get("pad_mode", "zeros")
    k = g.shape[0]
    bs, cout = x.shape[0], w.shape[0]
    cin = w.shape[1]
    kh, kw = w.shape[2], w.shape[3]
    oh, ow = g.shape[-2], g.shape[-1]
    p = oh * ow
    gf = g.reshape(k, bs, cout, p)
    gb = gf.sum(axis=(1, 3)) if needed[2] else None
    gw = None
    if needed[1]:
        cols, _ = _im2col(x, kh, kw, stride, pad, pad_mode)
        # (K,Cout,B*P) @ (B*P,Ckk) -> (K,Cout,Ckk)
        g2 = np.ascontiguousarray(gf.transpose(0, 2, 1, 3)).reshape(k, cout, bs * p)
        c2 = np.ascontiguousarray(cols.transpose(1, 0, 2)).reshape(cols.shape[1], bs * p)
        gw = np.matmul(g2, c2.T).reshape((k,) + w.shape)
    gx = None
    if needed[0]:
        if stride == 1 and pad_mode == "zeros" and kh - 1 - pad >= 0:
            # full correlation with the flipped kernel, all in one matmul
            gm = g.reshape(k * bs, cout, oh, ow)
            gcols, _ = _im2col(gm, kh, kw, 1, kh - 1 - pad, "zeros")
            wflip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, cout * kh * kw)
            gx = np.matmul(wflip, gcols).reshape((k,) + x.shape)
        else:
            gcols = np.matmul(w.reshape(cout, -1).T, gf)  # (K,B,Ckk,P)
            gx = _col2im(gcols.reshape(k * bs, -1, p), x.shape, kh, kw, stride, pad, pad_mode)
            gx = gx.reshape((k,) + x.shape)
    return [gx, gw, gb]


def _fw_softmax(vals, attrs):
    (x,) = vals
    (axis,) = _neg_axes(attrs.get("axis", -1), x.ndim)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _vjp_softmax(g, vals, out, attrs, needed):
    (x,) = vals
    (axis,) = _neg_axes(attrs.get("axis", -1), x.ndim)
    gp = g * out
    return [gp - out * gp.sum(axis=axis, keepdims=True)]


def _fw_group_norm(vals, attrs):
    x, gamma, beta = vals
    groups = int(attrs["groups"])
    eps = float(attrs.get("eps", 1e-5))
    if x.ndim != 4:
        raise ShapeError(f"group_norm: need (B,C,H,W), got {x.shape}")
    b, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: affine shapes {gamma.shape}, {beta.shape} for {c} channels")
    xg = x.reshape(b, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    xhat = ((xg - mu) / np.sqrt(var + eps)).reshape(x.shape)
    return xhat * gamma[None, :, None, None] + beta[None, :, None, None]


def _vjp_group_norm(g, vals, out, attrs, needed):
    x, gamma, beta = vals
    groups = int(attrs["groups"])
    eps = float(attrs.get("eps", 1e-5))
    b, c, h, w = x.shape
    k = g.shape[0]
    xg = x.reshape(b, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mu) * ivar                                 # (B,G,n)
    gbeta = g.sum(axis=(1, 3, 4)) if needed[2] else None
    ggamma = (g * xhat.reshape(x.shape)).sum(axis=(1, 3, 4)) if needed[1] else None
    gx = None
    if needed[0]:
        gh = (g * gamma[None, None, :, None, None]).reshape(k, b, groups, -1)
        gx = ivar * (gh - gh.mean(axis=-1, keepdims=True)
                     - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gx = gx.reshape((k,) + x.shape)
    return [gx, ggamma, gbeta]


def _fw_silu(vals, attrs):
    (x,) = vals
    return x * _sigmoid(x)


def _vjp_silu(g, vals, out, attrs, needed):
    (x,) = vals
    s = _sigmoid(x)
    return [g * (s + x * s * (1.0 - s))]


def _fw_reshape(vals, attrs):
    (x,) = vals
    shape = tuple(attrs["shape"])
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    return x.reshape(shape)


def _vjp_reshape(g, vals, out, attrs, needed):
    (x,) = vals
    return [g.reshape((g.shape[0],) + x.shape)]


def _fw_permute(vals, attrs):
    (x,) = vals
    axes = tuple(attrs["axes"])
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for {x.ndim}-d tensor")
    return np.ascontiguousarray(x.transpose(axes))


def _vjp_permute(g, vals, out, attrs, needed):
    axes = tuple(attrs["axes"])
    inv = np.argsort(axes)
    return [np.ascontiguousarray(g.transpose((0,) + tuple(inv + 1)))]


def _fw_concat(vals, attrs):
    axis = attrs.get("axis", 0)
    if not vals:
        raise ShapeError("concat: no inputs")
    (axis,) = _neg_axes(axis, vals[0].ndim)
    ref = list(vals[0].shape)
    for v in vals[1:]:
        trial = list(v.shape)
        if len(trial) != len(ref):
            raise ShapeError(f"concat: rank mismatch {vals[0].shape} vs {v.shape}")
        trial[axis] = ref[axis]
        if trial != ref:
            raise ShapeError(f"concat: off-axis shape mismatch {vals[0].shape} vs {v.shape}")
    return np.concatenate(vals, axis=axis)


def _vjp_concat(g, vals, out, attrs, needed):
    (axis,) = _neg_axes(attrs.get("axis", 0), vals[0].ndim)
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]
    return list(np.split(g, splits, axis=axis))


def _fw_embed_lookup(vals, attrs):
    (table,) = vals
    ids = np.asarray(attrs["ids"])
    if table.ndim != 2:
        raise ShapeError(f"embed_lookup: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embed_lookup: id out of range [0,{table.shape[0]}) in {ids.tolist()}")
    return table[ids]


def _vjp_embed_lookup(g, vals, out, attrs, needed):
    (table,) = vals
    ids = np.asarray(attrs["ids"]).reshape(-1)
    k = g.shape[0]
    gt = np.zeros((k,) + table.shape)
    np.add.at(gt, (slice(None), ids), g.reshape(k, ids.size, table.shape[1]))
    return [gt]


def _fw_mean(vals, attrs):
    (x,) = vals
    axes = _neg_axes(attrs.get("axis"), x.ndim)
    return x.mean(axis=axes)


def _vjp_mean(g, vals, out, attrs, needed):
    (x,) = vals
    axes = _neg_axes(attrs.get("axis"), x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    ge = np.expand_dims(g, axes)
    return [np.broadcast_to(ge / count, (g.shape[0],) + x.shape).copy()]


def _fw_sum(vals, attrs):
    (x,) = vals
    axes = _neg_axes(attrs.get("axis"), x.ndim)
    return x.sum(axis=axes)


def _vjp_sum(g, vals, out, attrs, needed):
    (x,) = vals
    axes = _neg_axes(attrs.get("axis"), x.ndim)
    ge = np.expand_dims(g, axes)
    return [np.broadcast_to(ge, (g.shape[0],) + x.shape).copy()]


def _fw_upsample(vals, attrs):
    (x,) = vals
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2x: need (B,C,H,W), got {x.shape}")
    return x.repeat(2, axis=2).repeat(2, axis=3)


def _vjp_upsample(g, vals, out, attrs, needed):
    (x,) = vals
    k, b, c, h2, w2 = g.shape
    return [g.reshape(k, b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(4, 6))]


def _fw_downsample(vals, attrs):
    (x,) = vals
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"downsample_avg2x: need even (B,C,H,W), got {x.shape}")
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _vjp_downsample(g, vals, out, attrs, needed):
    return [(g / 4.0).repeat(2, axis=3).repeat(2, axis=4)]


def _fw_tile_hw(vals, attrs):
    (x,) = vals
    h, w = int(attrs["h"]), int(attrs["w"])
    if x.ndim != 2:
        raise ShapeError(f"tile_hw: need (B,C), got {x.shape}")
    return np.broadcast_to(x[:, :, None, None], x.shape + (h, w)).copy()


def _vjp_tile_hw(g, vals, out, attrs, needed):
    return [g.sum(axis=(-1, -2))]


def _fw_l2norm_rows(vals, attrs):
    (x,) = vals
    eps = float(attrs.get("eps", 1e-12))
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)
    return x / n


def _vjp_l2norm_rows(g, vals, out, attrs, needed):
    (x,) = vals
    eps = float(attrs.get("eps", 1e-12))
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)
    return [(g - out * (g * out).sum(axis=-1, keepdims=True)) / n]


def _fw_softmax_xent(vals, attrs):
    logits, onehot = vals
    if logits.ndim != 2 or logits.shape != onehot.shape:
        raise ShapeError(f"softmax_xent: need matching (B,C), got {logits.shape}, {onehot.shape}")
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return np.asarray(-(onehot * logp).sum() / logits.shape[0])


def _vjp_softmax_xent(g, vals, out, attrs, needed):
    logits, onehot = vals
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    gl = g.reshape(-1, 1, 1) * (p - onehot) / logits.shape[0]
    return [gl, None]


_OPS = {
    "add": (_fw_add, _vjp_add),
    "sub": (_fw_sub, _vjp_sub),
    "mul": (_fw_mul, _vjp_mul),
    "scale": (_fw_scale, _vjp_scale),
    "matmul": (_fw_matmul, _vjp_matmul),
    "linear": (_fw_linear, _vjp_linear),
    "conv2d": (_fw_conv2d, _vjp_conv2d),
    "softmax": (_fw_softmax, _vjp_softmax),
    "group_norm": (_fw_group_norm, _vjp_group_norm),
    "silu": (_fw_silu, _vjp_silu),
    "reshape": (_fw_reshape, _vjp_reshape),
    "permute": (_fw_permute, _vjp_permute),
    "concat": (_fw_concat, _vjp_concat),
    "embed_lookup": (_fw_embed_lookup, _vjp_embed_lookup),
    "mean": (_fw_mean, _vjp_mean),
    "sum": (_fw_sum, _vjp_sum),
    "upsample_nearest2x": (_fw_upsample, _vjp_upsample),
    "downsample_avg2x": (_fw_downsample, _vjp_downsample),
    "tile_hw": (_fw_tile_hw, _vjp_tile_hw),
    "l2norm_rows": (_fw_l2norm_rows, _vjp_l2norm_rows),
    "softmax_xent": (_fw_softmax_xent, _vjp_softmax_xent),
}

OP_TAGS = tuple(sorted(_OPS))


class Node:
    __slots__ = ("tag", "inputs", "attrs", "value")

    def __init__(self, tag, inputs, attrs, value):
        self.tag = tag
        self.inputs = inputs
        self.attrs = attrs
        self.value = value

    def __repr__(self):
        return f"Node({self.tag}, inputs={self.inputs}, shape={self.value.shape})"


class Graph:
    """Append-only operation tape; node ids are list indices.

    The tape is single-writer while being built and immutable afterwards;
    ``backward``/``replay`` only read it.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.roots: list[int] = []
        self._consumers: dict[int, list[int]] = {}

    def __len__(self):
        return len(self.nodes)

    def input(self, value) -> int:
        """Append a root (parameter or data) node."""
        arr = _as_f64(value)
        if not np.all(np.isfinite(arr)):
            raise ValueError("input: non-finite entries")
        nid = len(self.nodes)
        self.nodes.append(Node("input", (), {}, arr))
        self.roots.append(nid)
        return nid

    def op(self, tag: str, *inputs: int, **attrs) -> int:
        """Append an operation node and compute its forward value."""
        if tag not in _OPS:
            raise ShapeError(f"unknown op tag {tag!r}")
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise KeyError(f"{tag}: input node {i} does not exist")
        vals = [self.nodes[i].value for i in inputs]
        forward, _ = _OPS[tag]
        value = forward(vals, attrs)
        nid = len(self.nodes)
        self.nodes.append(Node(tag, tuple(inputs), attrs, value))
        for i in inputs:
            self._consumers.setdefault(i, []).append(nid)
        return nid

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    def shape(self, nid: int):
        return self.nodes[nid].value.shape

    def ancestors(self, nid: int) -> set:
        """All nodes the given node depends on, inclusive."""
        seen = {nid}
        stack = [nid]
        while stack:
            for i in self.nodes[stack.pop()].inputs:
                if i not in seen:
                    seen.add(i)
                    stack.append(i)
        return seen

    def descendants(self, nids) -> set:
        """All nodes depending on any of the given nodes, inclusive."""
        seen = set(nids)
        stack = list(nids)
        while stack:
            for c in self._consumers.get(stack.pop(), ()):
                if c not in seen:
                    seen.add(c)
                    stack.append(c)
        return seen

    def replay(self, overrides=None) -> list:
        """Recompute values with some nodes' values replaced.

        Returns a list of values for all nodes. An override replaces the
        node's value before any downstream consumer reads it (for an op
        node the recomputed value is discarded), so perturbing an
        intermediate propagates only through its consumers. Subgraphs that
        no override reaches reuse stored values, which equal a fresh
        forward pass bit-exactly because every op is deterministic.
        """
        overrides = overrides or {}
        vals: list = [None] * len(self.nodes)
        dirty = set()
        for nid, node in enumerate(self.nodes):
            if nid in overrides:
                vals[nid] = _as_f64(overrides[nid])
                if vals[nid].shape != node.value.shape:
                    raise ShapeError(
                        f"replay: override for node {nid} has shape {vals[nid].shape}, "
                        f"expected {node.value.shape}")
                dirty.add(nid)
                continue
            if node.tag == "input":
                vals[nid] = node.value
                continue
            if any(i in dirty for i in node.inputs):
                forward, _ = _OPS[node.tag]
                vals[nid] = forward([vals[i] for i in node.inputs], node.attrs)
                dirty.add(nid)
            else:
                vals[nid] = node.value
        return vals


def _check_seed(graph, seed_node, seed):
    if not 0 <= seed_node < len(graph.nodes):
        raise KeyError(f"backward: seed node {seed_node} does not exist")
    if seed.shape[1:] != graph.nodes[seed_node].value.shape:
        raise ShapeError(
            f"backward: seed shape {seed.shape[1:]} != node shape "
            f"{graph.nodes[seed_node].value.shape}")


def backward_batch(graph: Graph, seed_node: int, seeds, targets=None) -> dict:
    """Reverse sweep with a stack of K seed tensors in one pass.

    ``seeds`` has shape (K,) + seed_node.shape; each slice behaves exactly
    like an independent ``backward`` call. With ``targets`` given, the
    sweep is pruned to nodes lying between the targets and the seed, and
    only the targets' gradients are retained (intermediate buffers are
    freed as soon as their consumers are done).
    """
    seeds = _as_f64(seeds)
    _check_seed(graph, seed_node, seeds)
    active = graph.ancestors(seed_node)
    keep_all = targets is None
    keep = set()
    if targets is not None:
        targets = list(targets)
        missing = [t for t in targets if t not in active]
        if missing:
            raise KeyError(f"backward: target nodes {missing} do not feed the seed node")
        active &= graph.descendants(targets)
        keep = set(targets)
    grads: dict[int, np.ndarray] = {seed_node: seeds}
    out: dict[int, np.ndarray] = {}
    for nid in range(seed_node, -1, -1):
        if nid not in grads:
            continue
        g = grads.pop(nid)
        if keep_all or nid in keep:
            out[nid] = g
        node = graph.nodes[nid]
        if node.tag == "input":
            continue
        _, vjp = _OPS[node.tag]
        needed = tuple(i in active for i in node.inputs)
        gin = vjp(g, [graph.nodes[i].value for i in node.inputs], node.value,
                  node.attrs, needed)
        for i, gi in zip(node.inputs, gin):
            if gi is None or i not in active:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    return out


def backward(graph: Graph, seed_node: int, seed) -> dict:
    """Reverse-mode sweep: gradient of <seed, seed_node value> at every node.

    Returns {node id -> gradient array of that node's shape}; ids absent
    from the map have zero gradient. Intermediate nodes (not just roots)
    get gradients, which is what the attention attribution relies on.
    """
    seed = _as_f64(seed)
    out = backward_batch(graph, seed_node, seed[None])
    return {nid: g[0] for nid, g in out.items()}


def finite_diff(graph: Graph, node: int, seed_node: int, seed, h: float = 1e-5) -> np.ndarray:
    """Central-difference oracle for ``backward`` at one node.

    Perturbs each entry of ``node``'s stored value by +/- h, replays the
    downstream subgraph and differences <seed, seed_node>. Test-only: it
    is O(node size) replays.
    """
    if h <= 0:
        raise ValueError(f"finite_diff: h must be positive, got {h}")
    seed = _as_f64(seed)
    _check_seed(graph, seed_node, seed[None])
    base = graph.nodes[node].value
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        probes = []
        for s in (h, -h):
            v = base.copy()
            v.reshape(-1)[i] += s
            vals = graph.replay({node: v})
            probes.append(float((seed * vals[seed_node]).sum()))
        flat[i] = (probes[0] - probes[1]) / (2.0 * h)
    return grad
