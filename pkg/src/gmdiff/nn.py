"""Toy latent-diffusion networks built on the autodiff tape.

Fixed desk-scale architecture: 3x32x32 images, 4x8x8 latents, a conv
autoencoder (two stride-2 stages, 1x1 projection), a 24-word embedding
table standing in for a text encoder, and a conditional UNet with two
resolution levels (8x8 and 4x4), two residual blocks per level and
exactly one cross-attention block per level (2 heads). The post-softmax
cross-attention weights are first-class graph nodes so the attribution
pass can differentiate the predicted noise with respect to them.

Every parameter lives in a flat name -> float64 array map whose names and
shapes are pinned by the manifests below; total generator size is
asserted under 500k parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph
from .rng import stream

IMAGE_SHAPE = (3, 32, 32)
LATENT_SHAPE = (4, 8, 8)
N_TOKENS = 8
D_TXT = 16
V = 24
HEADS = 2
BASE_WIDTH = 32
TIME_DIM = 32
GN_GROUPS = 4
PARAM_BUDGET = 500_000

PAD_WORD = "<pad>"

# grammar words plus reserved extras; V is fixed at 24
DEFAULT_WORDS = (
    PAD_WORD, "a", "in",
    "red", "yellow", "white",
    "circle", "square", "triangle",
    "forest", "ocean", "arid", "mountain", "downtown",
    "the", "on", "near", "by", "under", "over",
    "bright", "dark", "small", "large",
)


class Vocabulary:
    """Fixed word <-> id table; id 0 is the padding token."""

    _default = None

    def __init__(self, words=DEFAULT_WORDS):
        words = tuple(words)
        if len(words) != len(set(words)):
            raise ValueError("vocabulary words must be unique")
        if len(words) > 32:
            raise ValueError(f"vocabulary capped at 32 words, got {len(words)}")
        if words[0] != PAD_WORD:
            raise ValueError("vocabulary id 0 must be the padding token")
        self.words = words
        self.ids = {w: i for i, w in enumerate(words)}

    @classmethod
    def default(cls) -> "Vocabulary":
        if cls._default is None:
            cls._default = cls()
        return cls._default

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self.ids

    def encode_prompt(self, prompt: str, length: int = N_TOKENS) -> np.ndarray:
        """Whitespace-tokenize and pad with id 0 to the fixed length."""
        words = prompt.split()
        if len(words) > length:
            raise ValueError(f"prompt has {len(words)} words, limit is {length}")
        ids = np.zeros(length, dtype=np.int64)
        for i, w in enumerate(words):
            if w not in self.ids:
                raise ValueError(f"unknown token {w!r}")
            ids[i] = self.ids[w]
        return ids

    def decode(self, ids) -> list:
        return [self.words[int(i)] for i in ids if int(i) != 0]


@dataclass
class AttentionRecord:
    """One cross-attention layer's post-softmax weights at a forward pass."""

    layer_id: int
    heads: int
    grid: int                   # P: spatial side of this level
    tokens: int                 # N
    weights: np.ndarray         # (H, P*P, N)
    weight_node: int            # graph node holding (1, H, P*P, N)


@dataclass
class UnetOutput:
    eps_hat: np.ndarray         # (4, 8, 8)
    records: list
    eps_node: int               # graph node holding (1, 4, 8, 8)


# ---------------------------------------------------------------------------
# parameter manifests


def _conv(name, cout, cin, k, out):
    out[f"{name}.w"] = (cout, cin, k, k)
    out[f"{name}.b"] = (cout,)


def _linear(name, din, dout, out):
    out[f"{name}.w"] = (din, dout)
    out[f"{name}.b"] = (dout,)


def _norm(name, c, out):
    out[f"{name}.gamma"] = (c,)
    out[f"{name}.beta"] = (c,)


def _resblock(name, c, out):
    _norm(f"{name}.gn1", c, out)
    _conv(f"{name}.conv1", c, c, 3, out)
    _linear(f"{name}.temb", TIME_DIM, c, out)
    _norm(f"{name}.gn2", c, out)
    _conv(f"{name}.conv2", c, c, 3, out)


def _attnblock(name, c, out):
    _norm(f"{name}.gn", c, out)
    _linear(f"{name}.q", c, c, out)
    _linear(f"{name}.k", D_TXT, c, out)
    _linear(f"{name}.v", D_TXT, c, out)
    _linear(f"{name}.out", c, c, out)


def autoencoder_manifest() -> dict:
    m: dict = {}
    _conv("ae.enc.conv1", 16, 3, 3, m)
    _conv("ae.enc.conv2", BASE_WIDTH, 16, 3, m)
    _conv("ae.enc.proj", 4, BASE_WIDTH, 1, m)
    _conv("ae.dec.proj", BASE_WIDTH, 4, 1, m)
    _conv("ae.dec.conv1", 16, BASE_WIDTH, 3, m)
    _conv("ae.dec.conv2", 3, 16, 3, m)
    return m


def denoiser_manifest() -> dict:
    m: dict = {}
    m["text.embed"] = (V, D_TXT)
    _linear("unet.time.fc1", TIME_DIM, TIME_DIM, m)
    _linear("unet.time.fc2", TIME_DIM, TIME_DIM, m)
    _conv("unet.conv_in", BASE_WIDTH, 4, 3, m)
    _resblock("unet.down1.res1", BASE_WIDTH, m)
    _resblock("unet.down1.res2", BASE_WIDTH, m)
    _attnblock("unet.down1.attn", BASE_WIDTH, m)
    _conv("unet.down", 2 * BASE_WIDTH, BASE_WIDTH, 3, m)
    _resblock("unet.down2.res1", 2 * BASE_WIDTH, m)
    _resblock("unet.down2.res2", 2 * BASE_WIDTH, m)
    _attnblock("unet.down2.attn", 2 * BASE_WIDTH, m)
    _conv("unet.up", BASE_WIDTH, 2 * BASE_WIDTH, 3, m)
    _conv("unet.fuse", BASE_WIDTH, 2 * BASE_WIDTH, 3, m)
    _norm("unet.out.gn", BASE_WIDTH, m)
    _conv("unet.out.conv", 4, BASE_WIDTH, 3, m)
    return m


def generator_manifest() -> dict:
    """Name -> shape map for the whole generative stack (AE + text + UNet)."""
    m = autoencoder_manifest()
    m.update(denoiser_manifest())
    return m


def classifier_manifest() -> dict:
    m: dict = {}
    _conv("cls.conv1", 16, 3, 3, m)
    _conv("cls.conv2", 32, 16, 3, m)
    _conv("cls.conv3", 32, 32, 3, m)
    _linear("cls.head", 32, 5, m)
    return m


def dual_encoder_manifest() -> dict:
    m: dict = {}
    _conv("dual.img.conv1", 16, 3, 3, m)
    _conv("dual.img.conv2", 32, 16, 3, m)
    _conv("dual.img.conv3", 32, 32, 3, m)
    _linear("dual.img.proj", 32, 32, m)
    m["dual.txt.embed"] = (V, D_TXT)
    _linear("dual.txt.proj", D_TXT, 32, m)
    return m


def param_count(manifest: dict) -> int:
    return int(sum(np.prod(s) for s in manifest.values()))


def init_params(manifest: dict, seed: int) -> dict:
    """Initialize parameters: Kaiming-uniform weights (bound sqrt(6/fan_in)),
    zero biases, unit norm scales, N(0, 0.02) embeddings. Each tensor has
    its own named stream, so adding parameters never reshuffles others."""
    params = {}
    for name, shape in manifest.items():
        rng = stream(seed, f"init/{name}")
        if name.endswith(".gamma"):
            params[name] = np.ones(shape)
        elif name.endswith((".b", ".beta")):
            params[name] = np.zeros(shape)
        elif name.endswith("embed"):
            params[name] = rng.normal(0.0, 0.02, shape)
        elif name.endswith(".w"):
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else int(shape[0])
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, shape)
        else:
            raise ValueError(f"no initialization rule for {name}")
    return params


def check_params(params: dict, manifest: dict):
    """Reject parameter maps that do not match the manifest exactly."""
    missing = sorted(set(manifest) - set(params))
    extra = sorted(set(params) - set(manifest))
    if missing or extra:
        raise ValueError(f"parameter names mismatch: missing {missing}, extra {extra}")
    for name, shape in manifest.items():
        if tuple(params[name].shape) != tuple(shape):
            raise ValueError(f"shape mismatch for {name}: {params[name].shape} != {shape}")


def bind_params(g: Graph, params: dict) -> dict:
    """Insert every parameter as a graph input; returns name -> node id."""
    return {name: g.input(arr) for name, arr in params.items()}


# ---------------------------------------------------------------------------
# graph-building blocks (batched: all activations are (B, C, H, W))


def _conv_op(g, pn, x, name, stride=1, pad=1, pad_mode="zeros"):
    return g.op("conv2d", x, pn[f"{name}.w"], pn[f"{name}.b"],
                stride=stride, pad=pad, pad_mode=pad_mode)


def _gn_op(g, pn, x, name, channels):
    groups = GN_GROUPS if channels % GN_GROUPS == 0 else 1
    return g.op("group_norm", x, pn[f"{name}.gamma"], pn[f"{name}.beta"],
                groups=groups, eps=1e-5)


def sinusoidal_embedding(ts, dim: int = TIME_DIM) -> np.ndarray:
    """Classic sin/cos position features of shape (len(ts), dim)."""
    ts = np.atleast_1d(np.asarray(ts, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = ts[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def encoder_apply(g, pn, x):
    h = g.op("silu", _conv_op(g, pn, x, "ae.enc.conv1", stride=2))
    h = g.op("silu", _conv_op(g, pn, h, "ae.enc.conv2", stride=2))
    return _conv_op(g, pn, h, "ae.enc.proj", pad=0)


def decoder_apply(g, pn, z):
    # replicate padding keeps constant latents decoding to constant images
    h = g.op("silu", _conv_op(g, pn, z, "ae.dec.proj", pad=0))
    h = g.op("upsample_nearest2x", h)
    h = g.op("silu", _conv_op(g, pn, h, "ae.dec.conv1", pad_mode="replicate"))
    h = g.op("upsample_nearest2x", h)
    return _conv_op(g, pn, h, "ae.dec.conv2", pad_mode="replicate")


def text_apply(g, pn, ids, table="text.embed"):
    ids = np.asarray(ids, dtype=np.int64)
    return g.op("embed_lookup", pn[table], ids=ids)


def _resblock_apply(g, pn, x, temb, name, channels, hw):
    h = g.op("silu", _gn_op(g, pn, x, f"{name}.gn1", channels))
    h = _conv_op(g, pn, h, f"{name}.conv1")
    tp = g.op("linear", g.op("silu", temb), pn[f"{name}.temb.w"], pn[f"{name}.temb.b"])
    h = g.op("add", h, g.op("tile_hw", tp, h=hw, w=hw))
    h = g.op("silu", _gn_op(g, pn, h, f"{name}.gn2", channels))
    h = _conv_op(g, pn, h, f"{name}.conv2")
    return g.op("add", x, h)


def _attention_apply(g, pn, x, text, name, layer_id, channels, grid):
    b = g.shape(x)[0]
    p2 = grid * grid
    dh = channels // HEADS
    hn = _gn_op(g, pn, x, f"{name}.gn", channels)
    flat = g.op("permute", g.op("reshape", hn, shape=(b, channels, p2)), axes=(0, 2, 1))
    q = g.op("linear", flat, pn[f"{name}.q.w"], pn[f"{name}.q.b"])
    k = g.op("linear", text, pn[f"{name}.k.w"], pn[f"{name}.k.b"])
    v = g.op("linear", text, pn[f"{name}.v.w"], pn[f"{name}.v.b"])
    q = g.op("permute", g.op("reshape", q, shape=(b, p2, HEADS, dh)), axes=(0, 2, 1, 3))
    kt = g.op("permute", g.op("reshape", k, shape=(b, N_TOKENS, HEADS, dh)), axes=(0, 2, 3, 1))
    v = g.op("permute", g.op("reshape", v, shape=(b, N_TOKENS, HEADS, dh)), axes=(0, 2, 1, 3))
    scores = g.op("scale", g.op("matmul", q, kt), factor=1.0 / np.sqrt(dh))
    w = g.op("softmax", scores, axis=-1)        # (B, H, P^2, N) weight node
    o = g.op("matmul", w, v)
    o = g.op("reshape", g.op("permute", o, axes=(0, 2, 1, 3)), shape=(b, p2, channels))
    o = g.op("linear", o, pn[f"{name}.out.w"], pn[f"{name}.out.b"])
    o = g.op("reshape", g.op("permute", o, axes=(0, 2, 1)), shape=(b, channels, grid, grid))
    out = g.op("add", x, o)
    record = AttentionRecord(layer_id=layer_id, heads=HEADS, grid=grid,
                             tokens=N_TOKENS, weights=g.value(w), weight_node=w)
    return out, record


def unet_apply(g, pn, z, ts, text):
    """Batched UNet forward; returns (eps node, attention records)."""
    b = g.shape(z)[0]
    temb = g.input(sinusoidal_embedding(ts))
    temb = g.op("linear", g.op("silu", g.op(
        "linear", temb, pn["unet.time.fc1.w"], pn["unet.time.fc1.b"])),
        pn["unet.time.fc2.w"], pn["unet.time.fc2.b"])
    h = _conv_op(g, pn, z, "unet.conv_in")
    h = _resblock_apply(g, pn, h, temb, "unet.down1.res1", BASE_WIDTH, 8)
    h = _resblock_apply(g, pn, h, temb, "unet.down1.res2", BASE_WIDTH, 8)
    h, rec0 = _attention_apply(g, pn, h, text, "unet.down1.attn", 0, BASE_WIDTH, 8)
    skip = h
    h = _conv_op(g, pn, h, "unet.down", stride=2)
    h = _resblock_apply(g, pn, h, temb, "unet.down2.res1", 2 * BASE_WIDTH, 4)
    h = _resblock_apply(g, pn, h, temb, "unet.down2.res2", 2 * BASE_WIDTH, 4)
    h, rec1 = _attention_apply(g, pn, h, text, "unet.down2.attn", 1, 2 * BASE_WIDTH, 4)
    h = _conv_op(g, pn, g.op("upsample_nearest2x", h), "unet.up")
    h = g.op("silu", _conv_op(g, pn, g.op("concat", h, skip, axis=1), "unet.fuse"))
    h = g.op("silu", _gn_op(g, pn, h, "unet.out.gn", BASE_WIDTH))
    eps = _conv_op(g, pn, h, "unet.out.conv")
    return eps, [rec0, rec1]


def classifier_apply(g, pn, x):
    h = g.op("silu", _conv_op(g, pn, x, "cls.conv1", stride=2))
    h = g.op("silu", _conv_op(g, pn, h, "cls.conv2", stride=2))
    h = g.op("silu", _conv_op(g, pn, h, "cls.conv3", stride=2))
    feat = g.op("mean", h, axis=(2, 3))
    logits = g.op("linear", feat, pn["cls.head.w"], pn["cls.head.b"])
    return feat, logits


def dual_image_apply(g, pn, x):
    h = g.op("silu", _conv_op(g, pn, x, "dual.img.conv1", stride=2))
    h = g.op("silu", _conv_op(g, pn, h, "dual.img.conv2", stride=2))
    h = g.op("silu", _conv_op(g, pn, h, "dual.img.conv3", stride=2))
    pooled = g.op("mean", h, axis=(2, 3))
    return g.op("linear", pooled, pn["dual.img.proj.w"], pn["dual.img.proj.b"])


def dual_text_apply(g, pn, ids):
    emb = text_apply(g, pn, ids, table="dual.txt.embed")
    pooled = g.op("mean", emb, axis=1)
    return g.op("linear", pooled, pn["dual.txt.proj.w"], pn["dual.txt.proj.b"])


# ---------------------------------------------------------------------------
# public single-sample API


def _check_shape(arr, want, what):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != want:
        raise ValueError(f"{what}: expected shape {want}, got {arr.shape}")
    return arr


def encode(params: dict, image) -> np.ndarray:
    """Image (3,32,32) in [0,1] -> deterministic latent (4,8,8)."""
    image = _check_shape(image, IMAGE_SHAPE, "encode")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("encode: image values must lie in [0, 1]")
    g = Graph()
    pn = bind_params(g, {k: v for k, v in params.items() if k.startswith("ae.enc")})
    z = encoder_apply(g, pn, g.input(image[None]))
    return g.value(z)[0]


def decode(params: dict, latent) -> np.ndarray:
    """Latent (4,8,8) -> image (3,32,32), clamped to [0,1]."""
    latent = _check_shape(latent, LATENT_SHAPE, "decode")
    if not np.all(np.isfinite(latent)):
        raise ValueError("decode: latent has non-finite entries")
    g = Graph()
    pn = bind_params(g, {k: v for k, v in params.items() if k.startswith("ae.dec")})
    x = decoder_apply(g, pn, g.input(latent[None]))
    return np.clip(g.value(x)[0], 0.0, 1.0)


def embed_tokens(params: dict, ids) -> np.ndarray:
    """Token ids (8,) -> embedding rows (8, 16)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != (N_TOKENS,):
        raise ValueError(f"embed_tokens: expected {N_TOKENS} ids, got shape {ids.shape}")
    if ids.min() < 0 or ids.max() >= V:
        raise ValueError(f"embed_tokens: id out of range [0, {V})")
    return params["text.embed"][ids]


def unet_forward(graph: Graph, params: dict, z_t, t: int, text) -> UnetOutput:
    """Single-latent conditional noise prediction on an external graph.

    The returned records point at live graph nodes, so a backward pass
    seeded at ``eps_node`` yields gradients at the attention weights.
    """
    z_t = _check_shape(z_t, LATENT_SHAPE, "unet_forward latent")
    text = _check_shape(text, (N_TOKENS, D_TXT), "unet_forward text")
    if not np.all(np.isfinite(text)) or not np.all(np.isfinite(z_t)):
        raise ValueError("unet_forward: non-finite inputs")
    t = int(t)
    if t < 0:
        raise ValueError(f"unet_forward: negative timestep {t}")
    pn = bind_params(graph, {k: v for k, v in params.items() if k.startswith("unet.")})
    eps_node, records = unet_apply(graph, pn, graph.input(z_t[None]), np.array([t]),
                                   graph.input(text[None]))
    for rec in records:
        rec.weights = rec.weights[0].copy()
    return UnetOutput(eps_hat=graph.value(eps_node)[0], records=records, eps_node=eps_node)
