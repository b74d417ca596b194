"""Training loops (Adam on the autodiff tape) and binary checkpoints.

Three trainables: the reconstruction autoencoder, the conditional noise
predictor, and the two evaluation models (category classifier, image/text
dual encoder). All loops are bit-reproducible given (seed, config,
dataset bytes): batch order and every noise draw come from named streams.
The last ``HOLDOUT`` manifest rows are never trained on; quality gates
are measured there.

Checkpoints are a self-describing little-endian binary format (magic
"GMDF1"):

    magic           5 bytes  b"GMDF1"
    kind            u8 length + utf-8 (autoencoder | denoiser | classifier | dual)
    manifest hash   32 bytes, sha256 over "name\\td0,d1,...\\n" lines in manifest order
    schedule        u32 T, f64 beta_start, f64 beta_end
    vocabulary      u16 count, then per word u16 length + utf-8
    tensors         u32 count, then per tensor u16 name length + name,
                    u8 rank, u32 dims..., float64 little-endian values

Loading verifies the magic, the manifest hash and every tensor shape, and
fails loudly on truncation; save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffusion, nn
from .autodiff import Graph, backward
from .datasynth import BACKGROUNDS, read_manifest
from .pngio import png_read
from .rng import stream

MAGIC = b"GMDF1"
HOLDOUT = 200

KIND_MANIFESTS = {
    "autoencoder": nn.autoencoder_manifest,
    "denoiser": nn.denoiser_manifest,
    "classifier": nn.classifier_manifest,
    "dual": nn.dual_encoder_manifest,
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs/batch_size must be >= 1 and lr >= 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.eps > 0):
            raise ValueError("Adam parameters out of range")


DENOISER_DEFAULTS = TrainConfig(epochs=60, lr=1e-3)


class Adam:
    """Textbook Adam (bias-corrected first/second moments)."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name in params:
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(params[name])
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            mhat = self.m[name] / b1c
            vhat = self.v[name] / b2c
            params[name] = params[name] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# checkpoint format


@dataclass
class Checkpoint:
    kind: str
    params: dict
    schedule: diffusion.NoiseSchedule
    schedule_args: tuple          # (T, beta_start, beta_end)
    words: tuple


def manifest_hash(manifest: dict) -> bytes:
    text = "".join(f"{k}\t{','.join(str(d) for d in v)}\n" for k, v in manifest.items())
    return hashlib.sha256(text.encode()).digest()


def save_checkpoint(path, kind: str, params: dict,
                    schedule_args=(diffusion.DEFAULT_T, diffusion.DEFAULT_BETA_START,
                                   diffusion.DEFAULT_BETA_END),
                    words=nn.DEFAULT_WORDS) -> None:
    if kind not in KIND_MANIFESTS:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    manifest = KIND_MANIFESTS[kind]()
    nn.check_params(params, manifest)
    out = [MAGIC]
    kb = kind.encode()
    out.append(struct.pack("<B", len(kb)))
    out.append(kb)
    out.append(manifest_hash(manifest))
    t, bs, be = schedule_args
    out.append(struct.pack("<Idd", int(t), float(bs), float(be)))
    out.append(struct.pack("<H", len(words)))
    for w in words:
        wb = w.encode()
        out.append(struct.pack("<H", len(wb)))
        out.append(wb)
    out.append(struct.pack("<I", len(manifest)))
    for name in manifest:
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    Path(path).write_bytes(b"".join(out))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError(f"{self.path}: truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expect_kind: str | None = None) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(len(MAGIC)) != MAGIC:
        raise ValueError(f"{path}: bad magic (not a GMDF1 checkpoint)")
    (klen,) = r.unpack("<B")
    kind = r.take(klen).decode()
    if kind not in KIND_MANIFESTS:
        raise ValueError(f"{path}: unknown checkpoint kind {kind!r}")
    if expect_kind is not None and kind != expect_kind:
        raise ValueError(f"{path}: checkpoint kind {kind!r}, expected {expect_kind!r}")
    manifest = KIND_MANIFESTS[kind]()
    stored_hash = r.take(32)
    if stored_hash != manifest_hash(manifest):
        raise ValueError(f"{path}: architecture manifest mismatch")
    t, bs, be = r.unpack("<Idd")
    (wcount,) = r.unpack("<H")
    words = tuple(r.take(r.unpack("<H")[0]).decode() for _ in range(wcount))
    (tcount,) = r.unpack("<I")
    params = {}
    for _ in range(tcount):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        if name not in manifest:
            raise ValueError(f"{path}: unexpected tensor {name!r}")
        if tuple(dims) != tuple(manifest[name]):
            raise ValueError(f"{path}: shape mismatch for {name}: "
                             f"{tuple(dims)} != {tuple(manifest[name])}")
        count = int(np.prod(dims))
        arr = np.frombuffer(r.take(count * 8), dtype="<f8").reshape(dims)
        params[name] = arr.astype(np.float64)
    if set(params) != set(manifest):
        raise ValueError(f"{path}: missing tensors {sorted(set(manifest) - set(params))}")
    if r.pos != len(r.data):
        raise ValueError(f"{path}: trailing bytes after checkpoint payload")
    return Checkpoint(kind=kind, params=params,
                      schedule=diffusion.linear_schedule(t, bs, be),
                      schedule_args=(t, bs, be), words=words)


# ---------------------------------------------------------------------------
# dataset loading


@dataclass
class Dataset:
    images: np.ndarray            # (N, 3, 32, 32)
    tokens: np.ndarray            # (N, 8)
    labels: np.ndarray            # (N,) category index
    categories: list
    names: list


def load_dataset(dataset_dir) -> Dataset:
    rows = read_manifest(dataset_dir)
    if not rows:
        raise ValueError(f"dataset {dataset_dir} is empty")
    vocab = nn.Vocabulary.default()
    images, tokens, labels, names = [], [], [], []
    for fname, caption, category in rows:
        images.append(png_read(Path(dataset_dir) / fname))
        tokens.append(vocab.encode_prompt(caption))
        labels.append(BACKGROUNDS.index(category))
        names.append(fname)
    return Dataset(images=np.stack(images), tokens=np.stack(tokens),
                   labels=np.asarray(labels), categories=list(BACKGROUNDS),
                   names=names)


def _split_holdout(ds: Dataset):
    n = len(ds.names)
    cut = n - HOLDOUT
    return (Dataset(ds.images[:cut], ds.tokens[:cut], ds.labels[:cut], ds.categories,
                    ds.names[:cut]),
            Dataset(ds.images[cut:], ds.tokens[cut:], ds.labels[cut:], ds.categories,
                    ds.names[cut:]))


def _batches(n: int, batch_size: int, rng) -> list:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class TrainResult:
    params: dict
    log: list                      # "epoch\tloss" lines
    metrics: dict


# ---------------------------------------------------------------------------
# autoencoder


def _ae_loss_graph(params: dict, batch: np.ndarray):
    g = Graph()
    pn = nn.bind_params(g, params)
    x = g.input(batch)
    z = nn.encoder_apply(g, pn, x)
    recon = nn.decoder_apply(g, pn, z)
    diff = g.op("sub", recon, x)
    loss = g.op("mean", g.op("mul", diff, diff), axis=None)
    return g, pn, loss


def train_autoencoder(dataset_dir, config: TrainConfig = TrainConfig()) -> TrainResult:
    """Minimize mean-squared reconstruction error; returns trained params."""
    ds = load_dataset(dataset_dir)
    if len(ds.names) < 500:
        raise ValueError(f"autoencoder training needs >= 500 images, got {len(ds.names)}")
    train, held = _split_holdout(ds)
    params = nn.init_params(nn.autoencoder_manifest(), config.seed)
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.eps)
    perm_rng = stream(config.seed, "train/ae/perm")
    log = []
    for epoch in range(config.epochs):
        losses = []
        for idx in _batches(len(train.names), config.batch_size, perm_rng):
            g, pn, loss = _ae_loss_graph(params, train.images[idx])
            grads = backward(g, loss, np.asarray(1.0))
            opt.step(params, {k: grads.get(nid) for k, nid in pn.items()})
            losses.append(float(g.value(loss)))
        log.append(f"{epoch}\t{np.mean(losses):.8f}")
    mae = held_out_mae(params, held.images)
    return TrainResult(params=params, log=log, metrics={"holdout_mae": mae})


def held_out_mae(ae_params: dict, images: np.ndarray, chunk: int = 64) -> float:
    """Mean absolute reconstruction error over a held-out image set."""
    errs = []
    for i in range(0, len(images), chunk):
        batch = images[i:i + chunk]
        g = Graph()
        pn = nn.bind_params(g, ae_params)
        recon = nn.decoder_apply(g, pn, nn.encoder_apply(g, pn, g.input(batch)))
        errs.append(np.abs(np.clip(g.value(recon), 0, 1) - batch).mean(axis=(1, 2, 3)))
    return float(np.concatenate(errs).mean())


def encode_batch(ae_params: dict, images: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Latents for a stack of images (inference only)."""
    outs = []
    for i in range(0, len(images), chunk):
        g = Graph()
        pn = nn.bind_params(g, {k: v for k, v in ae_params.items() if k.startswith("ae.enc")})
        outs.append(g.value(nn.encoder_apply(g, pn, g.input(images[i:i + chunk]))))
    return np.concatenate(outs)


# ---------------------------------------------------------------------------
# denoiser


def train_denoiser(dataset_dir, ae_params: dict,
                   config: TrainConfig = DENOISER_DEFAULTS,
                   schedule_args=(diffusion.DEFAULT_T, diffusion.DEFAULT_BETA_START,
                                  diffusion.DEFAULT_BETA_END)) -> TrainResult:
    """Noise-prediction MSE on autoencoder latents, conditioned on captions."""
    nn.check_params(ae_params, nn.autoencoder_manifest())
    ds = load_dataset(dataset_dir)
    train, _ = _split_holdout(ds)
    schedule = diffusion.linear_schedule(*schedule_args)
    latents = encode_batch(ae_params, train.images)
    params = nn.init_params(nn.denoiser_manifest(), config.seed)
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.eps)
    perm_rng = stream(config.seed, "train/denoiser/perm")
    t_rng = stream(config.seed, "train/denoiser/t")
    eps_rng = stream(config.seed, "train/denoiser/eps")
    log = []
    for epoch in range(config.epochs):
        losses = []
        for idx in _batches(len(train.names), config.batch_size, perm_rng):
            z0 = latents[idx]
            ts = t_rng.integers(0, schedule.T, size=len(idx))
            eps = eps_rng.normal(size=z0.shape)
            ab = schedule.alpha_bar[ts][:, None, None, None]
            z_t = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
            g = Graph()
            pn = nn.bind_params(g, params)
            text = nn.text_apply(g, pn, train.tokens[idx])
            eps_node, _ = nn.unet_apply(g, pn, g.input(z_t), ts, text)
            diff = g.op("sub", eps_node, g.input(eps))
            loss = g.op("mean", g.op("mul", diff, diff), axis=None)
            grads = backward(g, loss, np.asarray(1.0))
            opt.step(params, {k: grads.get(nid) for k, nid in pn.items()})
            losses.append(float(g.value(loss)))
        log.append(f"{epoch}\t{np.mean(losses):.8f}")
    return TrainResult(params=params, log=log, metrics={})


# ---------------------------------------------------------------------------
# evaluation models


def _onehot(labels: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def classifier_features(cls_params: dict, images: np.ndarray, chunk: int = 64):
    """Penultimate 32-d features and logits for a stack of images."""
    feats, logits = [], []
    for i in range(0, len(images), chunk):
        g = Graph()
        pn = nn.bind_params(g, cls_params)
        f, lo = nn.classifier_apply(g, pn, g.input(images[i:i + chunk]))
        feats.append(g.value(f))
        logits.append(g.value(lo))
    return np.concatenate(feats), np.concatenate(logits)


def dual_embeddings(dual_params: dict, images=None, tokens=None, chunk: int = 64):
    """L2-normalized image and/or caption embeddings."""
    img_emb = txt_emb = None
    if images is not None:
        outs = []
        for i in range(0, len(images), chunk):
            g = Graph()
            pn = nn.bind_params(g, dual_params)
            e = nn.dual_image_apply(g, pn, g.input(images[i:i + chunk]))
            outs.append(g.value(g.op("l2norm_rows", e)))
        img_emb = np.concatenate(outs)
    if tokens is not None:
        g = Graph()
        pn = nn.bind_params(g, dual_params)
        e = nn.dual_text_apply(g, pn, np.asarray(tokens))
        txt_emb = g.value(g.op("l2norm_rows", e))
    return img_emb, txt_emb


CONTRASTIVE_TEMPERATURE = 0.1


def train_eval_models(dataset_dir, config: TrainConfig = TrainConfig()):
    """Train the category classifier and the image/caption dual encoder.

    Returns (classifier TrainResult, dual encoder TrainResult) with
    held-out accuracy and matched-vs-mismatched ranking rate in metrics.
    """
    ds = load_dataset(dataset_dir)
    if len(set(ds.labels.tolist())) < 2:
        raise ValueError("eval-model training needs at least 2 categories")
    train, held = _split_holdout(ds)

    cls_params = nn.init_params(nn.classifier_manifest(), config.seed)
    opt = Adam(cls_params, config.lr, config.beta1, config.beta2, config.eps)
    perm_rng = stream(config.seed, "train/cls/perm")
    cls_log = []
    n_cat = len(BACKGROUNDS)
    for epoch in range(config.epochs):
        losses = []
        for idx in _batches(len(train.names), config.batch_size, perm_rng):
            g = Graph()
            pn = nn.bind_params(g, cls_params)
            _, logits = nn.classifier_apply(g, pn, g.input(train.images[idx]))
            loss = g.op("softmax_xent", logits, g.input(_onehot(train.labels[idx], n_cat)))
            grads = backward(g, loss, np.asarray(1.0))
            opt.step(cls_params, {k: grads.get(nid) for k, nid in pn.items()})
            losses.append(float(g.value(loss)))
        cls_log.append(f"{epoch}\t{np.mean(losses):.8f}")
    _, held_logits = classifier_features(cls_params, held.images)
    accuracy = float((held_logits.argmax(axis=1) == held.labels).mean())

    dual_params = nn.init_params(nn.dual_encoder_manifest(), config.seed)
    opt = Adam(dual_params, config.lr, config.beta1, config.beta2, config.eps)
    perm_rng = stream(config.seed, "train/dual/perm")
    dual_log = []
    for epoch in range(config.epochs):
        losses = []
        for idx in _batches(len(train.names), config.batch_size, perm_rng):
            b = len(idx)
            g = Graph()
            pn = nn.bind_params(g, dual_params)
            ie = g.op("l2norm_rows", nn.dual_image_apply(g, pn, g.input(train.images[idx])))
            te = g.op("l2norm_rows", nn.dual_text_apply(g, pn, train.tokens[idx]))
            logits = g.op("scale", g.op("matmul", ie, g.op("permute", te, axes=(1, 0))),
                          factor=1.0 / CONTRASTIVE_TEMPERATURE)
            eye = g.input(np.eye(b))
            li = g.op("softmax_xent", logits, eye)
            lt = g.op("softmax_xent", g.op("permute", logits, axes=(1, 0)), eye)
            loss = g.op("scale", g.op("add", li, lt), factor=0.5)
            grads = backward(g, loss, np.asarray(1.0))
            opt.step(dual_params, {k: grads.get(nid) for k, nid in pn.items()})
            losses.append(float(g.value(loss)))
        dual_log.append(f"{epoch}\t{np.mean(losses):.8f}")
    ranking = pairwise_ranking_rate(dual_params, held)

    return (TrainResult(cls_params, cls_log, {"holdout_accuracy": accuracy}),
            TrainResult(dual_params, dual_log, {"holdout_ranking": ranking}))


def pairwise_ranking_rate(dual_params: dict, held: Dataset) -> float:
    """Fraction of held-out pairs whose matching caption outranks a mismatch."""
    img, txt = dual_embeddings(dual_params, held.images, held.tokens)
    sims = img @ txt.T
    n = len(held.names)
    match = np.diag(sims)
    rng = stream(0, "eval/ranking")
    wins = 0
    total = 0
    for i in range(n):
        j = int(rng.integers(n - 1))
        j = j + 1 if j >= i else j
        # skip accidental identical captions
        if np.array_equal(held.tokens[i], held.tokens[j]):
            continue
        wins += int(match[i] > sims[i, j])
        total += 1
    return float(wins / max(total, 1))
