"""Importance scores for latent elements from cross-attention gradients.

For a recorded attention layer, the full Jacobian of the predicted noise
with respect to the post-softmax weights is assembled from one reverse
pass per output element (256 one-hot seeds, swept in a single batched
backward). Per-subject scores pair the subject's attention-weight slice
with the absolute Jacobian; the sign is dropped because attention can
push latent values in either direction.

Two pairing modes are provided, since the weight slice (H, P^2) and the
gradient block (C*X*Y, H*P^2) do not share a shape:

- "full" (default): S(c,x,y) = sum_{h,p} W(h,p,s) * |J[(c,x,y),(h,p,s)]|
- "diagonal":       S(c,x,y) = sum_h W(h,phi(x,y),s) * |J[(c,x,y),(h,phi(x,y),s)]|
  where phi nearest-maps latent coordinates onto the layer's P x P grid.

Scores land in latent space (4, 8, 8) for every layer in either mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, backward_batch
from .nn import AttentionRecord


@dataclass
class JacobianBlock:
    """d eps_hat / d attention-weights for one layer, flattened to a matrix."""

    layer_id: int
    out_shape: tuple            # (C, X, Y) of the prediction
    in_shape: tuple             # (H, P*P, N) of the weight tensor
    values: np.ndarray          # (C*X*Y, H*P*P*N)


@dataclass
class ScoreField:
    """Nonnegative per-latent-element relevance of one subject token."""

    subject: int
    values: np.ndarray          # (4, 8, 8)


def _check_record(graph: Graph, record: AttentionRecord):
    if not 0 <= record.weight_node < len(graph.nodes):
        raise KeyError(f"attention record is detached: node {record.weight_node} "
                       f"not in graph of {len(graph.nodes)} nodes")
    shape = graph.shape(record.weight_node)
    want = (1, record.heads, record.grid ** 2, record.tokens)
    if shape != want:
        raise ValueError(f"attention record node shape {shape} != {want}")


def attention_jacobians(graph: Graph, eps_hat_node: int, records) -> list:
    """Jacobian blocks for several records from one batched reverse sweep."""
    for rec in records:
        _check_record(graph, rec)
    out_shape = graph.shape(eps_hat_node)[1:]
    k = int(np.prod(out_shape))
    seeds = np.eye(k).reshape((k, 1) + out_shape)
    grads = backward_batch(graph, eps_hat_node, seeds,
                           targets=[rec.weight_node for rec in records])
    blocks = []
    for rec in records:
        g = grads[rec.weight_node]          # (K, 1, H, P^2, N)
        blocks.append(JacobianBlock(
            layer_id=rec.layer_id,
            out_shape=out_shape,
            in_shape=(rec.heads, rec.grid ** 2, rec.tokens),
            values=g.reshape(k, -1),
        ))
    return blocks


def attention_jacobian(graph: Graph, eps_hat_node: int, record: AttentionRecord) -> JacobianBlock:
    """Full Jacobian of the prediction w.r.t. one layer's attention weights."""
    return attention_jacobians(graph, eps_hat_node, [record])[0]


def importance_scores(record: AttentionRecord, jacobian: JacobianBlock,
                      subject: int, mode: str = "full") -> ScoreField:
    """Pair a subject's attention weights with its absolute gradients."""
    if not 0 <= subject < record.tokens:
        raise ValueError(f"subject index {subject} outside [0, {record.tokens})")
    if mode not in ("full", "diagonal"):
        raise ValueError(f"unknown attribution mode {mode!r}")
    h, p2, n = jacobian.in_shape
    c, x, y = jacobian.out_shape
    js = np.abs(jacobian.values).reshape(c * x * y, h, p2, n)[..., subject]
    ws = record.weights[:, :, subject]                      # (H, P^2)
    if mode == "full":
        vals = js.reshape(-1, h * p2) @ ws.reshape(-1)
        return ScoreField(subject=subject, values=vals.reshape(c, x, y))
    p = record.grid
    rows, cols = np.mgrid[0:x, 0:y]
    phi = (rows * p // x) * p + (cols * p // y)             # (X, Y) -> grid cell
    picked = js.reshape(c, x, y, h, p2)
    vals = np.zeros((c, x, y))
    for head in range(h):
        jsel = np.take_along_axis(picked[:, :, :, head, :],
                                  phi[None, :, :, None], axis=-1)[..., 0]
        vals += ws[head][phi] * jsel
    return ScoreField(subject=subject, values=vals)


def subject_token_indices(vocab, prompt_words, subject_words) -> list:
    """Positions of subject words in the padded prompt (first occurrence)."""
    prompt_words = list(prompt_words)
    out = []
    for word in subject_words:
        if word not in vocab:
            raise ValueError(f"subject word {word!r} is not in the vocabulary")
        if word not in prompt_words:
            raise ValueError(f"subject word {word!r} does not appear in the prompt")
        out.append(prompt_words.index(word))
    return out
