"""Frechet feature distance and caption alignment scoring.

The Frechet distance runs over 32-d classifier features instead of a big
pretrained feature space; the math is unchanged:

    d = |mu1 - mu2|^2 + tr(S1) + tr(S2) - 2 tr((S1 S2)^{1/2})

The matrix square-root trace is computed without forming sqrtm(S1 S2)
directly: A = sqrt(S1) by symmetric eigendecomposition, then the
eigenvalues of the symmetrized A S2 A are clamped at zero and their
square roots summed. Eigenvalues below -1e-6 relative to the largest are
an error (the inputs were not covariance-like); small negatives are
numerical noise from finite samples and get clamped.

Alignment is 100 * max(cosine, 0) between the dual encoder's image and
caption embeddings, matching the scale of typical image/text scores.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasynth import read_manifest
from .nn import Vocabulary
from .pngio import png_read
from .training import classifier_features, dual_embeddings

MIN_FULL_RANK_COUNT = 33
SHRINKAGE = 0.1
EIG_CLAMP_REL = 1e-6


@dataclass
class FeatureStats:
    count: int
    mean: np.ndarray              # (d,)
    cov: np.ndarray               # (d, d) symmetric PSD


def stats_from_features(features: np.ndarray) -> FeatureStats:
    """Sample mean and unbiased covariance, with small-sample shrinkage.

    Below MIN_FULL_RANK_COUNT samples the covariance cannot be full rank;
    a warning is issued and off-diagonal entries are shrunk by SHRINKAGE
    toward the diagonal (which keeps an all-identical sample at exactly
    zero covariance). A single sample yields the zero matrix.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) == 0:
        raise ValueError(f"need a nonempty (n, d) feature matrix, got {features.shape}")
    n, d = features.shape
    mean = features.mean(axis=0)
    if n == 1:
        cov = np.zeros((d, d))
    else:
        centered = features - mean
        cov = centered.T @ centered / (n - 1)
    if n < MIN_FULL_RANK_COUNT:
        warnings.warn(f"covariance from only {n} samples; applying off-diagonal "
                      f"shrinkage {SHRINKAGE}", stacklevel=2)
        if n > 1:
            cov = (1.0 - SHRINKAGE) * cov + SHRINKAGE * np.diag(np.diag(cov))
    cov = 0.5 * (cov + cov.T)
    return FeatureStats(count=n, mean=mean, cov=cov)


def feature_stats(images: np.ndarray, cls_params: dict) -> FeatureStats:
    """Gaussian fit of classifier penultimate features over an image stack."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError(f"need a nonempty (n, 3, 32, 32) image stack, got {images.shape}")
    feats, _ = classifier_features(cls_params, images)
    return stats_from_features(feats)


def _psd_sqrt(mat: np.ndarray, what: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    scale = max(float(vals.max()), 0.0)
    floor = -EIG_CLAMP_REL * max(scale, 1.0)
    if vals.min() < floor:
        raise ValueError(f"{what} is not PSD: eigenvalue {vals.min():.3e} "
                         f"below tolerance {floor:.3e}")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """Frechet distance between two feature Gaussians."""
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    sa = _psd_sqrt(a.cov, "first covariance")
    inner = sa @ b.cov @ sa
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    scale = max(float(vals.max()), 0.0)
    floor = -EIG_CLAMP_REL * max(scale, 1.0)
    if vals.min() < floor:
        raise ValueError(f"cross term is not PSD: eigenvalue {vals.min():.3e} "
                         f"below tolerance {floor:.3e}")
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = a.mean - b.mean
    d = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    return max(d, 0.0)


def alignment_from_embeddings(img_emb: np.ndarray, txt_emb: np.ndarray) -> float:
    """100 * max(cosine, 0) for a single embedding pair."""
    ni = np.linalg.norm(img_emb)
    nt = np.linalg.norm(txt_emb)
    if ni < 1e-12 or nt < 1e-12:
        raise ValueError("alignment: zero-norm embedding")
    return 100.0 * max(float(img_emb @ txt_emb) / (ni * nt), 0.0)


def alignment_score(image: np.ndarray, tokens, dual_params: dict) -> float:
    """100 * max(cosine(image embedding, caption embedding), 0)."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (3, 32, 32):
        raise ValueError(f"alignment_score: image shape {image.shape}")
    img, txt = dual_embeddings(dual_params, image[None], np.asarray(tokens)[None])
    return alignment_from_embeddings(img[0], txt[0])


@dataclass
class ScoreReport:
    per_category: dict           # category -> {"fid", "align", "gen_count", "real_count"}
    skipped: list = field(default_factory=list)

    def _values(self, key):
        return [self.per_category[c][key] for c in sorted(self.per_category)]

    @property
    def fid_mean(self):
        return float(np.mean(self._values("fid")))

    @property
    def fid_median(self):
        return float(np.median(self._values("fid")))

    @property
    def align_mean(self):
        return float(np.mean(self._values("align")))

    @property
    def align_median(self):
        return float(np.median(self._values("align")))

    def to_text(self) -> str:
        lines = []
        for cat in sorted(self.per_category):
            row = self.per_category[cat]
            lines.append(f"{cat}\tfid\t{row['fid']:.6f}")
            lines.append(f"{cat}\talign\t{row['align']:.6f}")
            lines.append(f"{cat}\tcounts\tgen={row['gen_count']} real={row['real_count']}")
        for cat in self.skipped:
            lines.append(f"{cat}\tskipped\tpresent on one side only")
        lines.append(f"overall\tfid_mean\t{self.fid_mean:.6f}")
        lines.append(f"overall\tfid_median\t{self.fid_median:.6f}")
        lines.append(f"overall\talign_mean\t{self.align_mean:.6f}")
        lines.append(f"overall\talign_median\t{self.align_median:.6f}")
        return "\n".join(lines) + "\n"


def _load_dir(directory):
    rows = read_manifest(directory)
    if not rows:
        raise ValueError(f"{directory}: empty manifest")
    vocab = Vocabulary.default()
    by_cat: dict = {}
    for fname, caption, category in sorted(rows):
        img = png_read(Path(directory) / fname)
        by_cat.setdefault(category, []).append((img, vocab.encode_prompt(caption)))
    return by_cat


def report(generated_dir, real_dir, cls_params: dict, dual_params: dict) -> ScoreReport:
    """Per-category Frechet distance and mean alignment, plus aggregates.

    Reads manifest.tsv from both directories; a category present on only
    one side is recorded under ``skipped``. File order never matters:
    entries are sorted by name before any accumulation.
    """
    gen = _load_dir(generated_dir)
    real = _load_dir(real_dir)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        per_category = {}
        skipped = sorted(set(gen) ^ set(real))
        for cat in sorted(set(gen) & set(real)):
            gen_images = np.stack([img for img, _ in gen[cat]])
            real_images = np.stack([img for img, _ in real[cat]])
            fid = frechet_distance(feature_stats(gen_images, cls_params),
                                   feature_stats(real_images, cls_params))
            aligns = [alignment_score(img, toks, dual_params) for img, toks in gen[cat]]
            per_category[cat] = {
                "fid": fid,
                "align": float(np.mean(aligns)),
                "gen_count": len(gen_images),
                "real_count": len(real_images),
            }
    if not per_category:
        raise ValueError("no categories present on both sides")
    return ScoreReport(per_category=per_category, skipped=skipped)
