"""Masked img2img generation: the full encode/noise/denoise/blend loop.

A run encodes the reference image, forward-noises it to the strength
level, then walks the reverse process. At every selected timestep the
cross-attention records of that step's UNet pass are differentiated to
get per-subject importance scores; scores are blurred, dilated and
thresholded into binary masks (union over subjects, intersection over
the selected layers), and the freshly denoised latent is blended with a
noised copy of the reference: masked elements keep the denoised value,
unmasked elements are replaced from the reference.

Noise draws come from streams named "init", "sampler" and "ref", all
derived from the run seed, so enabling or disabling masking never
perturbs the sampler's sequence. The deterministic flag replaces every
noise draw with zeros.

The reference latent for the blend at slot t-1 is noised to level t-1 by
default ("aligned"); "paper" mode noises it to t instead, reproducing
the off-by-one reading where the reference is prepared at the loop
timestep rather than at the slot it is written into.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import maskops
from .attribution import attention_jacobians, importance_scores, subject_token_indices
from .autodiff import Graph
from .datasynth import COLORS, SHAPES
from .diffusion import NoiseSchedule, q_sample, reverse_step
from .nn import LATENT_SHAPE, Vocabulary, decode, embed_tokens, encode, unet_forward
from .rng import GENERATOR_NAME, stream


@dataclass(frozen=True)
class PipelineConfig:
    strength: float = 0.9
    window: tuple = (0.3, 0.8)        # fractions of T; t selected iff lo*T < t <= hi*T
    quantile: float = maskops.DEFAULT_QUANTILE
    sigma: float = maskops.DEFAULT_SIGMA
    blur_radius: int = maskops.DEFAULT_BLUR_RADIUS
    dilate_radius: int = 1            # 3x3 flat square
    mode: str = "full"                # attribution pairing mode
    layers: str = "all"               # "all" | "0" | "1"
    channel_coherent: bool = True     # reduce scores over channels before masking
    subjects: tuple | None = None     # None: color/shape words of the prompt
    seed: int = 0
    deterministic: bool = False
    ref_level: str = "aligned"        # "aligned" | "paper"
    dump_masks: bool = False
    debug_checks: bool = False

    def __post_init__(self):
        if not 0.0 < self.strength <= 1.0:
            raise ValueError(f"strength must be in (0, 1], got {self.strength}")
        lo, hi = self.window
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"window must satisfy 0 <= lo <= hi <= 1, got {self.window}")
        if not 0.0 <= self.quantile < 1.0:
            raise ValueError(f"quantile must be in [0, 1), got {self.quantile}")
        if self.mode not in ("full", "diagonal"):
            raise ValueError(f"unknown attribution mode {self.mode!r}")
        if self.layers not in ("all", "0", "1"):
            raise ValueError(f"layers must be 'all', '0' or '1', got {self.layers!r}")
        if self.ref_level not in ("aligned", "paper"):
            raise ValueError(f"ref_level must be 'aligned' or 'paper', got {self.ref_level!r}")
        if self.sigma <= 0 or self.blur_radius < 1 or not 0 <= self.dilate_radius <= 3:
            raise ValueError("bad smoothing parameters")


@dataclass
class RunArtifacts:
    image: np.ndarray                 # (3, 32, 32) in [0, 1]
    config: PipelineConfig
    prompt: str
    subjects: tuple                   # resolved subject words
    masks: dict = field(default_factory=dict)    # (t, "final") / (t, layer, word)
    fields: dict = field(default_factory=dict)   # (t, layer, word) -> score array
    timing: dict = field(default_factory=dict)

    def config_echo(self) -> str:
        items = dict(sorted(asdict(self.config).items()))
        lines = [f"prompt = {self.prompt}", f"subjects = {','.join(self.subjects)}"]
        lines += [f"{k} = {v}" for k, v in items.items()]
        lines.append(f"rng = {GENERATOR_NAME}")
        return "\n".join(lines) + "\n"

    def manifest_text(self) -> str:
        timing = "".join(f"timing.{k} = {v:.3f}s\n" for k, v in sorted(self.timing.items()))
        return self.config_echo() + timing


def prepare_ref_latent(schedule: NoiseSchedule, z_ref: np.ndarray, t: int, rng) -> np.ndarray:
    """Forward-noise the reference latent to level t with the run's stream.

    Passing ``rng=None`` uses zero noise (the deterministic mode), giving
    exactly sqrt(alpha_bar_t) * z_ref.
    """
    eps = np.zeros_like(z_ref) if rng is None else rng.normal(size=z_ref.shape)
    return q_sample(schedule, z_ref, t, eps)


def blend(denoised: np.ndarray, ref_t: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked elements keep the denoised latent, the rest come from the reference."""
    denoised = np.asarray(denoised, dtype=np.float64)
    ref_t = np.asarray(ref_t, dtype=np.float64)
    if denoised.shape != ref_t.shape or denoised.shape != np.shape(mask):
        raise ValueError(f"blend: shapes differ: {denoised.shape}, {ref_t.shape}, "
                         f"{np.shape(mask)}")
    mask = maskops.require_binary(mask, "blend mask")
    return mask * denoised + (1.0 - mask) * ref_t


def resolve_subjects(prompt: str, subjects) -> tuple:
    """Default subject words: the prompt's color and shape tokens."""
    if subjects is not None:
        return tuple(subjects)
    vocabulary_subjects = set(COLORS) | set(SHAPES)
    return tuple(w for w in prompt.split() if w in vocabulary_subjects)


def selected_timesteps(config: PipelineConfig, T: int) -> set:
    lo, hi = config.window
    return {t for t in range(T) if lo * T < t <= hi * T}


def _step_masks(graph, out, subject_indices, subject_words, config):
    """Masks for one timestep: per (layer, subject) score -> blur -> dilate ->
    threshold, union over subjects, intersection over layers.

    With channel_coherent (the default) each score field is averaged over
    the channel axis before smoothing, so a spatial site keeps either all
    or none of its latent channels. Per-channel masks leave most subject
    sites only partially protected, and the blend then mixes denoised and
    reference channels at the same pixel, visibly degrading the subject.
    """
    records = [r for r in out.records
               if config.layers == "all" or r.layer_id == int(config.layers)]
    blocks = attention_jacobians(graph, out.eps_node, records)
    kernel = maskops.gaussian_kernel(config.sigma, config.blur_radius)
    se = maskops.flat_square_se(config.dilate_radius)
    layer_masks = []
    details = {}
    for rec, block in zip(records, blocks):
        subject_masks = []
        for word, s_idx in zip(subject_words, subject_indices):
            fld = importance_scores(rec, block, s_idx, mode=config.mode)
            values = fld.values
            if config.channel_coherent:
                values = np.broadcast_to(values.mean(axis=0), values.shape)
            smooth = maskops.dilate(maskops.blur(values, kernel), se)
            mask = maskops.threshold_dynamic(smooth, config.quantile)
            subject_masks.append(mask)
            details[(rec.layer_id, word)] = (fld.values, mask)
        layer_masks.append(maskops.mask_union(subject_masks))
    final = maskops.mask_intersect(layer_masks)
    return final, details


def generate(ae_params: dict, den_params: dict, schedule: NoiseSchedule,
             ref_image: np.ndarray, prompt: str, config: PipelineConfig,
             init_image: np.ndarray | None = None,
             vocab: Vocabulary | None = None) -> RunArtifacts:
    """Run the full masked-generation loop and decode the result."""
    t_start_wall = time.perf_counter()
    vocab = vocab or Vocabulary.default()
    tokens = vocab.encode_prompt(prompt)
    subject_words = resolve_subjects(prompt, config.subjects)
    subject_indices = subject_token_indices(vocab, prompt.split(), subject_words)

    z_ref = encode(ae_params, ref_image)
    z_init = z_ref if init_image is None else encode(ae_params, init_image)
    text = embed_tokens(den_params, tokens)

    T = schedule.T
    t0 = min(max(int(round(config.strength * T)) - 1, 0), T - 1)
    selected = selected_timesteps(config, T)
    init_rng = None if config.deterministic else stream(config.seed, "init")
    sampler_rng = None if config.deterministic else stream(config.seed, "sampler")
    ref_rng = None if config.deterministic else stream(config.seed, "ref")

    eps0 = np.zeros(LATENT_SHAPE) if init_rng is None else init_rng.normal(size=LATENT_SHAPE)
    z = q_sample(schedule, z_init, t0, eps0)

    artifacts = RunArtifacts(image=None, config=config, prompt=prompt,
                             subjects=subject_words)
    attrib_time = 0.0
    for t in range(t0, -1, -1):
        graph = Graph()
        out = unet_forward(graph, den_params, z, t, text)
        if t == 0 or sampler_rng is None:
            noise = np.zeros(LATENT_SHAPE)
        else:
            noise = sampler_rng.normal(size=LATENT_SHAPE)
        z_next = reverse_step(schedule, z, out.eps_hat, t, noise)
        if t in selected and subject_indices:
            t_attr = time.perf_counter()
            final, details = _step_masks(graph, out, subject_indices, subject_words, config)
            level = t - 1 if config.ref_level == "aligned" else t
            if level < 0:
                ref_t = z_ref
            else:
                ref_t = prepare_ref_latent(schedule, z_ref, level, ref_rng)
            blended = blend(z_next, ref_t, final)
            if config.debug_checks:
                on = final == 1.0
                assert np.array_equal(blended[on], z_next[on])
                assert np.array_equal(blended[~on], ref_t[~on])
            z_next = blended
            attrib_time += time.perf_counter() - t_attr
            if config.dump_masks:
                artifacts.masks[(t, "final")] = final
                for (layer, word), (fld, mask) in details.items():
                    artifacts.fields[(t, layer, word)] = fld
                    artifacts.masks[(t, layer, word)] = mask
        z = z_next

    artifacts.image = decode(ae_params, z)
    artifacts.timing["total"] = time.perf_counter() - t_start_wall
    artifacts.timing["attribution"] = attrib_time
    return artifacts
