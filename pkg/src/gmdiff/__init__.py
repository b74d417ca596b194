"""gmdiff: desk-scale latent diffusion with gradient-based attention masking.

The package is a plain numpy library. Sub-modules:

- ``autodiff``    tensor tape with reverse-mode gradients and an FD oracle
- ``diffusion``   DDPM noise schedule, forward noising, ancestral reverse step
- ``nn``          toy autoencoder, token embedder and cross-attention UNet
- ``attribution`` noise-prediction Jacobians w.r.t. attention weights,
                  per-subject importance scores
- ``maskops``     Gaussian blur, grayscale dilation, quantile thresholding,
                  mask set algebra
- ``pipeline``    masked img2img generation (encode, noise, reverse loop,
                  per-step masking and reference blending)
- ``datasynth``   procedural scene dataset with grammar captions
- ``training``    Adam, training loops, binary checkpoints
- ``evalmetrics`` Frechet feature distance and caption alignment scoring
- ``cli``         command-line front end (gen-data / train / train-eval /
                  generate / eval)
"""

from . import autodiff, diffusion, maskops, rng

__all__ = ["autodiff", "diffusion", "maskops", "rng"]
__version__ = "0.1.0"
