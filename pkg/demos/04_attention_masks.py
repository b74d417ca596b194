"""From attention gradients to binary masks.

Runs one UNet step on a randomly initialized model, assembles the
Jacobian of the predicted noise with respect to each cross-attention
layer's weights, turns the subject's slice into importance scores, and
walks the smoothing chain: blur -> dilate -> quantile threshold ->
union over subjects -> intersection over layers.

A trained checkpoint would give semantically meaningful masks; the
mechanics and shapes are identical either way.

Run: python3 demos/04_attention_masks.py
"""

from pathlib import Path

import numpy as np

from gmdiff import maskops, nn
from gmdiff.attribution import attention_jacobians, importance_scores, subject_token_indices
from gmdiff.autodiff import Graph
from gmdiff.pngio import png_write_binary, png_write_gray

out = Path("demo_output/masks")
out.mkdir(parents=True, exist_ok=True)

params = nn.init_params(nn.generator_manifest(), seed=0)
vocab = nn.Vocabulary.default()
prompt = "a red circle in forest"
subjects = ["red", "circle"]
idx = subject_token_indices(vocab, prompt.split(), subjects)
print(f"prompt {prompt!r}, subject token positions {idx}")

rng = np.random.default_rng(0)
z_t = rng.normal(size=(4, 8, 8))
text = nn.embed_tokens(params, vocab.encode_prompt(prompt))

g = Graph()
unet = nn.unet_forward(g, params, z_t, t=50, text=text)
blocks = attention_jacobians(g, unet.eps_node, unet.records)
for rec, block in zip(unet.records, blocks):
    print(f"layer {rec.layer_id}: P={rec.grid}, jacobian {block.values.shape}")

kernel = maskops.gaussian_kernel(sigma=1.0, radius=2)
se = maskops.flat_square_se(1)
layer_masks = []
for rec, block in zip(unet.records, blocks):
    per_subject = []
    for word, s in zip(subjects, idx):
        field = importance_scores(rec, block, s, mode="full")
        smooth = maskops.dilate(maskops.blur(field.values, kernel), se)
        mask = maskops.threshold_dynamic(smooth, 0.70)
        per_subject.append(mask)
        png_write_gray(out / f"score_layer{rec.layer_id}_{word}.png",
                       np.concatenate(list(field.values), axis=1))
        print(f"  layer {rec.layer_id} {word!r}: score range "
              f"[{field.values.min():.2e}, {field.values.max():.2e}], "
              f"mask keeps {mask.mean():.0%}")
    layer_masks.append(maskops.mask_union(per_subject))
final = maskops.mask_intersect(layer_masks)
png_write_binary(out / "final_mask.png", np.concatenate(list(final), axis=1))
print(f"final mask keeps {final.mean():.0%} of latent elements -> {out / 'final_mask.png'}")
