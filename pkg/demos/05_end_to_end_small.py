"""A miniature end-to-end cycle: data, training, masked generation, scores.

Uses a reduced budget (600 images, a handful of epochs) so it finishes in
a few minutes on one CPU core. The full-budget equivalent lives in the
acceptance suite; this script is for watching the moving parts.

Run: python3 demos/05_end_to_end_small.py
"""

import time
import warnings
from pathlib import Path

import numpy as np

from gmdiff import diffusion, nn, pipeline, training
from gmdiff.datasynth import make_dataset, render_background, sample_spec
from gmdiff.evalmetrics import alignment_score, feature_stats, frechet_distance
from gmdiff.pngio import png_write, quantize
from gmdiff.rng import stream

t0 = time.time()
root = Path("demo_output/e2e")
root.mkdir(parents=True, exist_ok=True)
data = root / "data"
if not (data / "manifest.tsv").exists():
    make_dataset(600, seed=0, out_dir=data)
print(f"[{time.time()-t0:5.0f}s] dataset ready")

ae = training.train_autoencoder(data, training.TrainConfig(epochs=6, seed=0))
print(f"[{time.time()-t0:5.0f}s] autoencoder: holdout MAE {ae.metrics['holdout_mae']:.4f}")

den = training.train_denoiser(data, ae.params, training.TrainConfig(epochs=10, lr=1e-3, seed=0))
print(f"[{time.time()-t0:5.0f}s] denoiser: last epoch loss {den.log[-1].split(chr(9))[1]}")

cls_r, dual_r = training.train_eval_models(data, training.TrainConfig(epochs=6, seed=0))
print(f"[{time.time()-t0:5.0f}s] eval models: acc {cls_r.metrics['holdout_accuracy']:.2f}, "
      f"ranking {dual_r.metrics['holdout_ranking']:.2f}")

# one masked generation against a scene-only reference
schedule = diffusion.linear_schedule()
rng = stream(42, "demo/e2e")
spec = sample_spec(rng, background="ocean")
ref = quantize(render_background(spec))
prompt = "a red circle in ocean"
masked = pipeline.generate(ae.params, den.params, schedule, ref, prompt,
                           pipeline.PipelineConfig(seed=42, dump_masks=True))
plain = pipeline.generate(ae.params, den.params, schedule, ref, prompt,
                          pipeline.PipelineConfig(seed=42, window=(0.0, 0.0)))
png_write(root / "reference.png", ref)
png_write(root / "masked.png", masked.image)
png_write(root / "plain_img2img.png", plain.image)
coverage = np.mean([m.mean() for k, m in masked.masks.items() if k[1] == "final"])
print(f"[{time.time()-t0:5.0f}s] generated; mean final-mask coverage {coverage:.0%}")

ds = training.load_dataset(data)
toks = nn.Vocabulary.default().encode_prompt(prompt)
with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    real = feature_stats(ds.images[ds.labels == 1], cls_r.params)   # ocean category
    for name, img in (("masked", masked.image), ("plain", plain.image)):
        fid = frechet_distance(feature_stats(img[None], cls_r.params), real)
        al = alignment_score(img, toks, dual_r.params)
        print(f"  {name:7s} toy-FID {fid:7.2f}   alignment {al:5.1f}")
print(f"done; images in {root}")
