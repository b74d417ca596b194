"""Render the procedural scene zoo.

Writes one PNG per background category and one per subject shape into
demo_output/scenes/, plus the caption each image tokenizes to.

Run: python3 demos/03_synthetic_scenes.py
"""

from pathlib import Path

from gmdiff.datasynth import BACKGROUNDS, SHAPES, SceneSpec, render, render_background, sample_spec
from gmdiff.pngio import png_write, quantize
from gmdiff.rng import stream

out = Path("demo_output/scenes")
out.mkdir(parents=True, exist_ok=True)
rng = stream(0, "demo/scenes")

print("backgrounds (no subject):")
for bg in BACKGROUNDS:
    spec = sample_spec(rng, background=bg)
    png_write(out / f"bg_{bg}.png", quantize(render_background(spec)))
    print(f"  {out / f'bg_{bg}.png'}")

print("\nsubjects on an arid background:")
for shape in SHAPES:
    spec = SceneSpec(background="arid", shape=shape, color="red",
                     cx=16.0, cy=16.0, radius=7.0, texture_seed=3)
    item = render(spec)
    png_write(out / f"subject_{shape}.png", item.image)
    print(f"  {out / f'subject_{shape}.png'}   caption: {spec.caption!r}")
    print(f"    tokens: {item.tokens.tolist()}")
