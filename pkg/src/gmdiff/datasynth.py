"""Procedural scene dataset: parameterized backgrounds plus one colored shape.

Images are 32x32 RGB. Each of the five background categories has its own
documented fill procedure (the formulas below are what the tests evaluate
independently):

- arid:     flat fill, rgb = (0.76, 0.60, 0.42)
- ocean:    vertical gradient, row y in 0..31:
            rgb(y) = (1 - y/31) * (0.08, 0.35, 0.55) + (y/31) * (0.04, 0.50, 0.68)
- forest:   per-pixel noise, rgb(x, y) = (0.10, 0.34, 0.14) + 0.09 * u(y, x)
            with u = stream(texture_seed, "texture").uniform(-1, 1, (32, 32)),
            shared across channels, clipped to [0, 1]
- mountain: sky gradient (1 - y/31)*(0.60, 0.68, 0.80) + (y/31)*(0.44, 0.50, 0.62);
            rock (0.42, 0.39, 0.37) + 0.1*(1 - y/31) where y >= ridge(x);
            ridge(x) = min over two peaks of (py_i + 0.9 * |x - px_i|) with
            px_1, px_2 = 4 + 10*u1, 18 + 10*u2 and py_1, py_2 = 8 + 6*u3, 8 + 6*u4,
            u1..u4 the first four draws of stream(texture_seed, "texture").uniform(0, 1, 4)
- downtown: wall rgb = (0.22, 0.21, 0.26) + 0.04 * ((x//8 + y//8) % 2); window
            cells where x % 4 in {1, 2} and y % 4 in {1, 2}: lit cells
            (0.92, 0.82, 0.35), dark cells (0.08, 0.08, 0.12); cell (x//4, y//4)
            is lit iff L[y//4, x//4] > 0.5 with
            L = stream(texture_seed, "texture").uniform(0, 1, (8, 8))

The subject is rasterized on top with a one-pixel anti-aliased edge via a
signed-distance coverage ramp. Captions follow the closed grammar
"a <color> <shape> in <background>" and always tokenize under the fixed
vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import Vocabulary
from .pngio import png_write, quantize
from .rng import stream

BACKGROUNDS = ("forest", "ocean", "arid", "mountain", "downtown")
SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "yellow", "white")

SUBJECT_RGB = {
    "red": (0.93, 0.08, 0.06),
    "yellow": (0.95, 0.85, 0.15),
    "white": (0.98, 0.98, 0.96),
}

SIZE = 32
MANIFEST_NAME = "manifest.tsv"


@dataclass(frozen=True)
class SceneSpec:
    background: str
    shape: str
    color: str
    cx: float
    cy: float
    radius: float
    texture_seed: int

    def __post_init__(self):
        if self.background not in BACKGROUNDS:
            raise ValueError(f"unknown background {self.background!r}")
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if not (8.0 <= self.cx <= 24.0 and 8.0 <= self.cy <= 24.0):
            raise ValueError(f"center ({self.cx}, {self.cy}) outside [8, 24]^2")
        if not (4.0 <= self.radius <= 8.0):
            raise ValueError(f"radius {self.radius} outside [4, 8]")

    @property
    def caption(self) -> str:
        return f"a {self.color} {self.shape} in {self.background}"


@dataclass(frozen=True)
class CaptionedImage:
    image: np.ndarray          # (3, 32, 32) float64 in [0, 1], 8-bit quantized
    tokens: np.ndarray         # (8,) int token ids
    spec: SceneSpec


def _grid():
    y, x = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    return x, y


def render_background(spec: SceneSpec) -> np.ndarray:
    """Fill the 32x32 background for a spec (see module docstring formulas)."""
    x, y = _grid()
    img = np.zeros((3, SIZE, SIZE))
    if spec.background == "arid":
        img[:] = np.array([0.76, 0.60, 0.42])[:, None, None]
    elif spec.background == "ocean":
        f = (y / 31.0)[None]
        top = np.array([0.08, 0.35, 0.55])[:, None, None]
        bot = np.array([0.04, 0.50, 0.68])[:, None, None]
        img = (1 - f) * top + f * bot
    elif spec.background == "forest":
        u = stream(spec.texture_seed, "texture").uniform(-1.0, 1.0, (SIZE, SIZE))
        base = np.array([0.10, 0.34, 0.14])[:, None, None]
        img = base + 0.09 * u[None]
    elif spec.background == "mountain":
        u = stream(spec.texture_seed, "texture").uniform(0.0, 1.0, 4)
        px = np.array([4.0 + 10.0 * u[0], 18.0 + 10.0 * u[1]])
        py = np.array([8.0 + 6.0 * u[2], 8.0 + 6.0 * u[3]])
        f = (y / 31.0)[None]
        sky = (1 - f) * np.array([0.60, 0.68, 0.80])[:, None, None] \
            + f * np.array([0.44, 0.50, 0.62])[:, None, None]
        ridge = np.minimum(py[0] + 0.9 * np.abs(x - px[0]), py[1] + 0.9 * np.abs(x - px[1]))
        rock = np.array([0.42, 0.39, 0.37])[:, None, None] + 0.1 * (1 - f)
        img = np.where((y >= ridge)[None], rock, sky)
    elif spec.background == "downtown":
        lit = stream(spec.texture_seed, "texture").uniform(0.0, 1.0, (8, 8)) > 0.5
        wall = 0.04 * (((x // 8 + y // 8) % 2))[None] + np.array([0.22, 0.21, 0.26])[:, None, None]
        is_window = ((x % 4 == 1) | (x % 4 == 2)) & ((y % 4 == 1) | (y % 4 == 2))
        cell_lit = lit[(y // 4).astype(int), (x // 4).astype(int)]
        win = np.where(cell_lit[None],
                       np.array([0.92, 0.82, 0.35])[:, None, None],
                       np.array([0.08, 0.08, 0.12])[:, None, None])
        img = np.where(is_window[None], win, wall + np.zeros((3, SIZE, SIZE)))
    return np.clip(img, 0.0, 1.0)


def _subject_distance(spec: SceneSpec) -> np.ndarray:
    """Signed distance from each pixel center to the subject boundary."""
    x, y = _grid()
    if spec.shape == "circle":
        return np.hypot(x - spec.cx, y - spec.cy) - spec.radius
    if spec.shape == "square":
        return np.maximum(np.abs(x - spec.cx), np.abs(y - spec.cy)) - spec.radius
    # equilateral triangle, apex up, circumradius r: intersection of the
    # three edge half-planes (exact inside, edge-accurate outside)
    r = spec.radius
    verts = [(spec.cx, spec.cy - r),
             (spec.cx + r * np.sqrt(3) / 2, spec.cy + r / 2),
             (spec.cx - r * np.sqrt(3) / 2, spec.cy + r / 2)]
    d = np.full((SIZE, SIZE), -np.inf)
    for i in range(3):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % 3]
        ex, ey = x2 - x1, y2 - y1
        norm = np.hypot(ex, ey)
        # outward normal for counter-clockwise traversal in y-down coords
        nx, ny = ey / norm, -ex / norm
        d = np.maximum(d, (x - x1) * nx + (y - y1) * ny)
    return d


def subject_coverage(spec: SceneSpec) -> np.ndarray:
    """Per-pixel subject opacity in [0, 1] (one-pixel anti-aliased edge)."""
    return np.clip(0.5 - _subject_distance(spec), 0.0, 1.0)


def render(spec: SceneSpec) -> CaptionedImage:
    """Deterministically rasterize a scene and tokenize its caption."""
    bg = render_background(spec)
    cov = subject_coverage(spec)[None]
    color = np.array(SUBJECT_RGB[spec.color])[:, None, None]
    img = quantize(bg * (1.0 - cov) + color * cov)
    tokens = Vocabulary.default().encode_prompt(spec.caption)
    return CaptionedImage(image=img, tokens=tokens, spec=spec)


def sample_spec(rng: np.random.Generator, background: str | None = None) -> SceneSpec:
    """Uniform spec draw; background can be pinned for stratification."""
    return SceneSpec(
        background=background or BACKGROUNDS[rng.integers(len(BACKGROUNDS))],
        shape=SHAPES[rng.integers(len(SHAPES))],
        color=COLORS[rng.integers(len(COLORS))],
        cx=float(rng.uniform(8.0, 24.0)),
        cy=float(rng.uniform(8.0, 24.0)),
        radius=float(rng.uniform(4.0, 8.0)),
        texture_seed=int(rng.integers(2 ** 31)),
    )


def make_dataset(n: int, seed: int, out_dir) -> Path:
    """Render n stratified scenes into out_dir plus a manifest.tsv.

    Categories rotate round-robin so each gets floor(n/5) or one more.
    Returns the manifest path. Identical (n, seed) produce identical bytes.
    """
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc
    rng = stream(seed, "data")
    lines = []
    for i in range(n):
        spec = sample_spec(rng, background=BACKGROUNDS[i % len(BACKGROUNDS)])
        item = render(spec)
        name = f"img_{i:05d}.png"
        png_write(out / name, item.image)
        lines.append(f"{name}\t{spec.caption}\t{spec.background}\n")
    manifest = out / MANIFEST_NAME
    manifest.write_text("".join(lines), encoding="utf-8")
    return manifest


def read_manifest(dataset_dir) -> list[tuple[str, str, str]]:
    """Parse manifest.tsv into (filename, caption, category) rows."""
    path = Path(dataset_dir) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {dataset_dir}")
    rows = []
    for ln in path.read_text(encoding="utf-8").splitlines():
        if not ln.strip():
            continue
        parts = ln.split("\t")
        if len(parts) != 3:
            raise ValueError(f"bad manifest line: {ln!r}")
        rows.append((parts[0], parts[1], parts[2]))
    return rows
