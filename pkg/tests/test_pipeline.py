import numpy as np
import pytest

from gmdiff import nn
from gmdiff.datasynth import render, sample_spec
from gmdiff.diffusion import linear_schedule
from gmdiff.pipeline import (
    PipelineConfig,
    RunArtifacts,
    blend,
    generate,
    prepare_ref_latent,
    resolve_subjects,
    selected_timesteps,
)
from gmdiff.rng import stream


@pytest.fixture(scope="module")
def setup():
    ae = nn.init_params(nn.autoencoder_manifest(), seed=21)
    den = nn.init_params(nn.denoiser_manifest(), seed=22)
    schedule = linear_schedule(20, 1e-3, 0.05)
    ref = render(sample_spec(stream(0, "t"), background="ocean")).image
    return ae, den, schedule, ref


def test_prepare_ref_latent_deterministic_mode(setup):
    _, _, schedule, _ = setup
    rng = np.random.default_rng(0)
    z = rng.normal(size=(4, 8, 8))
    for t in (0, 7, 19):
        got = prepare_ref_latent(schedule, z, t, None)
        np.testing.assert_array_equal(got, np.sqrt(schedule.alpha_bar[t]) * z)
    # low-noise limit: nearly clean at t=0
    got0 = prepare_ref_latent(schedule, z, 0, None)
    assert np.abs(got0 - z).max() < 1e-3 * np.abs(z).max() + 1e-2


def test_prepare_ref_latent_variance(setup):
    _, _, schedule, _ = setup
    t = 12
    rng = np.random.default_rng(1)
    draws = np.stack([prepare_ref_latent(schedule, np.zeros(4), t, rng)
                      for _ in range(10_000)])
    var = draws.var()
    expected = 1.0 - schedule.alpha_bar[t]
    assert abs(var - expected) / expected < 0.05


def test_blend_boundary_cases():
    rng = np.random.default_rng(2)
    den = rng.normal(size=(4, 8, 8))
    ref = rng.normal(size=(4, 8, 8))
    np.testing.assert_array_equal(blend(den, ref, np.ones((4, 8, 8))), den)
    np.testing.assert_array_equal(blend(den, ref, np.zeros((4, 8, 8))), ref)
    mask = np.indices((4, 8, 8)).sum(axis=0) % 2
    out = blend(den, ref, mask.astype(float))
    for idx in np.ndindex(4, 8, 8):
        want = den[idx] if mask[idx] else ref[idx]
        assert out[idx] == want, idx


def test_blend_rejects_bad_masks():
    z = np.zeros((4, 8, 8))
    with pytest.raises(ValueError, match="binary"):
        blend(z, z, np.full((4, 8, 8), 0.5))
    with pytest.raises(ValueError, match="shapes"):
        blend(z, z, np.ones((4, 4, 4)))


def test_selected_timesteps_semantics():
    cfg = PipelineConfig(window=(0.0, 0.0))
    assert selected_timesteps(cfg, 100) == set()
    cfg = PipelineConfig(window=(0.3, 0.8))
    assert selected_timesteps(cfg, 100) == set(range(31, 81))
    assert selected_timesteps(cfg, 20) == set(range(7, 17))


def test_resolve_subjects_defaults():
    assert resolve_subjects("a red circle in forest", None) == ("red", "circle")
    assert resolve_subjects("a red circle in forest", ("circle",)) == ("circle",)
    assert resolve_subjects("a in forest", None) == ()


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(strength=0.0)
    with pytest.raises(ValueError):
        PipelineConfig(window=(0.8, 0.3))
    with pytest.raises(ValueError):
        PipelineConfig(quantile=1.0)
    with pytest.raises(ValueError):
        PipelineConfig(layers="7")
    with pytest.raises(ValueError):
        PipelineConfig(ref_level="banana")


def test_generate_rejects_bad_prompts(setup):
    ae, den, schedule, ref = setup
    cfg = PipelineConfig(seed=0, window=(0.0, 0.0))
    with pytest.raises(ValueError, match="unknown token"):
        generate(ae, den, schedule, ref, "a purple circle in forest", cfg)
    with pytest.raises(ValueError, match="does not appear"):
        generate(ae, den, schedule, ref, "a red circle in forest",
                 PipelineConfig(subjects=("square",), window=(0.0, 0.0)))


def test_no_op_masking_matches_plain_img2img(setup):
    ae, den, schedule, ref = setup
    prompt = "a red circle in ocean"
    base = generate(ae, den, schedule, ref, prompt,
                    PipelineConfig(seed=5, window=(0.0, 0.0)))
    allones = generate(ae, den, schedule, ref, prompt,
                       PipelineConfig(seed=5, quantile=0.0))
    nosubj = generate(ae, den, schedule, ref, prompt,
                      PipelineConfig(seed=5, subjects=()))
    np.testing.assert_array_equal(base.image, allones.image)
    np.testing.assert_array_equal(base.image, nosubj.image)


def test_generate_is_deterministic(setup):
    ae, den, schedule, ref = setup
    cfg = PipelineConfig(seed=9, dump_masks=True, debug_checks=True)
    a = generate(ae, den, schedule, ref, "a white square in ocean", cfg)
    b = generate(ae, den, schedule, ref, "a white square in ocean", cfg)
    np.testing.assert_array_equal(a.image, b.image)
    assert set(a.masks) == set(b.masks)
    for k in a.masks:
        np.testing.assert_array_equal(a.masks[k], b.masks[k])
    assert a.config_echo() == b.config_echo()


def test_generate_masks_are_binary_latent_shaped(setup):
    ae, den, schedule, ref = setup
    cfg = PipelineConfig(seed=3, dump_masks=True)
    art = generate(ae, den, schedule, ref, "a yellow triangle in ocean", cfg)
    finals = [k for k in art.masks if k[1] == "final"]
    assert len(finals) == len(selected_timesteps(cfg, schedule.T))
    for k, m in art.masks.items():
        assert m.shape == (4, 8, 8)
        assert set(np.unique(m)) <= {0.0, 1.0}
    assert art.image.shape == (3, 32, 32)
    assert art.image.min() >= 0 and art.image.max() <= 1


def test_channel_coherent_masks_are_channel_uniform(setup):
    ae, den, schedule, ref = setup
    cfg = PipelineConfig(seed=12, dump_masks=True)
    art = generate(ae, den, schedule, ref, "a red circle in ocean", cfg)
    for key, m in art.masks.items():
        if key[1] == "final":
            assert np.array_equal(m.min(axis=0), m.max(axis=0)), key
    indep = generate(ae, den, schedule, ref, "a red circle in ocean",
                     PipelineConfig(seed=12, channel_coherent=False, dump_masks=True))
    uniform = all(np.array_equal(m.min(axis=0), m.max(axis=0))
                  for k, m in indep.masks.items() if k[1] == "final")
    assert not uniform


def test_generate_layer_selection_and_modes(setup):
    ae, den, schedule, ref = setup
    imgs = {}
    for layers in ("all", "0", "1"):
        cfg = PipelineConfig(seed=4, layers=layers)
        imgs[layers] = generate(ae, den, schedule, ref, "a red square in ocean", cfg).image
    # intersection over both layers cannot equal single-layer masking in general
    assert not np.array_equal(imgs["all"], imgs["0"]) or not np.array_equal(imgs["all"], imgs["1"])
    diag = generate(ae, den, schedule, ref, "a red square in ocean",
                    PipelineConfig(seed=4, mode="diagonal")).image
    assert diag.shape == (3, 32, 32)


def test_ref_level_paper_differs_from_aligned(setup):
    ae, den, schedule, ref = setup
    a = generate(ae, den, schedule, ref, "a red circle in ocean",
                 PipelineConfig(seed=6, ref_level="aligned"))
    p = generate(ae, den, schedule, ref, "a red circle in ocean",
                 PipelineConfig(seed=6, ref_level="paper"))
    assert not np.array_equal(a.image, p.image)


def test_deterministic_flag_gives_reproducible_noiseless_run(setup):
    ae, den, schedule, ref = setup
    cfg = PipelineConfig(seed=1, deterministic=True, window=(0.0, 0.0))
    a = generate(ae, den, schedule, ref, "a red circle in ocean", cfg)
    b = generate(ae, den, schedule, ref, "a red circle in ocean",
                 PipelineConfig(seed=999, deterministic=True, window=(0.0, 0.0)))
    # with all noise zeroed the seed is irrelevant
    np.testing.assert_array_equal(a.image, b.image)


def test_manifest_text_mentions_rng_and_timing(setup):
    ae, den, schedule, ref = setup
    art = generate(ae, den, schedule, ref, "a red circle in ocean",
                   PipelineConfig(seed=0, window=(0.0, 0.0)))
    text = art.manifest_text()
    assert "PCG64" in text
    assert "timing.total" in text
    assert "strength = 0.9" in text
