import hashlib
from pathlib import Path

import numpy as np
import pytest

from gmdiff import nn, pipeline
from gmdiff.cli import (
    _parse_window,
    build_parser,
    parse_config_file,
    run,
)
from gmdiff.datasynth import make_dataset
from gmdiff.training import TrainConfig, save_checkpoint


def dir_digest(root) -> dict:
    out = {}
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def test_gen_data_is_byte_reproducible(tmp_path):
    assert run(["gen-data", "--out", str(tmp_path / "a"), "--count", "10", "--seed", "1"]) == 0
    assert run(["gen-data", "--out", str(tmp_path / "b"), "--count", "10", "--seed", "1"]) == 0
    assert dir_digest(tmp_path / "a") == dir_digest(tmp_path / "b")


def test_unknown_command_and_flag_rejected(capsys):
    assert run(["frobnicate"]) != 0
    assert run(["gen-data", "--out", "x", "--bogus-flag", "3"]) != 0


def test_help_defaults_match_config_dataclasses():
    parser = build_parser()
    gen = parser._subparsers._group_actions[0].choices["generate"]
    pcfg = pipeline.PipelineConfig()
    by_dest = {a.dest: a for a in gen._actions}
    assert by_dest["strength"].default == pcfg.strength
    assert _parse_window(by_dest["window"].default) == pcfg.window
    assert by_dest["quantile"].default == pcfg.quantile
    assert by_dest["sigma"].default == pcfg.sigma
    assert by_dest["blur_radius"].default == pcfg.blur_radius
    assert by_dest["dilate_radius"].default == pcfg.dilate_radius
    assert by_dest["mode"].default == pcfg.mode
    assert by_dest["layers"].default == pcfg.layers
    assert (by_dest["channel_masks"].default == "coherent") == pcfg.channel_coherent
    assert by_dest["seed"].default == pcfg.seed
    assert by_dest["deterministic"].default == pcfg.deterministic
    assert by_dest["ref_level"].default == pcfg.ref_level
    assert by_dest["dump_masks"].default == pcfg.dump_masks
    assert by_dest["debug_checks"].default == pcfg.debug_checks
    tr = parser._subparsers._group_actions[0].choices["train"]
    tcfg = TrainConfig()
    tr_by_dest = {a.dest: a for a in tr._actions}
    assert tr_by_dest["epochs"].default == tcfg.epochs
    assert tr_by_dest["lr"].default == tcfg.lr
    assert tr_by_dest["batch_size"].default == tcfg.batch_size
    # every optional flag documents a default (absent is fine for the
    # purely optional input-file flags)
    for action in gen._actions:
        if action.dest in ("help", "command", "init", "config"):
            continue
        assert action.required or action.default is not None, action.dest


def test_help_lists_every_generate_flag(capsys):
    assert run(["generate", "--help"]) == 0
    out = capsys.readouterr().out
    for flag in ("--strength", "--window", "--quantile", "--sigma", "--blur-radius",
                 "--dilate-radius", "--mode", "--layers", "--seed", "--deterministic",
                 "--ref-level", "--dump-masks", "--subjects", "--config"):
        assert flag in out, flag


def test_config_file_parsing(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment line\nquantile = 0.5\nseed = 7\nwindow = 0.2:0.6\n")
    vals = parse_config_file(cfg)
    assert vals == {"quantile": "0.5", "seed": "7", "window": "0.2:0.6"}
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense_key = 3\n")
    with pytest.raises(ValueError, match="nonsense_key"):
        parse_config_file(bad)
    malformed = tmp_path / "m.cfg"
    malformed.write_text("just some words\n")
    with pytest.raises(ValueError, match="key = value"):
        parse_config_file(malformed)


def test_eval_command_errors_cleanly_on_missing_inputs(tmp_path, capsys):
    code = run(["eval", "--generated", str(tmp_path / "nope"), "--real",
                str(tmp_path / "nope2"), "--ckpt", str(tmp_path), "--out",
                str(tmp_path / "r.txt")])
    assert code == 1
    err = capsys.readouterr().err
    assert ":" in err and err.strip()


def test_generate_rejects_checkpoint_kind_mismatch(tmp_path, capsys):
    ck = tmp_path / "ck"
    ck.mkdir()
    # wrong kinds in the right filenames
    save_checkpoint(ck / "autoencoder.gmdf", "classifier",
                    nn.init_params(nn.classifier_manifest(), 0))
    save_checkpoint(ck / "denoiser.gmdf", "dual",
                    nn.init_params(nn.dual_encoder_manifest(), 0))
    make_dataset(1, seed=0, out_dir=tmp_path / "img")
    code = run(["generate", "--ckpt", str(ck), "--ref",
                str(tmp_path / "img" / "img_00000.png"), "--prompt",
                "a red circle in forest", "--out", str(tmp_path / "o")])
    assert code == 1
    assert "kind" in capsys.readouterr().err


class TestEndToEndSmall:
    """CLI round trip with tiny checkpoints (random init, reduced schedule)."""

    @pytest.fixture(scope="class")
    def ckpt_dir(self, tmp_path_factory):
        ck = tmp_path_factory.mktemp("ck")
        save_checkpoint(ck / "autoencoder.gmdf", "autoencoder",
                        nn.init_params(nn.autoencoder_manifest(), 1),
                        schedule_args=(20, 1e-3, 0.05))
        save_checkpoint(ck / "denoiser.gmdf", "denoiser",
                        nn.init_params(nn.denoiser_manifest(), 2),
                        schedule_args=(20, 1e-3, 0.05))
        save_checkpoint(ck / "classifier.gmdf", "classifier",
                        nn.init_params(nn.classifier_manifest(), 3),
                        schedule_args=(20, 1e-3, 0.05))
        save_checkpoint(ck / "dual.gmdf", "dual",
                        nn.init_params(nn.dual_encoder_manifest(), 4),
                        schedule_args=(20, 1e-3, 0.05))
        return ck

    @pytest.fixture(scope="class")
    def ref_png(self, tmp_path_factory):
        d = tmp_path_factory.mktemp("refimg")
        make_dataset(1, seed=5, out_dir=d)
        return d / "img_00000.png"

    def test_generate_writes_outputs_and_is_deterministic(self, ckpt_dir, ref_png, tmp_path):
        argv = ["generate", "--ckpt", str(ckpt_dir), "--ref", str(ref_png),
                "--prompt", "a red circle in forest", "--seed", "3",
                "--dump-masks"]
        assert run(argv + ["--out", str(tmp_path / "r1")]) == 0
        assert run(argv + ["--out", str(tmp_path / "r2")]) == 0
        d1, d2 = dir_digest(tmp_path / "r1"), dir_digest(tmp_path / "r2")
        # run_manifest carries wall-clock timings; its config echo must match
        d1.pop("run_manifest.txt")
        d2.pop("run_manifest.txt")
        assert d1 == d2
        echo1 = [ln for ln in (tmp_path / "r1" / "run_manifest.txt").read_text().splitlines()
                 if not ln.startswith("timing.")]
        echo2 = [ln for ln in (tmp_path / "r2" / "run_manifest.txt").read_text().splitlines()
                 if not ln.startswith("timing.")]
        assert echo1 == echo2
        assert "image.png" in d1
        assert any(name.startswith("masks/mask_") and name.endswith("_final.png")
                   for name in d1)
        assert any(name.startswith("masks/score_") for name in d1)

    def test_quantile_zero_matches_plain_img2img(self, ckpt_dir, ref_png, tmp_path):
        base = ["generate", "--ckpt", str(ckpt_dir), "--ref", str(ref_png),
                "--prompt", "a red circle in forest", "--seed", "8"]
        assert run(base + ["--quantile", "0", "--out", str(tmp_path / "q0")]) == 0
        assert run(base + ["--window", "0:0", "--out", str(tmp_path / "nomask")]) == 0
        img_q0 = (tmp_path / "q0" / "image.png").read_bytes()
        img_plain = (tmp_path / "nomask" / "image.png").read_bytes()
        assert img_q0 == img_plain

    def test_config_file_overridden_by_flags(self, ckpt_dir, ref_png, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("quantile = 0.0\nseed = 8\nwindow = 0.3:0.8\n")
        assert run(["generate", "--ckpt", str(ckpt_dir), "--ref", str(ref_png),
                    "--prompt", "a red circle in forest", "--config", str(cfg),
                    "--out", str(tmp_path / "fromfile")]) == 0
        # flag overrides the file's quantile; file seed/window still apply
        assert run(["generate", "--ckpt", str(ckpt_dir), "--ref", str(ref_png),
                    "--prompt", "a red circle in forest", "--config", str(cfg),
                    "--quantile", "0.0", "--out", str(tmp_path / "flagwins")]) == 0
        a = (tmp_path / "fromfile" / "image.png").read_bytes()
        b = (tmp_path / "flagwins" / "image.png").read_bytes()
        assert a == b
        manifest = (tmp_path / "fromfile" / "run_manifest.txt").read_text()
        assert "quantile = 0.0" in manifest
        assert "seed = 8" in manifest

    def test_eval_on_identical_dirs_reports_zero_fid(self, ckpt_dir, tmp_path, capsys):
        data = tmp_path / "set"
        make_dataset(40, seed=11, out_dir=data)
        out = tmp_path / "report.txt"
        assert run(["eval", "--generated", str(data), "--real", str(data),
                    "--ckpt", str(ckpt_dir), "--out", str(out)]) == 0
        text = out.read_text()
        for line in text.splitlines():
            parts = line.split("\t")
            if parts[1] == "fid":
                assert float(parts[2]) < 1e-6
        assert "overall\tfid_mean" in text
