"""Training loop tests: convergence, gating, determinism, resume, aborts.

All at toy widths; the full-scale budgeted run lives in the acceptance
tests.
"""

import os

import numpy as np
import pytest

from panodet.autograd.optim import Adam
from panodet.config import RunConfig
from panodet.model import build_model
from panodet.scenegen import generate_scene
from panodet.serial import save_checkpoint
from panodet.train import LOG_HEADER, train

TOY = dict(grid_h=32, grid_w=32, rv_h=16, rv_w=64, c0=2, c1=3, c2=4,
           pan_w1=3, pan_w2=4, pan_w3=5, det_trunk=6,
           sc_width1=4, sc_width2=4, sc_n0=1, sc_n1=1, sc_n2=1,
           k_s1=4, k_s2=4, scene_beams=12, scene_azimuth=90)


def toy_cfg(**kw):
    return RunConfig(**{**TOY, **kw}).validate()


def scenes(cfg, n):
    return [generate_scene(cfg.scene_spec(i)) for i in range(n)]


def read_tree(root):
    """{relative path: bytes} for a directory."""
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            p = os.path.join(dirpath, name)
            with open(p, "rb") as f:
                out[os.path.relpath(p, root)] = f.read()
    return out


class TestLoop:
    def test_overfit_smoke(self, tmp_path):
        # single scene, 200 steps: total loss must at least halve
        cfg = toy_cfg(steps=200)
        model, rows = train(cfg, scenes(cfg, 1), tmp_path / "ckpt",
                            log_path=tmp_path / "log.csv")
        assert len(rows) == 200
        assert rows[-1][2] < 0.5 * rows[0][2]

    def test_log_format(self, tmp_path):
        cfg = toy_cfg(steps=3)
        _, rows = train(cfg, scenes(cfg, 2), tmp_path / "ckpt",
                        log_path=tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == LOG_HEADER
        assert len(lines) == 4
        step, scene, loss, det, pan, src = lines[1].split(",")
        assert (int(step), int(scene)) == (0, 0)
        assert float(loss) == rows[0][2]
        assert src == "teacher"

    def test_scene_rotation_and_forcing_switch(self, tmp_path):
        cfg = toy_cfg(steps=4, teacher_forcing_epochs=1)
        _, rows = train(cfg, scenes(cfg, 2), tmp_path / "ckpt")
        assert [r[1] for r in rows] == [0, 1, 0, 1]
        assert [r[5] for r in rows] == ["teacher", "teacher",
                                        "predicted", "predicted"]

    def test_empty_dataset(self, tmp_path):
        with pytest.raises(ValueError, match="empty"):
            train(toy_cfg(), [], tmp_path / "ckpt")

    def test_both_weights_zero(self, tmp_path):
        cfg = toy_cfg(w_det=0.0, w_pan=0.0)
        with pytest.raises(ValueError, match="weights"):
            train(cfg, scenes(cfg, 1), tmp_path / "ckpt")


class TestGradientGating:
    def changed_prefixes(self, cfg, tmp_path):
        before = {n: p.data.copy()
                  for n, p in build_model(cfg).named_parameters()}
        model, _ = train(cfg, scenes(cfg, 1), tmp_path / "ckpt")
        return {n: not np.array_equal(before[n], p.data)
                for n, p in model.named_parameters()}

    def test_w_pan_zero_freezes_decoupled_panoptic_head(self, tmp_path):
        # without cross-task fusion the whole panoptic head sees no loss
        cfg = toy_cfg(steps=1, w_pan=0.0, no_dual_task=True)
        changed = self.changed_prefixes(cfg, tmp_path)
        assert not any(v for n, v in changed.items() if n.startswith("pan."))
        assert any(v for n, v in changed.items() if n.startswith("backbone."))

    def test_w_pan_zero_still_freezes_offset_decoder_with_fusion(
            self, tmp_path):
        # semantic logits feed the fusion gate, so the semantic decoder
        # trains off the detection loss; the offset decoder never does
        cfg = toy_cfg(steps=1, w_pan=0.0)
        changed = self.changed_prefixes(cfg, tmp_path)
        assert not any(v for n, v in changed.items()
                       if n.startswith("pan.off"))
        assert any(v for n, v in changed.items() if n.startswith("pan.sem"))
        assert any(v for n, v in changed.items() if n.startswith("backbone."))

    def test_w_det_zero_freezes_detection_head(self, tmp_path):
        cfg = toy_cfg(steps=1, w_det=0.0)
        changed = self.changed_prefixes(cfg, tmp_path)
        assert not any(v for n, v in changed.items() if n.startswith("det."))
        assert any(v for n, v in changed.items() if n.startswith("pan."))


class TestDeterminismAndResume:
    def test_rerun_bit_identical(self, tmp_path):
        cfg = toy_cfg(steps=5)
        data = scenes(cfg, 2)
        for d in ("a", "b"):
            train(cfg, data, tmp_path / d / "ckpt",
                  log_path=tmp_path / d / "log.csv")
        assert read_tree(tmp_path / "a") == read_tree(tmp_path / "b")

    def test_resume_bit_identical(self, tmp_path):
        data = scenes(toy_cfg(), 2)
        train(toy_cfg(steps=6), data, tmp_path / "full" / "ckpt",
              log_path=tmp_path / "full" / "log.csv")

        train(toy_cfg(steps=3), data, tmp_path / "half" / "ckpt",
              log_path=tmp_path / "half" / "log.csv")
        train(toy_cfg(steps=6), data, tmp_path / "half" / "ckpt",
              resume_from=tmp_path / "half" / "ckpt",
              log_path=tmp_path / "half" / "log.csv")
        assert read_tree(tmp_path / "full") == read_tree(tmp_path / "half")

    def test_resume_past_configured_steps(self, tmp_path):
        cfg = toy_cfg(steps=2)
        data = scenes(cfg, 1)
        train(cfg, data, tmp_path / "ckpt")
        with pytest.raises(ValueError, match="past"):
            train(toy_cfg(steps=1), data, tmp_path / "ckpt2",
                  resume_from=tmp_path / "ckpt")


class TestNaNAbort:
    def test_poisoned_weights_abort_with_dump(self, tmp_path):
        cfg = toy_cfg(steps=2)
        data = scenes(cfg, 1)
        model = build_model(cfg)
        opt = Adam(model.named_parameters(), lr=cfg.lr)
        next(iter(dict(model.named_parameters()).values())).data[:] = np.nan
        save_checkpoint(tmp_path / "bad", model, opt, step=0)

        with pytest.raises(RuntimeError, match="non-finite loss at step 0"):
            train(cfg, data, tmp_path / "ckpt",
                  resume_from=tmp_path / "bad")
        dump = tmp_path / "ckpt" / "nan_dump"
        assert (dump / "scene.aopc").exists()
        assert (dump / "scene.aopl").exists()
        info = (dump / "info.txt").read_text()
        assert "step = 0" in info and "scene = 0" in info
