"""End-to-end command-line tests at toy scale."""

import json
import math
import os

import numpy as np
import pytest

from panodet.cli import main
from panodet.config import RunConfig, save_config
from panodet.serial import read_manifest

TOY = dict(grid_h=32, grid_w=32, rv_h=16, rv_w=64, c0=2, c1=3, c2=4,
           pan_w1=3, pan_w2=4, pan_w3=5, det_trunk=6,
           sc_width1=4, sc_width2=4, sc_n0=1, sc_n1=1, sc_n2=1,
           k_s1=4, k_s2=4, scene_beams=12, scene_azimuth=90, steps=2)


@pytest.fixture()
def toy_config(tmp_path):
    path = tmp_path / "toy.cfg"
    save_config(RunConfig(**TOY), path)
    return str(path)


def read_tree(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            p = os.path.join(dirpath, name)
            with open(p, "rb") as f:
                out[os.path.relpath(p, root)] = f.read()
    return out


class TestGen:
    def test_zero_scenes_manifest_only(self, toy_config, tmp_path):
        out = tmp_path / "data"
        assert main(["gen", "--config", toy_config, "--out", str(out),
                     "--scenes", "0"]) == 0
        manifest = json.loads((out / "dataset.json").read_text())
        assert manifest["n_scenes"] == 0
        assert manifest["scenes"] == []
        assert not list(out.glob("*.aopc"))

    def test_same_seed_identical_bytes(self, toy_config, tmp_path):
        for d in ("a", "b"):
            assert main(["gen", "--config", toy_config,
                         "--out", str(tmp_path / d), "--scenes", "3"]) == 0
        assert read_tree(tmp_path / "a") == read_tree(tmp_path / "b")

    def test_jobs_identical_bytes(self, toy_config, tmp_path):
        if not hasattr(os, "fork"):
            pytest.skip("no fork on this platform")
        assert main(["gen", "--config", toy_config,
                     "--out", str(tmp_path / "s"), "--scenes", "3"]) == 0
        assert main(["gen", "--config", toy_config, "--jobs", "2",
                     "--out", str(tmp_path / "p"), "--scenes", "3"]) == 0
        assert read_tree(tmp_path / "s") == read_tree(tmp_path / "p")

    def test_manifest_scene_count(self, toy_config, tmp_path):
        out = tmp_path / "data"
        main(["gen", "--config", toy_config, "--out", str(out),
              "--scenes", "4"])
        manifest = json.loads((out / "dataset.json").read_text())
        assert manifest["n_scenes"] == 4
        assert len(manifest["scenes"]) == 4


class TestPipeline:
    def test_gen_train_eval_infer(self, toy_config, tmp_path, capsys):
        data, ckpt = str(tmp_path / "data"), str(tmp_path / "ckpt")
        metrics = str(tmp_path / "metrics.csv")
        assert main(["gen", "--config", toy_config, "--out", data,
                     "--scenes", "2"]) == 0
        assert main(["train", "--config", toy_config, "--data", data,
                     "--out", ckpt]) == 0
        assert os.path.exists(os.path.join(ckpt, "manifest.txt"))
        assert os.path.exists(os.path.join(ckpt, "training_log.csv"))

        assert main(["eval", "--config", toy_config, "--data", data,
                     "--checkpoint", ckpt, "--out", metrics]) == 0
        lines = open(metrics).read().splitlines()
        assert lines[0] == "metric,class,value"
        assert any(line.startswith("pq,all,") for line in lines)

        inf = str(tmp_path / "inferred")
        assert main(["infer", "--config", toy_config, "--checkpoint", ckpt,
                     "--points", os.path.join(data, "scene_0000.aopc"),
                     "--out", inf, "--dump-images",
                     str(tmp_path / "imgs")]) == 0
        assert os.path.exists(os.path.join(inf, "boxes.csv"))
        assert os.path.exists(os.path.join(inf, "scene_0000.aopl"))
        assert os.path.exists(tmp_path / "imgs" / "heatmap_0000.pgm")
        out = capsys.readouterr().out
        assert "pq=" in out and "box(es)" in out

    def test_eval_jobs_flag(self, toy_config, tmp_path):
        if not hasattr(os, "fork"):
            pytest.skip("no fork on this platform")
        data, ckpt = str(tmp_path / "data"), str(tmp_path / "ckpt")
        main(["gen", "--config", toy_config, "--out", data, "--scenes", "2"])
        main(["train", "--config", toy_config, "--data", data, "--out", ckpt])
        m1, m2 = str(tmp_path / "m1.csv"), str(tmp_path / "m2.csv")
        assert main(["eval", "--config", toy_config, "--data", data,
                     "--checkpoint", ckpt, "--out", m1]) == 0
        assert main(["eval", "--config", toy_config, "--data", data,
                     "--checkpoint", ckpt, "--out", m2, "--jobs", "2"]) == 0
        assert open(m1).read() == open(m2).read()

    def test_ablation_flag_changes_checkpoint_manifest(self, toy_config,
                                                       tmp_path):
        data = str(tmp_path / "data")
        main(["gen", "--config", toy_config, "--out", data, "--scenes", "1"])
        main(["train", "--config", toy_config, "--data", data,
              "--out", str(tmp_path / "full")])
        main(["train", "--config", toy_config, "--no-ifr", "--data", data,
              "--out", str(tmp_path / "cut")])
        _, full = read_manifest(tmp_path / "full")
        _, cut = read_manifest(tmp_path / "cut")
        full_names = {n for k, n, _, _ in full if k == "param"}
        cut_names = {n for k, n, _, _ in cut if k == "param"}
        assert full_names - cut_names == {n for n in full_names
                                          if n.startswith("ifr.")}


class TestFlops:
    def parse(self, text):
        lines = text.splitlines()
        assert lines[0].startswith("section,name,c,")
        rows = []
        for line in lines[1:]:
            parts = line.split(",")
            rows.append(dict(zip(lines[0].split(","), parts)))
        return rows

    def test_comparison_values(self, capsys):
        assert main(["flops"]) == 0
        rows = self.parse(capsys.readouterr().out)
        by_key = {(r["name"], r["c"]): r for r in rows
                  if r["section"] == "comparison"}
        # documented small-width identity: 5/9 - 1/8
        r8 = by_key[("sc_block", "8")]
        assert abs(float(r8["mac_reduction_pct"])
                   - 100.0 * (5.0 / 9.0 - 1.0 / 8.0)) < 1e-9
        r128 = by_key[("sc_block", "128")]
        assert abs(float(r128["mac_reduction_pct"]) - 54.8) <= 1.0
        assert abs(float(r128["param_reduction_pct"]) - 54.6) <= 1.0
        conv = by_key[("conv3x3", "32")]
        assert float(conv["param_reduction_pct"]) == 0.0

    def test_backbone_total_is_sum(self, capsys, tmp_path):
        out = tmp_path / "flops.csv"
        assert main(["flops", "--out", str(out)]) == 0
        rows = self.parse(out.read_text())
        bb = [r for r in rows if r["section"] == "backbone"]
        total = [r for r in bb if r["name"] == "total"]
        layers = [r for r in bb if r["name"] != "total"]
        assert len(total) == 1 and layers
        for col in ("params", "macs_per_pos", "act_per_pos"):
            assert int(total[0][col]) == sum(int(r[col]) for r in layers)


class TestErrorContract:
    def check_error(self, capsys, argv, needle):
        assert main(argv) == 1
        err = capsys.readouterr().err
        assert err.startswith("panodet: error: ")
        assert err.strip().count("\n") == 0
        assert needle in err

    def test_missing_dataset(self, toy_config, tmp_path, capsys):
        self.check_error(capsys, ["eval", "--config", toy_config,
                                  "--data", str(tmp_path / "nope"),
                                  "--checkpoint", str(tmp_path / "c")],
                         "dataset.json")

    def test_unknown_config_key(self, tmp_path, capsys):
        self.check_error(capsys, ["gen", "--set", "bananas=3",
                                  "--out", str(tmp_path / "d")],
                         "unknown config key")

    def test_incompatible_checkpoint(self, toy_config, tmp_path, capsys):
        data, ckpt = str(tmp_path / "data"), str(tmp_path / "ckpt")
        main(["gen", "--config", toy_config, "--out", data, "--scenes", "1"])
        main(["train", "--config", toy_config, "--data", data, "--out", ckpt])
        self.check_error(capsys, ["eval", "--config", toy_config,
                                  "--set", "c1=4", "--data", data,
                                  "--checkpoint", ckpt, "--out",
                                  str(tmp_path / "m.csv")],
                         "incompatible")

    def test_unwritable_gen_path(self, toy_config, capsys):
        self.check_error(capsys, ["gen", "--config", toy_config,
                                  "--out", "/proc/definitely/not/writable",
                                  "--scenes", "0"],
                         "/proc")

    def test_no_command_exits_nonzero(self):
        with pytest.raises(SystemExit) as e:
            main([])
        assert e.value.code != 0
