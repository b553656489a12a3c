import json
import time

import numpy as np
import pytest

from emoe.checkpoint import expert_file
from emoe.cli import main

TINY_SET = ["--set", "slice_size=64", "--set", "backbone_epochs=2", "--set", "expert_epochs=2",
            "--set", "n_in_dist=6", "--set", "n_ood_remap=6", "--set", "n_ood_unseen=6",
            "--set", "step_series_prompts=2"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    args = ["--checkpoint-dir", str(root / "ckpt"), "--out-dir", str(root / "out")] + TINY_SET
    assert main(["train"] + args) == 0
    return root, args


def files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


class TestTrain:
    def test_five_files_per_bundle(self, trained):
        root, _ = trained
        for variant in ("distinct", "similar"):
            names = sorted(p.name for p in (root / "ckpt" / variant).iterdir())
            assert names == sorted(["backbone.emoe"] + [expert_file(i) for i in range(4)])
        assert json.loads((root / "out" / "train_log.json").read_text())["backbone"]["epoch_losses"]

    def test_rerun_byte_identical(self, trained, tmp_path):
        root, _ = trained
        assert main(["train", "--checkpoint-dir", str(tmp_path / "ckpt"), "--out-dir", str(tmp_path / "out")]
                    + TINY_SET) == 0
        assert files(tmp_path / "ckpt") == files(root / "ckpt")


class TestScore:
    def test_deterministic_output(self, trained, capsys):
        _, args = trained
        outs = []
        for _ in range(2):
            assert main(["score", "a red circle big"] + args) == 0
            outs.append(capsys.readouterr().out)
        assert outs[0] == outs[1]
        lines = dict(l.split(": ", 1) for l in outs[0].splitlines())
        assert lines["space"] == "mid_post" and lines["decision"] == "proceed"
        assert float(lines["reported"]) == pytest.approx(float(lines["eu"]) * np.sqrt(int(lines["d"])), rel=1e-15)

    def test_fast_threshold_zero_halts(self, trained, tmp_path, capsys):
        _, args = trained
        out = tmp_path / "z.npy"
        assert main(["score", "a red circle", "--fast", "--threshold", "0", "--output", str(out)] + args) == 3
        assert "decision: halt" in capsys.readouterr().out
        assert not out.exists()

    def test_fast_proceeds_and_emits(self, trained, tmp_path):
        _, args = trained
        out = tmp_path / "z.npy"
        assert main(["score", "a red circle", "--fast", "--threshold", "1e9", "--output", str(out)] + args) == 0
        assert np.load(out).shape == (2, 8, 8)

    def test_all_spaces_single_pass(self, trained, capsys):
        _, args = trained
        assert main(["score", "a blue square", "--all-spaces"] + args) == 0
        out = capsys.readouterr().out
        assert "forward_passes: 1" in out
        assert "reported[mid_pre]" in out and "reported[z_next]" in out

    def test_flags_after_or_before_command(self, trained, capsys):
        _, args = trained
        main(["score", "a red circle"] + args)
        a = capsys.readouterr().out
        main(args + ["score", "a red circle"])
        assert capsys.readouterr().out == a

    def test_missing_checkpoint_exit_2(self, tmp_path, capsys):
        assert main(["score", "a red circle", "--checkpoint-dir", str(tmp_path / "none")]) == 2
        assert "missing checkpoint" in capsys.readouterr().err

    def test_corrupt_checkpoint_exit_2(self, trained, tmp_path, capsys):
        root, _ = trained
        import shutil
        shutil.copytree(root / "ckpt", tmp_path / "ckpt")
        p = tmp_path / "ckpt" / "distinct" / expert_file(0)
        data = bytearray(p.read_bytes())
        data[100] ^= 0xFF
        p.write_bytes(bytes(data))
        assert main(["score", "a red circle", "--checkpoint-dir", str(tmp_path / "ckpt")] + TINY_SET) == 2
        assert "CRC" in capsys.readouterr().err

    def test_usage_errors(self, tmp_path):
        assert main(["score"]) == 2
        assert main(["bogus"]) == 2
        assert main(["score", "x", "--set", "M=0", "--checkpoint-dir", str(tmp_path)]) == 2
        assert main(["score", "x", "--config", str(tmp_path / "missing.json")]) == 2


class TestGenerate:
    def test_rollout_one_latent_per_expert(self, trained, tmp_path, capsys):
        _, args = trained
        out = tmp_path / "r.npy"
        assert main(["generate", "a red circle", "--rollout", "--output", str(out)] + args) == 0
        assert np.load(out).shape == (4, 2, 8, 8)
        assert capsys.readouterr().out.count("alignment[") == 4


class TestExperiment:
    def test_smoke_experiment(self, trained, tmp_path, capsys):
        root, _ = trained
        args = ["--checkpoint-dir", str(root / "ckpt")] + TINY_SET
        t0 = time.perf_counter()
        assert main(["experiment", "--out-dir", str(tmp_path / "a")] + args) == 0
        assert time.perf_counter() - t0 < 300
        assert "ensemble subsets: 11" in capsys.readouterr().out
        assert main(["experiment", "--out-dir", str(tmp_path / "b"), "--threads", "2"] + args) == 0
        a, b = files(tmp_path / "a"), files(tmp_path / "b")
        # config.json records the paths and thread count, which differ on purpose
        assert {k: v for k, v in a.items() if k != "config.json"} == {k: v for k, v in b.items()
                                                                       if k != "config.json"}
        assert {"config.json", "report.json", "ablations/ablations.json", "ablations/spaces.csv"} <= set(a)
        rep = json.loads(a["report.json"])
        assert rep["seed"] == 0 and len(rep["per_prompt"]) == 18

    def test_ablate_without_similar(self, trained, tmp_path):
        root, _ = trained
        import shutil
        shutil.copytree(root / "ckpt" / "distinct", tmp_path / "ckpt" / "distinct")
        assert main(["ablate", "--checkpoint-dir", str(tmp_path / "ckpt"), "--out-dir", str(tmp_path / "o")]
                    + TINY_SET) == 0
        rep = json.loads((tmp_path / "o" / "ablations" / "ablations.json").read_text())
        assert rep["similar_experts"] is None and not (tmp_path / "o" / "report.json").exists()


class TestGPProbe:
    def test_outputs(self, tmp_path, capsys):
        assert main(["gp-probe", "--sizes", "2,8,32", "--repeats", "3", "--reference", "500",
                     "--out-dir", str(tmp_path)]) == 0
        summary = json.loads((tmp_path / "gp_probe.json").read_text())
        assert summary["sizes"] == [2, 8, 32] and summary["loglog_slope"] < 0
        assert len((tmp_path / "gp_probe.csv").read_text().splitlines()) == 1 + 9

    def test_bad_sizes(self, tmp_path):
        assert main(["gp-probe", "--sizes", "2,x", "--out-dir", str(tmp_path)]) == 2
