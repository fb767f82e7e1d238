import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from faew import checkpoint as ckpt
from faew import ops
from faew.cli import ORACLE_KEY, run
from faew.tensor import Tensor

TINY_CONFIG = """\
# 16 px tiles and a small encoder keep the CLI tests fast
gen.image_size = 16
gen.buildings_min = 1
gen.buildings_max = 3
gen.size_min = 3
gen.size_max = 6
gen.shift_range = 1
encoder.image_size = 16
encoder.patch = 4
encoder.dim = 8
encoder.blocks = LG
encoder.window = 2
encoder.heads = 2
train.batch_size = 2
train.eval_batch = 4
bench.n_train = 4
bench.n_val = 2
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return path


@pytest.fixture
def data(tmp_path, config):
    assert run(["gen-data", "--config", str(config), "--out", str(tmp_path / "data")]) == 0
    return tmp_path / "data"


@pytest.fixture
def oracle_ckpt(tmp_path):
    path = tmp_path / "oracle.faew"
    ckpt.checkpoint_save({ORACLE_KEY: Tensor(np.zeros(1, np.float32))}, path)
    return path


def tree_bytes(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*.png"))}


class TestUsage:
    def test_no_command(self, capsys):
        assert run([]) == 2

    def test_unknown_flag(self, capsys):
        assert run(["train", "--bogus"]) == 2

    def test_unknown_config_key(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("train.learning_rate = 0.1\n")
        assert run(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2

    def test_missing_config_file(self, tmp_path):
        assert run(["gen-data", "--config", str(tmp_path / "nope.cfg")]) == 2

    def test_bad_seed_list(self, config):
        assert run(["ablate", "--config", str(config), "--seeds", "a,b"]) == 2

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "faew", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "gradcheck" in proc.stdout


class TestGenData:
    def test_twice_gives_identical_trees(self, tmp_path, config, data):
        assert run(["gen-data", "--config", str(config), "--out", str(tmp_path / "again")]) == 0
        first, second = tree_bytes(data), tree_bytes(tmp_path / "again")
        assert len(first) == 3 * 6 and first == second

    def test_seed_changes_content(self, tmp_path, config, data):
        assert run(["gen-data", "--config", str(config), "--seed", "8", "--out", str(tmp_path / "s8")]) == 0
        assert tree_bytes(data) != tree_bytes(tmp_path / "s8")

    def test_counts_from_flags(self, tmp_path, config):
        assert run(["gen-data", "--config", str(config), "--train", "1", "--val", "3",
                    "--out", str(tmp_path / "d")]) == 0
        assert len(list((tmp_path / "d" / "val" / "A").iterdir())) == 3


class TestEvalRender:
    def test_oracle_scores_100(self, data, oracle_ckpt, capsys, tmp_path):
        assert run(["eval", "--data", str(data), "--ckpt", str(oracle_ckpt), "--out", str(tmp_path / "e")]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[-1] == "100.00\t100.00\t100.00\t100.00"
        assert (tmp_path / "e" / "metrics.tsv").read_text().splitlines()[1].endswith("100.00")

    def test_render_oracle_has_no_errors(self, data, oracle_ckpt, tmp_path):
        out = tmp_path / "r"
        assert run(["render", "--data", str(data / "val"), "--ckpt", str(oracle_ckpt), "--out", str(out)]) == 0
        pngs = sorted(out.iterdir())
        assert len(pngs) == 2
        for p in pngs:
            img = np.array(Image.open(p))
            colours = {tuple(c) for c in img.reshape(-1, 3)}
            assert colours <= {(0, 0, 0), (255, 255, 255)}

    def test_corrupt_checkpoint_fails(self, data, tmp_path):
        bad = tmp_path / "bad.faew"
        bad.write_bytes(b"FAEW\x01\x00")
        assert run(["eval", "--data", str(data), "--ckpt", str(bad)]) == 1

    def test_missing_dataset_fails(self, oracle_ckpt, tmp_path):
        assert run(["eval", "--data", str(tmp_path / "none"), "--ckpt", str(oracle_ckpt)]) == 1


class TestTrainAblate:
    def test_train_then_eval(self, config, data, tmp_path, capsys):
        run_dir = tmp_path / "run"
        assert run(["train", "--config", str(config), "--data", str(data), "--steps", "2",
                    "--out", str(run_dir)]) == 0
        assert (run_dir / "model.faew").exists()
        assert len((run_dir / "trace.tsv").read_text().splitlines()) == 2
        assert run(["eval", "--data", str(data), "--ckpt", str(run_dir / "model.faew")]) == 0
        assert capsys.readouterr().out.splitlines()[-2] == "Pr\tRc\tF1\tIoU"

    def test_ablate_writes_table(self, config, tmp_path, capsys):
        out = tmp_path / "ab"
        assert run(["ablate", "--config", str(config), "--kind", "spectral", "--seeds", "0",
                    "--steps", "1", "--out", str(out)]) == 0
        rows = (out / "ablation_spectral.tsv").read_text().splitlines()
        assert [r.split("\t")[0] for r in rows] == ["row", "real", "imag", "amplitude", "off"]


class TestChecks:
    def test_gradcheck_subset(self, capsys):
        assert run(["gradcheck", "--only", "add", "conv2d"]) == 0
        assert "ok" in capsys.readouterr().out

    def test_gradcheck_unknown_entry(self):
        assert run(["gradcheck", "--only", "teleport"]) == 2

    def test_gradcheck_empty_registry(self):
        assert run(["gradcheck", "--only"]) == 2

    def test_selftest_passes(self, capsys):
        assert run(["selftest"]) == 0

    def test_selftest_catches_a_broken_unfold(self, monkeypatch, capsys):
        real = ops.unfold3x3

        def shifted(x):
            out = real(x)
            return Tensor(np.roll(out.data, 1, axis=2))

        monkeypatch.setattr(ops, "unfold3x3", shifted)
        assert run(["selftest"]) == 1
        assert "unfold" in capsys.readouterr().out
