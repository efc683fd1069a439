import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest
import tomli_w
from PIL import Image

from srfield import cli
from srfield.metrics import EVAL_HEADER, UPSCALE_HEADER
from srfield.pipeline import REPORT_HEADER
from srfield.radiance import VoxelField
from srfield.scenegen import MultiViewDataset

TINY = {
    "dataset": {"n_train_views": 3, "n_eval_views": 5, "lr_res": 8},
    "schedule": {"T": 32, "beta_end": 0.1},
    "denoiser": {"epochs": 2, "batch_size": 8, "hidden": 6, "dilations": [1, 2], "emb_dim": 8,
                 "corpus_scenes": 2, "corpus_views": 1, "corpus_lr_res": 8, "patch_lr": 4, "patches_per_view": 4},
    "distill": {"steps": 3},
    "pretrain": {"resolution": 8, "steps": 20, "rays_per_step": 128, "n_samples": 16},
    "sync": {"steps": 10, "rays_per_step": 128, "n_samples": 16},
    "pipeline": {"n_cycles": 2, "render_samples": 16},
    "upscale2d": {"n_images": 2, "lr_res": 8},
    "eval": {"n_views": 4, "views_shown": 2, "n_samples": 16},
}


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Config file, dataset and a briefly trained denoiser shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    conf = root / "tiny.toml"
    conf.write_text(tomli_w.dumps(TINY))
    assert cli.main(["gen-scene", "--config", str(conf), "--seed", "7", "--out", str(root / "data")]) == 0
    assert cli.main(["train-denoiser", "--config", str(conf), "--out", str(root / "den")]) == 0
    return root, conf


def test_gen_scene_byte_identical(work, tmp_path):
    _, conf = work
    for name in ("a", "b"):
        assert cli.main(["gen-scene", "--config", str(conf), "--seed", "7", "--out", str(tmp_path / name)]) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")
    assert _tree(tmp_path / "a") == _tree(work[0] / "data")


def test_gen_scene_meta_roundtrip(work, tmp_path):
    root, _ = work
    ds = MultiViewDataset.load(root / "data")
    ds.save(tmp_path / "again")
    again = MultiViewDataset.load(tmp_path / "again")
    assert json.loads((tmp_path / "again" / "meta.json").read_text()) == json.loads((root / "data" / "meta.json").read_text())
    assert again.meta() == ds.meta()
    assert ds.scene.seed == 7


def test_missing_out(monkeypatch):
    monkeypatch.delenv(cli.OUTPUT_ROOT_ENV, raising=False)
    assert cli.main(["gen-scene", "--seed", "1"]) == 2


def test_output_root_env(work, monkeypatch, tmp_path):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
    assert cli.main(["gen-scene", "--config", str(work[1]), "--seed", "2"]) == 0
    assert (tmp_path / "gen-scene" / "meta.json").exists()


def test_resolved_config_echoed(work):
    root, _ = work
    cfg = cli.tomllib.loads((root / "data" / "config.toml").read_text())
    assert cfg["seed"] == 7 and cfg["dataset"]["lr_res"] == 8
    assert cfg["eval"]["n_samples"] == 16 and cfg["sync"]["steps"] == 10


def test_precedence():
    cfg = cli.merge(cli.default_config(), {"sync": {"steps": 5}})
    cfg = cli.merge(cfg, cli.parse_override("sync.steps=9"))
    assert cfg["sync"]["steps"] == 9
    assert cli.default_config()["eval"]["n_views"] == 100
    assert cli.default_config()["pipeline"]["n_cycles"] == 4


def test_unknown_key(tmp_path):
    assert cli.main(["gen-scene", "--set", "dataset.bogus=1", "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[sync]\nstepz = 3\n")
    assert cli.main(["gen-scene", "--config", str(bad), "--out", str(tmp_path)]) == 2


def test_type_mismatch(tmp_path):
    assert cli.main(["gen-scene", "--set", "dataset.lr_res=\"big\"", "--out", str(tmp_path)]) == 2


def test_unknown_command():
    assert cli.main(["render-everything"]) == 2


class TestTrainDenoiser:
    def test_losses_every_epoch(self, work):
        rows = _rows(work[0] / "den" / "losses.csv")
        assert [r["epoch"] for r in rows] == ["0", "1"]
        assert set(rows[0]) == {"epoch", "train_loss", "val_loss"}

    def test_resume_matches(self, work, tmp_path):
        root, conf = work
        out = tmp_path / "den"
        assert cli.main(["train-denoiser", "--config", str(conf), "--out", str(out), "--stop-after", "1"]) == 0
        assert len(_rows(out / "losses.csv")) == 1
        assert cli.main(["train-denoiser", "--config", str(conf), "--out", str(out)]) == 0
        assert (out / "losses.csv").read_bytes() == (root / "den" / "losses.csv").read_bytes()
        assert (out / "denoiser.bin").read_bytes() == (root / "den" / "denoiser.bin").read_bytes()

    def test_schedule_mismatch_refused(self, work, tmp_path):
        root, conf = work
        out = tmp_path / "den"
        out.mkdir()
        for name in ("denoiser.bin", "denoiser.bin.opt.npz", "losses.csv"):
            (out / name).write_bytes((root / "den" / name).read_bytes())
        code = cli.main(["train-denoiser", "--config", str(conf), "--out", str(out), "--set", "schedule.T=40"])
        assert code == 2


class TestUpscale2d:
    def test_one_image_per_method(self, work, tmp_path):
        root, conf = work
        args = ["upscale2d", "--config", str(conf), "--denoiser", str(root / "den" / "denoiser.bin"),
                "--out", str(tmp_path)]
        assert cli.main(args) == 0
        pngs = sorted(p.name for p in tmp_path.glob("*.png"))
        assert pngs == ["ancestral.png", "rsd.png", "sds.png"]
        assert Image.open(tmp_path / "rsd.png").size == (2 * 32, 32)
        rows = _rows(tmp_path / "metrics.csv")
        assert tuple(rows[0]) == UPSCALE_HEADER and len(rows) == 6

    def test_subset_and_dataset_input(self, work, tmp_path):
        root, conf = work
        args = ["upscale2d", "--config", str(conf), "--denoiser", str(root / "den" / "denoiser.bin"),
                "--data", str(root / "data"), "--methods", "rsd", "--out", str(tmp_path)]
        assert cli.main(args) == 0
        assert [p.name for p in tmp_path.glob("*.png")] == ["rsd.png"]

    def test_unknown_method(self, work, tmp_path):
        root, conf = work
        args = ["upscale2d", "--config", str(conf), "--denoiser", str(root / "den" / "denoiser.bin"),
                "--methods", "rsd,magic", "--out", str(tmp_path)]
        assert cli.main(args) == 2

    def test_missing_denoiser(self, work, tmp_path):
        assert cli.main(["upscale2d", "--config", str(work[1]), "--out", str(tmp_path)]) == 2


def _i3ds(work, out, *extra):
    root, conf = work
    return cli.main(["i3ds", "--config", str(conf), "--data", str(root / "data"),
                     "--denoiser", str(root / "den" / "denoiser.bin"), "--out", str(out), *extra])


class TestI3ds:
    def test_zero_cycles_rejected(self, work, tmp_path):
        assert _i3ds(work, tmp_path, "--cycles", "0") == 2

    def test_interrupt_resume_bitwise(self, work, tmp_path):
        assert _i3ds(work, tmp_path / "full") == 0
        assert _i3ds(work, tmp_path / "cut", "--stop-after", "1") == 0
        assert len(_rows(tmp_path / "cut" / "reports.csv")) == 1
        assert _i3ds(work, tmp_path / "cut") == 0
        a, b = _tree(tmp_path / "full"), _tree(tmp_path / "cut")
        a.pop("timings.csv"), b.pop("timings.csv")
        assert a == b
        rows = _rows(tmp_path / "full" / "reports.csv")
        assert len(rows) == 2 and tuple(rows[0]) == REPORT_HEADER

    def test_field_lr_flag(self, work, tmp_path):
        root, conf = work
        assert cli.main(["pretrain-lr", "--config", str(conf), "--data", str(root / "data"),
                         "--out", str(tmp_path / "lr")]) == 0
        assert _i3ds(work, tmp_path / "run", "--cycles", "1", "--field-lr", str(tmp_path / "lr" / "lr.field")) == 0
        assert (tmp_path / "run" / "ckpt" / "lr.field").read_bytes() == (tmp_path / "lr" / "lr.field").read_bytes()

    def test_dataset_untouched(self, work, tmp_path):
        before = _tree(work[0] / "data")
        assert _i3ds(work, tmp_path, "--cycles", "1") == 0
        assert _tree(work[0] / "data") == before


class TestEval:
    def test_rows_and_grid(self, work, tmp_path):
        root, conf = work
        assert _i3ds(work, tmp_path / "run") == 0
        assert cli.main(["eval", "--config", str(conf), "--data", str(root / "data"), "--run", str(tmp_path / "run"),
                         "--out", str(tmp_path / "ev")]) == 0
        rows = _rows(tmp_path / "ev" / "eval.csv")
        assert tuple(rows[0]) == EVAL_HEADER
        assert [(r["method"], r["cycle"]) for r in rows] == [("lr", "0"), ("sr", "2")]
        # 2 methods x 2 shown views of 32x32 HR renders
        assert Image.open(tmp_path / "ev" / "grid.png").size == (2 * 32, 2 * 32)
        VoxelField.load(tmp_path / "run" / "ckpt" / "cycle_2.field")

    def test_views_flag(self, work, tmp_path):
        root, conf = work
        assert _i3ds(work, tmp_path / "run", "--cycles", "1") == 0
        assert cli.main(["eval", "--config", str(conf), "--data", str(root / "data"), "--run", str(tmp_path / "run"),
                         "--views", "2", "--out", str(tmp_path / "ev")]) == 0
        assert len(_rows(tmp_path / "ev" / "eval.csv")) == 2

    def test_empty_run(self, work, tmp_path):
        root, conf = work
        (tmp_path / "run").mkdir()
        assert cli.main(["eval", "--config", str(conf), "--data", str(root / "data"), "--run", str(tmp_path / "run"),
                         "--out", str(tmp_path / "ev")]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "srfield.cli", "gen-scene"], capture_output=True, text=True,
                          env={"PATH": "/usr/bin:/bin"}, cwd=tmp_path)
    assert proc.returncode == 2
    assert "--out" in proc.stderr
