import json
import math
import shutil

import numpy as np
import pytest

from ads3d import cli, io
from ads3d.cli import (ConfigError, RunConfig, build_parser, build_run_config,
                       main, parse_config_file, run_fit)
from ads3d.scoring import load_bank
from ads3d.synth import SynthSpec, generate_dataset

N_TRAIN, N_GOOD, N_ANOM = 3, 2, 2
SIZE = 56  # 7x7 patch grid for the pixel-space descriptors


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    spec = SynthSpec(n_train=N_TRAIN, n_test_good=N_GOOD, n_test_anom=N_ANOM,
                     size=SIZE, anomaly_kind="geometric_dent",
                     surface_kind="bumpy_plane", seed=11)
    generate_dataset(spec, root)
    return root


def write_config(path, root, out, **extra):
    pairs = {"dataset_root": str(root), "method": "raw",
             "output_dir": str(out), "eval_resolution": SIZE,
             "preprocess": "false", f"preprocess.target_size": SIZE}
    pairs.update(extra)
    path.write_text("".join(f"{k}={v}\n" for k, v in pairs.items()))
    return path


# ---------------------------------------------------------------------------
# configuration

def test_parse_config_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\n\nmethod = hog\nseed=5\n")
    assert parse_config_file(p) == {"method": "hog", "seed": "5"}
    p.write_text("method hog\n")
    with pytest.raises(ConfigError):
        parse_config_file(p)


def test_flags_override_config_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("dataset_root=/data\nmethod=hog\nseed=5\n"
                 "preprocess.dbscan_eps=0.008\nfpfh.radius=0.1\n")
    args = build_parser().parse_args(["fit", "--config", str(p),
                                      "--method", "raw"])
    cfg = build_run_config(args)
    assert cfg.method == "raw"  # flag wins
    assert cfg.seed == 5
    assert cfg.preprocess.dbscan_eps == pytest.approx(0.008)
    assert cfg.fpfh.radius == pytest.approx(0.1)
    assert cfg.preprocess.enabled


def test_preprocess_toggle_and_unknown_keys(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("dataset_root=/data\npreprocess=false\n")
    cfg = build_run_config(build_parser().parse_args(["fit", "--config", str(p)]))
    assert not cfg.preprocess.enabled
    # explicit flag beats the file
    cfg = build_run_config(build_parser().parse_args(
        ["fit", "--config", str(p), "--preprocess"]))
    assert cfg.preprocess.enabled

    p.write_text("dataset_root=/data\nbogus_key=1\n")
    with pytest.raises(ConfigError):
        build_run_config(build_parser().parse_args(["fit", "--config", str(p)]))
    p.write_text("dataset_root=/data\npreprocess.not_a_field=1\n")
    with pytest.raises(ConfigError):
        build_run_config(build_parser().parse_args(["fit", "--config", str(p)]))


def test_run_config_validation():
    ok = dict(dataset_root="/data")
    with pytest.raises(ConfigError):
        RunConfig(method="pca", **ok)
    with pytest.raises(ConfigError):
        RunConfig(k=0, **ok)
    with pytest.raises(ConfigError):
        RunConfig(coreset_ratio=0.0, **ok)
    with pytest.raises(ConfigError):
        RunConfig(coreset_ratio=1.5, **ok)
    with pytest.raises(ConfigError):
        RunConfig(eval_resolution=100, **ok)
    with pytest.raises(ConfigError):
        RunConfig()
    RunConfig(eval_resolution=0, **ok)


# ---------------------------------------------------------------------------
# fit

def test_fit_bank_shape_and_meta(dataset, tmp_path):
    cfg_file = write_config(tmp_path / "run.cfg", dataset, tmp_path / "out")
    assert main(["fit", "--config", str(cfg_file)]) == 0
    bank, meta = load_bank(tmp_path / "out" / "banks" / "synth.bank.adtn")
    patches = (SIZE // 8) ** 2
    assert bank.vectors.shape == (N_TRAIN * patches, 64)
    assert bank.method == "raw"
    assert meta["method"] == "raw" and meta["class"] == "synth"
    assert meta["seed"] == "0"


def test_fit_coreset_ratio_row_count(dataset, tmp_path):
    cfg_file = write_config(tmp_path / "run.cfg", dataset, tmp_path / "out",
                            coreset_ratio=0.1)
    assert main(["fit", "--config", str(cfg_file)]) == 0
    bank, _ = load_bank(tmp_path / "out" / "banks" / "synth.bank.adtn")
    assert len(bank) == math.ceil(0.1 * N_TRAIN * (SIZE // 8) ** 2)


# ---------------------------------------------------------------------------
# eval

def run_fit_eval(dataset, out, cfg_file, monkeypatch, threads):
    monkeypatch.setenv("ADS3D_THREADS", str(threads))
    assert main(["fit", "--config", str(cfg_file)]) == 0
    assert main(["eval", "--config", str(cfg_file)]) == 0


def test_eval_report_and_artifacts(dataset, tmp_path, monkeypatch):
    out = tmp_path / "out"
    cfg_file = write_config(tmp_path / "run.cfg", dataset, out)
    run_fit_eval(dataset, out, cfg_file, monkeypatch, threads=2)

    report = json.loads((out / "report.json").read_text())
    res = report["per_class"]["synth"]
    for key in ("i_roc", "p_roc", "pro"):
        assert 0.0 <= res[key] <= 1.0
        assert report["mean"][key] == res[key]  # single class
    assert report["config"]["method"] == "raw"

    heatmaps = sorted(p.name for p in (out / "heatmaps" / "synth").iterdir())
    assert heatmaps == ["geometric_dent_000.png", "geometric_dent_001.png",
                        "good_000.png", "good_001.png"]
    first = io.read_image_u8(out / "heatmaps" / "synth" / heatmaps[0])
    assert first.shape[:2] == (SIZE, SIZE)

    csv = (out / "curves" / "synth_pro.csv").read_text().splitlines()
    assert csv[0] == "fpr,pro"
    assert 2 <= len(csv) <= 2001


def test_fit_eval_bytes_reproducible_across_threads(dataset, tmp_path,
                                                    monkeypatch):
    outs = []
    for name, threads in (("a", 1), ("b", 3)):
        out = tmp_path / name
        cfg_file = write_config(tmp_path / f"{name}.cfg", dataset, out)
        run_fit_eval(dataset, out, cfg_file, monkeypatch, threads=threads)
        outs.append(out)
    a, b = outs
    rel = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert rel == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for r in rel:
        assert (a / r).read_bytes() == (b / r).read_bytes(), r


def test_eval_at_native_resolution(dataset, tmp_path):
    out = tmp_path / "out"
    cfg_file = write_config(tmp_path / "run.cfg", dataset, out)
    assert main(["fit", "--config", str(cfg_file)]) == 0
    assert main(["eval", "--config", str(cfg_file), "--full_res"]) == 0
    heat = io.read_image_u8(out / "heatmaps" / "synth" / "good_000.png")
    assert heat.shape[:2] == (SIZE, SIZE)  # native mask resolution


# ---------------------------------------------------------------------------
# failure modes and exit codes

def test_exit_code_config_error():
    assert main(["fit", "--method", "raw"]) == cli.EXIT_CONFIG  # no root


def test_exit_code_data_error(tmp_path):
    assert main(["fit", "--dataset_root", str(tmp_path / "nope"),
                 "--method", "raw"]) == cli.EXIT_DATA


def test_eval_before_fit_is_a_data_error(dataset, tmp_path):
    cfg_file = write_config(tmp_path / "run.cfg", dataset, tmp_path / "out")
    assert main(["eval", "--config", str(cfg_file)]) == cli.EXIT_DATA


def test_method_mismatch_between_fit_and_eval(dataset, tmp_path):
    cfg_file = write_config(tmp_path / "run.cfg", dataset, tmp_path / "out")
    assert main(["fit", "--config", str(cfg_file)]) == 0
    assert main(["eval", "--config", str(cfg_file),
                 "--method", "hog"]) == cli.EXIT_CONFIG


def test_bad_thread_env(dataset, tmp_path, monkeypatch):
    cfg_file = write_config(tmp_path / "run.cfg", dataset, tmp_path / "out")
    monkeypatch.setenv("ADS3D_THREADS", "many")
    assert main(["fit", "--config", str(cfg_file)]) == cli.EXIT_CONFIG


def test_degenerate_metrics_exit_code(dataset, tmp_path):
    root = tmp_path / "data"
    shutil.copytree(dataset, root)
    shutil.rmtree(root / "synth" / "test" / "geometric_dent")
    out = tmp_path / "out"
    cfg_file = write_config(tmp_path / "run.cfg", root, out)
    assert main(["fit", "--config", str(cfg_file)]) == 0
    assert main(["eval", "--config", str(cfg_file)]) == cli.EXIT_DEGENERATE
    # surfaced, not crashed: the report still exists with null metrics
    report = json.loads((out / "report.json").read_text())
    assert report["per_class"]["synth"] == {"i_roc": None, "p_roc": None,
                                            "pro": None}


def test_deep_method_error_names_the_exporter(dataset, tmp_path):
    cfg_file = write_config(tmp_path / "run.cfg", dataset, tmp_path / "out",
                            method="rgb_deep")
    with pytest.raises(io.DataError, match="ads3d-export"):
        run_fit(build_run_config(build_parser().parse_args(
            ["fit", "--config", str(cfg_file)])))
    assert main(["fit", "--config", str(cfg_file)]) == cli.EXIT_DATA


# ---------------------------------------------------------------------------
# synth / convert subcommands

def test_synth_subcommand_writes_loadable_tree(tmp_path):
    root = tmp_path / "ds"
    assert main(["synth", "--out", str(root), "--n_train", "1",
                 "--n_test_good", "1", "--n_test_anom", "1",
                 "--size", "56", "--seed", "4"]) == 0
    ids = io.find_sample_ids(root, "synth", "test")
    assert len(ids) == 2
    sample = io.load_sample(root, "synth", "train", "good/000")
    assert sample.cloud.grid.shape == (56, 56, 3)


def test_convert_roundtrip(tmp_path):
    img = np.arange(56 * 56 * 3, dtype=np.uint8).reshape(56, 56, 3)
    src = tmp_path / "img.adtn"
    io.write_tensor(img, src)
    png = tmp_path / "img.png"
    back = tmp_path / "back.adtn"
    assert main(["convert", str(src), str(png)]) == 0
    assert main(["convert", str(png), str(back)]) == 0
    assert np.array_equal(io.read_tensor(back), img)


def test_convert_rejects_bad_inputs(tmp_path):
    f32 = tmp_path / "f.adtn"
    io.write_tensor(np.zeros((4, 4), dtype=np.float32), f32)
    assert main(["convert", str(f32), str(tmp_path / "f.png")]) == cli.EXIT_CONFIG
    assert main(["convert", str(f32), str(tmp_path / "f.jpg")]) == cli.EXIT_CONFIG
    assert main(["convert", str(tmp_path / "missing.png"),
                 str(tmp_path / "x.adtn")]) == cli.EXIT_DATA
