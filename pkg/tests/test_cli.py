import csv
import os

import numpy as np
import pytest

from rotvit.cli import main
from rotvit.data import load_manifest

SMALL = [
    "--override", "epochs=1",
    "--override", "p_ids=2",
    "--override", "k_images=2",
    "--override", "backbone.image_h=32",
    "--override", "backbone.image_w=32",
    "--override", "backbone.stride=8",
    "--override", "backbone.dim=8",
    "--override", "backbone.heads=2",
    "--override", "backbone.depth=1",
    "--override", "rot.n_rotations=2",
    "--override", "data.num_train_ids=4",
    "--override", "data.num_test_ids=2",
    "--override", "data.images_per_id=4",
    "--override", "data.image_size=32",
    "--override", "data.queries_per_id=1",
]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_ds")
    assert main(["synth", "--out", str(root)] + SMALL) == 0
    return root


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("cli_run")
    code = main(["train", "--data", str(dataset), "--out", str(out)] + SMALL)
    assert code == 0
    return out


def test_synth_writes_dataset(dataset):
    man = load_manifest(dataset)
    assert len(man.records) == 6 * 4


def test_synth_seed_flag_changes_data(tmp_path, dataset):
    other = tmp_path / "seeded"
    assert main(["synth", "--out", str(other), "--seed", "9"] + SMALL) == 0
    name = sorted(os.listdir(dataset / "images"))[0]
    assert ((dataset / "images" / name).read_bytes()
            != (other / "images" / name).read_bytes())


def test_synth_deterministic_via_cli(tmp_path, dataset):
    twin = tmp_path / "twin"
    assert main(["synth", "--out", str(twin)] + SMALL) == 0
    for name in sorted(os.listdir(dataset / "images")):
        assert ((dataset / "images" / name).read_bytes()
                == (twin / "images" / name).read_bytes())


def test_train_outputs(run_dir):
    for name in ("config.cfg", "loss_log.csv", "checkpoint.rtrx",
                 "metrics.csv"):
        assert (run_dir / name).exists()
    lines = (run_dir / "loss_log.csv").read_text().splitlines()
    assert lines[0] == "epoch,l_ori,l_rot,l_inv,total,lr"
    assert len(lines) == 2


def test_eval_stdout_csv(run_dir, dataset, capsys):
    code = main(["eval", "--checkpoint", str(run_dir / "checkpoint.rtrx"),
                 "--data", str(dataset)])
    assert code == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "metric,value"
    table = dict(line.split(",", 1) for line in out[1:])
    assert 0.0 <= float(table["map"]) <= 1.0
    assert "cmc_1" in table


def test_eval_metrics_file_matches_training(run_dir, dataset, tmp_path,
                                            capsys):
    out_csv = tmp_path / "metrics.csv"
    main(["eval", "--checkpoint", str(run_dir / "checkpoint.rtrx"),
          "--data", str(dataset), "--out", str(out_csv)])
    capsys.readouterr()
    fresh = dict(list(csv.reader(open(out_csv)))[1:])
    stored = dict(list(csv.reader(open(run_dir / "metrics.csv")))[1:])
    assert np.isclose(float(fresh["map"]), float(stored["map"]), atol=1e-9)


def test_dump_embeddings(run_dir, dataset, tmp_path, capsys):
    out_csv = tmp_path / "emb.csv"
    code = main(["dump-embeddings",
                 "--checkpoint", str(run_dir / "checkpoint.rtrx"),
                 "--data", str(dataset), "--out", str(out_csv),
                 "--split", "both"])
    assert code == 0
    rows = list(csv.reader(open(out_csv)))
    assert rows[0][0] == "identity"
    assert len(rows) - 1 == 2 * 4  # 2 test ids x 4 images


def test_exit_code_config_error(capsys):
    code = main(["synth", "--out", "/tmp/x", "--override", "lambda=1.5"])
    assert code == 3
    assert "error:" in capsys.readouterr().err


def test_exit_code_unknown_key(capsys):
    code = main(["synth", "--out", "/tmp/x", "--override", "spin=1"])
    assert code == 3
    capsys.readouterr()


def test_exit_code_data_error(tmp_path, capsys):
    code = main(["train", "--data", str(tmp_path / "nowhere"),
                 "--out", str(tmp_path / "out")] + SMALL)
    assert code == 4
    capsys.readouterr()


def test_exit_code_bad_checkpoint(tmp_path, dataset, capsys):
    bad = tmp_path / "bad.rtrx"
    bad.write_bytes(b"JUNKJUNKJUNK")
    code = main(["eval", "--checkpoint", str(bad), "--data", str(dataset)])
    assert code == 4
    capsys.readouterr()


def test_compare_single_seed(tmp_path, dataset, capsys):
    out = tmp_path / "cmp"
    code = main(["compare", "--data", str(dataset), "--out", str(out),
                 "--seeds", "0"] + SMALL)
    assert code == 0
    text = capsys.readouterr().out
    assert "d_mean:" in text
    rows = list(csv.reader(open(out / "comparison.csv")))
    assert rows[0] == ["variant", "seed", "map", "rank1", "rank5",
                       "rank10", "minp"]
    variants = [r[0] for r in rows[1:]]
    for v in ("a", "b", "c", "d"):
        assert v in variants and f"{v}_mean" in variants
    for v in ("a", "b", "c", "d"):
        assert (out / f"{v}_seed0" / "checkpoint.rtrx").exists()
