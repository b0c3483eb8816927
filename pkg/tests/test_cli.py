import csv
import json

import numpy as np
import pytest
import yaml

from nightadapt import BoundingBox, FrameSequence, io
from nightadapt.cli import main
from nightadapt.discovery import DiscoveryConfig, discover_candidates, track_reward
from nightadapt.synthetic import make_corpus

from helpers import TINY_MODEL, TINY_SCENE
from oracles import brute_force_link

CONFIG = {
    "seed": 0,
    "model": TINY_MODEL.to_dict(),
    "train": {"epochs": 2, "steps_per_epoch": 2, "batch_size": 2, "base_lr_bridging": 0.001},
    "discovery": {"template_size": 32, "search_size": 64},
}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    for seq in make_corpus(2, "day", 0, TINY_SCENE):
        io.write_sequence(root / "day", seq)
    for seq in make_corpus(2, "night", 1, TINY_SCENE):
        io.write_sequence(root / "night_test", seq)
        io.write_sequence(root / "night", FrameSequence(seq.name, seq.frames, None))
    cfg = root / "config.yaml"
    cfg.write_text(yaml.safe_dump(CONFIG))
    return root


def _rows(path):
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["fly"]) == 1
    assert main(["eval", "--bogus"]) == 1
    assert main(["--help"]) == 0


def test_invalid_config_names_key(data, tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  batch_size: 0\n")
    code = main(["train", "--source", str(data / "day"), "--target", str(data / "night"),
                 "--config", str(bad), "--out", str(tmp_path / "run")])
    assert code == 2
    assert "train.batch_size" in capsys.readouterr().err


def test_missing_data_is_data_error(tmp_path):
    assert main(["attributes", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "a.csv")]) == 2


def test_discover_matches_brute_force(tmp_path):
    frames = []
    for t in range(3):
        img = np.zeros((64, 64, 3), np.uint8)
        img[20 + 2 * t:32 + 2 * t, 18 + 3 * t:30 + 3 * t] = 200
        frames.append(img)
    io.write_sequence(tmp_path / "vids", FrameSequence("square", frames))
    out = tmp_path / "disc"
    assert main(["discover", "--data", str(tmp_path / "vids"), "--out", str(out)]) == 0
    rows = _rows(out / "square.csv")
    assert [int(r["frame_index"]) for r in rows] == [0, 1, 2]
    cands = discover_candidates(frames, DiscoveryConfig())
    chosen = io.read_track_csv(out / "square.csv", 3)
    best = brute_force_link([[b.as_tuple() for b in f] for f in cands.boxes], 1.0)
    assert track_reward(chosen, 1.0) == best
    assert (out / "square" / "000000_z.png").exists() and (out / "square" / "000002_x.png").exists()


def _train(data, out, *flags):
    return main(["train", "--source", str(data / "day"), "--target", str(data / "night"),
                 "--config", str(data / "config.yaml"), "--out", str(out), *flags])


def test_train_outputs_and_determinism(data, tmp_path):
    assert _train(data, tmp_path / "r1") == 0
    assert _train(data, tmp_path / "r2") == 0
    run = tmp_path / "r1"
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["config"]["train"]["epochs"] == 2
    assert (run / "checkpoints" / "epoch_001.pt").exists() and (run / "checkpoints" / "epoch_002.pt").exists()
    rows = _rows(run / "losses.csv")
    assert len(rows) == 4 and all(r["l_d"] for r in rows)
    for r in rows:
        assert float(r["l_total"]) == float(r["l_gt"]) + 0.01 * float(r["l_adv"])
    assert (run / "losses.csv").read_bytes() == (tmp_path / "r2" / "losses.csv").read_bytes()


def test_train_no_da(data, tmp_path):
    assert _train(data, tmp_path / "r", "--no-da", "--random-crop", "--no-bridge") == 0
    rows = _rows(tmp_path / "r" / "losses.csv")
    assert all(float(r["l_adv"]) == 0.0 and r["l_d"] == "" for r in rows)
    kind, net, disc, _ = io.load_checkpoint(tmp_path / "r" / "checkpoints" / "epoch_002.pt")
    assert net.bridge is None and disc is None


def test_train_from_init(data, tmp_path):
    assert _train(data, tmp_path / "base", "--no-da", "--no-bridge") == 0
    init = tmp_path / "base" / "checkpoints" / "epoch_002.pt"
    assert _train(data, tmp_path / "ad", "--init", str(init)) == 0


def test_eval_oracle_is_perfect(data, tmp_path):
    ckpt = tmp_path / "oracle.pt"
    io.save_oracle_checkpoint(ckpt)
    out = tmp_path / "ev"
    assert main(["eval", "--data", str(data / "night_test"), "--checkpoint", str(ckpt), "--out", str(out)]) == 0
    report = _rows(out / "report.csv")
    assert report[0]["tracker"] == "oracle" and report[0]["subset"] == "all"
    assert float(report[0]["success"]) == 1.0 and float(report[0]["precision"]) == 1.0
    assert (out / "results" / "oracle" / "night_0000.csv").exists()
    curves = _rows(out / "curves.csv")
    assert {r["metric"] for r in curves} == {"precision", "norm_precision", "success"}


def test_eval_network_and_subsets(data, tmp_path):
    assert _train(data, tmp_path / "r") == 0
    ckpt = tmp_path / "r" / "checkpoints" / "epoch_002.pt"
    out = tmp_path / "ev"
    assert main(["eval", "--data", str(data / "night_test"), "--checkpoint", str(ckpt), "--out", str(out)]) == 0
    assert 0.0 <= float(_rows(out / "report.csv")[0]["success"]) <= 1.0
    # no synthetic sequence is long enough for the long-term subset
    assert main(["eval", "--data", str(data / "night_test"), "--checkpoint", str(ckpt), "--out", str(out),
                 "--subset", "long-term"]) == 2
    assert main(["eval", "--data", str(data / "night_test"), "--checkpoint", str(ckpt), "--out", str(out / "l"),
                 "--attribute", "LAI"]) in (0, 2)


def test_attributes_command(data, tmp_path):
    out = tmp_path / "attrs.csv"
    assert main(["attributes", "--data", str(data / "night_test"), "--out", str(out)]) == 0
    rows = _rows(out)
    assert len(rows) == 2 and set(rows[0]) >= {"sequence", "ambient_intensity", "max_difference", "labels"}


def test_plot_features(data, tmp_path):
    assert _train(data, tmp_path / "r") == 0
    out = tmp_path / "proj.csv"
    assert main(["plot-features", "--checkpoint", str(tmp_path / "r" / "checkpoints" / "epoch_001.pt"),
                 "--data-day", str(data / "day"), "--data-night", str(data / "night"), "--out", str(out)]) == 0
    rows = _rows(out)
    assert {r["stage"] for r in rows} == {"backbone", "bridged"}
    assert {r["domain"] for r in rows} == {"day", "night"}
    assert len(rows) == 8


def test_cli_writes_only_under_out(data, tmp_path):
    before = sorted(p.relative_to(data) for p in data.rglob("*"))
    assert _train(data, tmp_path / "r", "--no-da") == 0
    assert sorted(p.relative_to(data) for p in data.rglob("*")) == before
    assert sorted(p.name for p in tmp_path.iterdir()) == ["r"]
