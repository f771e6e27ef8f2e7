import numpy as np
import pytest

from sivfn import cli
from sivfn.cli import (DEFAULTS, ConfigError, decode_checkpoint, encode_checkpoint, format_config,
                       load_checkpoint, main, parse_config, parse_config_text, save_checkpoint)
from sivfn.model import SiamIVFN
from sivfn.synthdata import DataError

FAST = """\
tracker.template_size = 63
tracker.search_size = 127
train.pretrain_epochs = 1
train.epochs = 2
train.steps_per_epoch = 1
train.batch_size = 2
train.stage_boundaries = 1, 2, 3
"""


def test_empty_config_is_defaults(tmp_path):
    (tmp_path / "c.cfg").write_text("# nothing\n\n")
    assert parse_config(tmp_path / "c.cfg") == DEFAULTS


def test_typed_values():
    cfg = parse_config_text("backbone.coupling_rates = 0,0.25,0.5,0.75  # table row 1\n"
                            "can.enabled = false\nhead.width = 8\ntracker.context = 0.4\n")
    assert cfg["backbone.coupling_rates"] == (0.0, 0.25, 0.5, 0.75)
    assert cfg["can.enabled"] is False and cfg["head.width"] == 8
    assert cfg["tracker.context"] == 0.4


@pytest.mark.parametrize("text, message", [
    ("train.lr_start = abc\n", r":1: cannot parse value for 'train.lr_start'"),
    ("\ntrain.lr_strat = 0.1\n", r":2: unknown key 'train.lr_strat'"),
    ("head.width = 4\nhead.width = 8\n", r":2: duplicate key 'head.width' \(first set on line 1\)"),
    ("backbone.preset\n", r":1: expected 'key = value'"),
    ("backbone.preset = huge\n", "unknown backbone.preset"),
])
def test_config_errors(text, message):
    with pytest.raises(ConfigError, match=message):
        parse_config_text(text, "x.cfg")


def test_format_round_trip():
    cfg = parse_config_text("backbone.coupling_rates = 0,0.5,0.75,0.25\ntrain.lr_start = 1e-4\n")
    assert parse_config_text(format_config(cfg)) == cfg


def test_checkpoint_round_trip_and_every_byte_corruption():
    rng = np.random.default_rng(0)
    tensors = {"a": rng.normal(size=(2, 3)).astype(np.float32), "b": np.float32([1.5]),
               "scalar": np.float32(2.0).reshape(())}
    blob = encode_checkpoint(tensors)
    assert blob[:4] == b"SIVF" and int.from_bytes(blob[4:8], "little") == 1
    back = decode_checkpoint(blob)
    for k in tensors:
        assert back[k].tobytes() == tensors[k].tobytes()
    for i in range(len(blob)):
        bad = bytearray(blob)
        bad[i] ^= 0x01
        with pytest.raises(DataError):
            decode_checkpoint(bytes(bad))


def test_model_checkpoint_bit_exact(tmp_path):
    cfg = parse_config_text("can.reduction = 2\n")
    model = SiamIVFN(cli.model_config(cfg))
    save_checkpoint(tmp_path / "m.ckpt", model, cfg)
    loaded, cfg2 = load_checkpoint(tmp_path / "m.ckpt")
    assert cfg2 == cfg
    for name, t in model.store.items():
        assert loaded.store[name].data.tobytes() == t.data.tobytes()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "fast.cfg").write_text(FAST)
    assert main(["gen-data", "--out", str(root / "train"), "--seqs", "3", "--frames", "5",
                 "--seed", "1"]) == 0
    assert main(["gen-data", "--out", str(root / "test"), "--seqs", "2", "--frames", "5",
                 "--seed", "1", "--start-index", "10", "--attr", "LI", "--misalign", "2,-2"]) == 0
    assert main(["pretrain", "--data", str(root / "train"), "--config", str(root / "fast.cfg"),
                 "--out", str(root / "pre.ckpt")]) == 0
    assert main(["train", "--data", str(root / "train"), "--config", str(root / "fast.cfg"),
                 "--init", str(root / "pre.ckpt"), "--out", str(root / "ft.ckpt")]) == 0
    return root


def test_generated_layout(workspace):
    seq = workspace / "test" / "seq_0010"
    assert (seq / "attributes.txt").read_text().strip().split(",") == ["NO", "LI"]
    v = (seq / "groundtruth_visible.txt").read_text().splitlines()[0].split(",")
    t = (seq / "groundtruth_thermal.txt").read_text().splitlines()[0].split(",")
    assert float(t[0]) - float(v[0]) == 2 and float(t[1]) - float(v[1]) == -2


@pytest.mark.parametrize("mode", ["fused", "rgb", "t", "no-cffn", "no-can"])
def test_track_modes(workspace, mode):
    out = workspace / f"track_{mode}.csv"
    assert main(["track", "--model", str(workspace / "ft.ckpt"), "--seq",
                 str(workspace / "test" / "seq_0010"), "--out", str(out), "--mode", mode]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 5 and lines[0].startswith("0,")


def test_track_contributions(workspace):
    out = workspace / "contrib.csv"
    assert main(["track", "--model", str(workspace / "ft.ckpt"), "--seq",
                 str(workspace / "test" / "seq_0010"), "--out", str(workspace / "t.csv"),
                 "--contrib", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 4


def test_eval_outputs_and_plot_isolation(workspace):
    base = ["eval", "--model", str(workspace / "ft.ckpt"), "--data", str(workspace / "test")]
    assert main(base + ["--out-dir", str(workspace / "e1"), "--no-fps"]) == 0
    assert main(base + ["--out-dir", str(workspace / "e2"), "--no-fps", "--plot",
                        "--jobs", "2"]) == 0
    for name in ("metrics.csv", "precision_curve.csv", "success_curve.csv",
                 "results/seq_0010.txt"):
        assert (workspace / "e1" / name).read_bytes() == (workspace / "e2" / name).read_bytes()
    assert not (workspace / "e1" / "curves.svg").exists()
    assert (workspace / "e2" / "curves.svg").read_text().startswith("<svg")
    rows = [line.split(",") for line in (workspace / "e1" / "metrics.csv").read_text().splitlines()]
    keys = {(m, k) for m, k, _ in rows}
    assert {("precision", "5"), ("precision", "20"), ("success_auc", ""), ("attr_sr", "LI"),
            ("attr_pr", "ALL")} <= keys
    assert main(base + ["--out-dir", str(workspace / "e3")]) == 0
    assert "fps,," in (workspace / "e3" / "metrics.csv").read_text()


def test_bench(workspace):
    out = workspace / "bench.csv"
    assert main(["bench", "--model", str(workspace / "ft.ckpt"), "--iters", "10",
                 "--out", str(out)]) == 0
    assert out.read_text().startswith("fps_mean,,")


def test_grid_coupling_rates_file(workspace):
    rates = workspace / "rates.txt"
    rates.write_text("# conv2 conv3 conv4\n0.25 0.5 0.75\n0.75,0.5,0.25\n")
    out = workspace / "grid"
    assert main(["grid-coupling", "--data", str(workspace / "train"), "--config",
                 str(workspace / "fast.cfg"), "--rates-file", str(rates),
                 "--eval-data", str(workspace / "test"), "--out-dir", str(out)]) == 0
    lines = (out / "grid.csv").read_text().splitlines()
    assert lines[1].startswith("1,0 0.25 0.5 0.75,") and lines[2].startswith("2,0 0.75 0.5 0.25,")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_codes(workspace, tmp_path):
    assert main([]) == 1
    assert main(["track", "--model", "x"]) == 1
    assert main(["gen-data", "--out", str(tmp_path), "--seqs", "1", "--attr", "QQ"]) == 1
    assert main(["track", "--model", str(tmp_path / "missing.ckpt"), "--seq", "s",
                 "--out", "o"]) == 2
    bad = tmp_path / "bad.ckpt"
    blob = bytearray((workspace / "ft.ckpt").read_bytes())
    blob[100] ^= 0xFF
    bad.write_bytes(bytes(blob))
    assert main(["eval", "--model", str(bad), "--data", str(workspace / "test"),
                 "--out-dir", str(tmp_path / "e")]) == 2
    (tmp_path / "bad.cfg").write_text("train.lr_start = abc\n")
    assert main(["pretrain", "--data", str(workspace / "train"), "--config",
                 str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "p.ckpt")]) == 1
    boom = FAST.replace("train.pretrain_epochs = 1", "train.pretrain_epochs = 3")
    (tmp_path / "boom.cfg").write_text(boom + "train.pretrain_lr_start = 1e30\ntrain.grad_clip = 0\n")
    assert main(["pretrain", "--data", str(workspace / "train"), "--config",
                 str(tmp_path / "boom.cfg"), "--out", str(tmp_path / "p.ckpt")]) == 3


def test_error_message_names_file(workspace, tmp_path, caplog):
    (tmp_path / "bad.cfg").write_text("\n\ntrain.lr_start = abc\n")
    main(["pretrain", "--data", str(workspace / "train"), "--config",
          str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "p.ckpt")])
    assert f"{tmp_path / 'bad.cfg'}:3" in caplog.text
