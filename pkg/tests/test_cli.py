"""End-to-end CLI runs on a tiny configuration."""

import csv
import json
import shutil

import numpy as np
import pytest

from tpf import pipeline as pl
from tpf.cli import main
from tpf.config import load_config
from tpf.gap import MmdReport
from tpf.losses import LOSS_COLUMNS, read_loss_log
from tpf.plot import read_svg_points

TINY = """
[experiment]
seed = 7
out = run

[data]
train = run/data/a, run/data/b
test = run/data/t

[tracker]
search_size = 32
template_size = 16
dim = 16
depth = 2
heads = 2

[train]
batch = 2
pretrain_steps = 4
distill_steps = 4
finetune_steps = 3
aux_warmup = 2
max_gap = 5

[ndtu]
n = 3
p = 0.0

[gap]
locations = 0
steps = 2
batch = 2
frames = 6

[gen.a]
length = 10
canvas = 64, 64
target_size = 10, 8
amplitude = 12, 10
seed = 1

[gen.b]
length = 10
canvas = 64, 64
target_size = 9, 9
trajectory = linear
seed = 2

[gen.t]
length = 8
canvas = 64, 64
target_size = 10, 8
appearance = 3-6
seed = 3
"""


def _write(tmp, text=TINY, name="exp.ini"):
    p = tmp / name
    p.write_text(text)
    return str(p)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write(root)
    for cmd in ("gen-data", "distill"):
        assert main([cmd, "--config", cfg]) == 0
    ft = TINY.replace("max_gap = 5", "max_gap = 5\ninit = run/distill.ckpt")
    cfg_ft = _write(root, ft, "ft.ini")
    assert main(["finetune", "--config", cfg_ft]) == 0
    assert main(["track", "--config", cfg_ft]) == 0
    return root


def test_outputs_present(run):
    out = run / "run"
    for name in ("aux_tracker.ckpt", "pretrain_loss.csv", "distill_loss.csv", "distill.ckpt",
                 "distill_summary.json", "finetune_loss.csv", "train.ckpt", "model.ckpt",
                 "boxes.csv", "metrics.json"):
        assert (out / name).exists(), name
    header = (out / "finetune_loss.csv").read_text().splitlines()[0]
    assert header == ",".join(LOSS_COLUMNS)
    m = json.loads((out / "metrics.json").read_text())
    assert m["frames"] == 8 and 0 <= m["sr"] <= 1
    rows = list(csv.reader(open(out / "boxes.csv")))
    assert rows[0] == ["frame_idx", "x", "y", "w", "h", "score"] and len(rows) == 9


def test_inference_checkpoint_is_smaller_and_strip_keeps_boxes(run, tmp_path):
    out = run / "run"
    assert (out / "model.ckpt").stat().st_size < (out / "train.ckpt").stat().st_size
    assert "aux" in pl.read_checkpoint(out / "train.ckpt")
    assert "aux" not in pl.read_checkpoint(out / "model.ckpt")
    text = TINY.replace("[ndtu]", "[track]\nmodel = run/train.ckpt\n\n[ndtu]")
    assert main(["track", "--config", _write(run, text, "full.ini"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "boxes.csv").read_bytes() == (out / "boxes.csv").read_bytes()


def test_rerun_is_byte_identical(run, tmp_path):
    shutil.copytree(run / "run" / "data", tmp_path / "run" / "data")
    cfg = _write(tmp_path)
    assert main(["distill", "--config", cfg]) == 0
    ft = TINY.replace("max_gap = 5", "max_gap = 5\ninit = run/distill.ckpt")
    cfg_ft = _write(tmp_path, ft, "ft.ini")
    assert main(["finetune", "--config", cfg_ft]) == 0
    assert main(["track", "--config", cfg_ft]) == 0
    for name in ("pretrain_loss.csv", "distill_loss.csv", "finetune_loss.csv", "boxes.csv",
                 "model.ckpt", "train.ckpt", "distill.ckpt"):
        assert (tmp_path / "run" / name).read_bytes() == (run / "run" / name).read_bytes(), name


def test_lambda_zero_is_task_only(run, tmp_path):
    text = TINY + "\n[loss]\nlam = 0\n"
    cfg = load_config(_write(run, text, "lam0.ini"), "finetune", out=str(tmp_path))
    seqs = pl.load_sequences(cfg.train_data)
    state = pl.read_checkpoint(run / "run" / "aux_tracker.ckpt")
    model, aux = pl.build_finetune_model(cfg, pl.tracker_state(state, "aux"))
    assert aux is None
    total, bd = pl.finetune_step(cfg, model, aux, seqs, 1)
    assert total.item() == bd.l_task and bd.l_rep == 0 and bd.l_rec == 0
    cfg1 = load_config(_write(run, TINY, "lam1.ini"), "finetune", out=str(tmp_path))
    m1, a1 = pl.build_finetune_model(cfg1, pl.tracker_state(state, "aux"))
    t1, bd1 = pl.finetune_step(cfg1, m1, a1, seqs, 1)
    assert bd1.l_task == bd.l_task
    assert t1.item() == pytest.approx(bd1.l_task + bd1.l_rep + bd1.l_rec, abs=1e-12)


def test_weight_modes(run, tmp_path):
    for mode, extra in (("single", "single_expert = 2"), ("oracle", "")):
        text = TINY.replace("max_gap = 5", f"max_gap = 5\nweight_mode = {mode}\n{extra}\naux_tracker = run/aux_tracker.ckpt")
        logs = []
        for rep in range(2):
            out = tmp_path / f"{mode}{rep}"
            assert main(["distill", "--config", _write(run, text, f"{mode}.ini"), "--out", str(out)]) == 0
            logs.append((out / "distill_loss.csv").read_bytes())
        assert logs[0] == logs[1]
        rows = read_loss_log(tmp_path / f"{mode}0" / "distill_loss.csv")
        if mode == "single":
            assert all((float(r["w_c"]), float(r["w_d"]), float(r["w_m"])) == (0.0, 0.0, 1.0) for r in rows)
        else:
            assert all(abs(float(r["w_c"]) + float(r["w_d"]) + float(r["w_m"]) - 1) < 1e-9 for r in rows)


def test_gap_single_location_csv_and_svg_agree(run, tmp_path):
    assert main(["gap", "--config", _write(run), "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "gap.csv")))
    assert len(rows) == 1 and rows[0]["layer"] == "0"
    pts = read_svg_points(tmp_path / "gap.svg")["final-layer gap"]
    assert pts == [(0.0, float(rows[0]["mmd2"]))]
    rep = MmdReport.from_csv(tmp_path / "gap_k0.csv")
    assert rep.layer_mmd2 == [0.0, 0.0]
    # reuse the saved checkpoint, refusing to train missing locations
    text = TINY.replace("frames = 6", f"frames = 6\ncheckpoints = {tmp_path}\ntrain_missing = false")
    assert main(["gap", "--config", _write(run, text, "gap2.ini"), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "gap.csv").read_bytes() == (tmp_path / "gap.csv").read_bytes()
    text = text.replace("locations = 0", "locations = 1")
    assert main(["gap", "--config", _write(run, text, "gap3.ini"), "--out", str(tmp_path / "x")]) == 3


def test_exit_codes(run, tmp_path, capsys):
    assert main(["track", "--config", str(tmp_path / "none.ini")]) == 2
    assert main(["track", "--config", _write(tmp_path, TINY.replace("seed = 7", ""))]) == 2
    assert main(["distill", "--config", _write(tmp_path, TINY)]) == 2  # data dirs missing here
    bad_dim = TINY.replace("dim = 16", "dim = 32").replace("max_gap = 5", "max_gap = 5\ninit = run/distill.ckpt")
    assert main(["finetune", "--config", _write(run, bad_dim, "bad.ini"), "--out", str(tmp_path)]) == 2
    shutil.copytree(run / "run" / "data", tmp_path / "run" / "data")
    (tmp_path / "run" / "data" / "t" / "tir" / "000004.pgm").unlink()
    text = TINY.replace("[ndtu]", f"[track]\nmodel = {run / 'run' / 'model.ckpt'}\n\n[ndtu]")
    assert main(["track", "--config", _write(tmp_path, text, "t.ini")]) == 3
    assert "frame 4" in capsys.readouterr().err


def test_external_experts_and_missing_frame(run, tmp_path):
    from tpf.imageio import write_pnm
    from tpf.synth import read_sequence
    from tpf.experts import average_expert, max_expert, pyramid_expert
    fns = {"e0": average_expert, "e1": max_expert, "e2": lambda r, t: pyramid_expert(r, t, 3)}
    for name, fn in fns.items():
        for seq in ("a", "b"):
            d = tmp_path / name / seq
            d.mkdir(parents=True)
            for f in read_sequence(run / "run" / "data" / seq):
                write_pnm(d / f"{f.gt.frame_idx:06d}.ppm", fn(f.rgb, f.tir).data)
    ext = ", ".join(f"{n}:{tmp_path / n}" for n in fns)
    text = TINY.replace("[gap]", f"[experts]\nexternal = {ext}\n\n[gap]")
    text = text.replace("max_gap = 5", "max_gap = 5\naux_tracker = run/aux_tracker.ckpt")
    cfg = _write(run, text, "ext.ini")
    assert main(["distill", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    for seq in ("a", "b"):
        for i in range(2, 10):
            (tmp_path / "e1" / seq / f"{i:06d}.ppm").unlink()
    seqs = pl.load_sequences(load_config(cfg, "distill").train_data)
    experts = pl.make_experts(load_config(cfg, "distill"))
    samples = [pl.PairSample(0, 0, 6, None, *(pl._transform(seqs[0].boxes[6], 4.0, 32),) * 3, np.zeros(4))]
    with pytest.raises(FileNotFoundError, match="frame 6"):
        pl.expert_crops(seqs, samples, "search", experts)
    assert main(["distill", "--config", cfg, "--out", str(tmp_path / "o2")]) == 3


def test_track_ndtu_uses_dynamic_templates(run):
    cfg = load_config(str(run / "ft.ini"), "track")
    model = pl.load_model(cfg, run / "run" / "model.ckpt")
    seq = pl.SequenceData.load(cfg.test_data)
    res = pl.track_sequence(cfg, model, seq)
    assert res.dyn_sources[3] is not None  # p = 0 makes every frame reliable
    off = pl.track_sequence(cfg, model, seq, use_ndtu=False)
    assert all(s is None for s in off.dyn_sources)
    np.testing.assert_array_equal(res.boxes[:4], off.boxes[:4])


def test_aux_warmup_moves_only_the_auxiliary_branches(run):
    text = TINY.replace("finetune_steps = 3", "finetune_steps = 0").replace("aux_warmup = 2", "aux_warmup = 3")
    cfg = load_config(_write(run, text, "warm.ini"))
    seqs = pl.load_sequences(cfg.train_data)
    state = pl.tracker_state(pl.read_checkpoint(run / "run" / "distill.ckpt"), "distill")
    fresh_model, fresh_aux = pl.build_finetune_model(cfg, state)
    model, aux = pl.finetune(cfg, seqs, state)
    for (name, a), (_, b) in zip(model.named_parameters(), fresh_model.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=name)
    moved = [not np.array_equal(a.data, b.data) for a, b in zip(aux.parameters(), fresh_aux.parameters())]
    assert any(moved)
