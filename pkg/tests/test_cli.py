import json

import numpy as np
import pytest

from sws.cli import CliError, load_config, main
from sws.data import make_synthetic
from sws.store import load, load_checkpoint, load_learngene, save_checkpoint
from sws.vit import ModelConfig, build_model

BASE = {
    "model": {"image_size": 8, "patch_size": 4, "channels": 1,
              "depth": 2, "width": 8, "heads": 2, "classes": 3},
    "plan": {"stages": 2},
    "train": {"epochs": 1, "batch_size": 16, "lr": 1e-3, "alpha": 0.0, "seed": 3},
    "data": {"synthetic": {"n": 120, "classes": 3, "size": 8, "seed": 1},
             "train_fraction": 0.8, "split_seed": 2},
}


def write_config(tmp_path, name="cfg.json", **sections):
    cfg = json.loads(json.dumps(BASE))
    for key, value in sections.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def read_metrics(path):
    lines = path.read_text().strip().split("\n")
    return lines[0].split(","), [ln.split(",") for ln in lines[1:]]


# ---- config plumbing ----------------------------------------------------------


def test_load_config_set_overrides(tmp_path):
    path = write_config(tmp_path)
    cfg = load_config(path, ["train.lr=0.5", "train.schedule=constant", "extra.flag=true"], seed=99)
    assert cfg["train"]["lr"] == 0.5
    assert cfg["train"]["schedule"] == "constant"  # bare string fallback
    assert cfg["extra"]["flag"] is True
    assert cfg["train"]["seed"] == 99


def test_load_config_rejects_bad_set(tmp_path):
    path = write_config(tmp_path)
    with pytest.raises(CliError):
        load_config(path, ["no_equals_sign"])
    with pytest.raises(CliError):
        load_config(path, ["a..b=1"])


def test_load_config_rejects_bad_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(CliError):
        load_config(path, [])


# ---- happy paths ---------------------------------------------------------------


def test_train_teacher_artifacts(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "teacher"
    assert main(["train-teacher", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "teacher.sws").exists()
    assert (out / "teacher_logits.sws").exists()
    assert (out / "manifest.txt").exists()
    header, rows = read_metrics(out / "metrics.csv")
    assert header == ["epoch", "train_loss", "val_loss", "top1", "seconds"]
    assert len(rows) == 2  # no-tune row + one epoch
    assert rows[0][1] == ""  # epoch 0 has no train loss
    assert all(r[4] == "0.000" for r in rows)  # replayable CSV: no wallclock
    assert "teacher: loss=" in capsys.readouterr().out
    model = load_checkpoint(out / "teacher.sws")
    assert model.cfg.depth == 2 and model.plan is None
    manifest = (out / "manifest.txt").read_text()
    assert "command=train-teacher" in manifest
    assert "artifact.teacher.sws=0x" in manifest
    assert "wallclock_seconds=" in manifest


def test_untrained_eval_sits_at_chance(tmp_path):
    # 3 classes, 24 validation samples: a fresh model's top-1 should sit
    # within 3 binomial standard deviations of 1/3.
    cfg = write_config(tmp_path, train={"epochs": 0})
    out = tmp_path / "chance"
    assert main(["train-teacher", "--config", str(cfg), "--out", str(out)]) == 0
    _, rows = read_metrics(out / "metrics.csv")
    top1 = float(rows[0][3])
    sigma = np.sqrt((1 / 3) * (2 / 3) / 24)
    assert abs(top1 - 1 / 3) <= 3 * sigma


def test_train_aux_and_expand_pipeline(tmp_path, capsys):
    cfg = write_config(tmp_path)
    tdir, adir, ddir = tmp_path / "t", tmp_path / "a", tmp_path / "d"
    assert main(["train-teacher", "--config", str(cfg), "--out", str(tdir)]) == 0

    aux_cfg = write_config(tmp_path, "aux.json", train={"epochs": 1, "alpha": 0.9, "tau": 1.0})
    assert main(["train-aux", "--config", str(aux_cfg), "--out", str(adir),
                 "--teacher-cache", str(tdir / "teacher_logits.sws")]) == 0
    aux = load_checkpoint(adir / "aux.sws")
    assert aux.plan is not None and aux.plan.stage_sizes == (1, 1)
    pack = load_learngene(adir / "learngene.sws")
    assert pack.plan.stage_sizes == (1, 1)
    assert pack.provenance["alpha"] == 0.9

    assert main(["init-des", "--pack", str(adir / "learngene.sws"), "--depth", "5",
                 "--out", str(ddir)]) == 0
    des = load_checkpoint(ddir / "descendant.sws")
    assert des.cfg.depth == 5 and des.plan is None
    assignment = (ddir / "assignment.csv").read_text()
    assert assignment.startswith("position,learngene_index")
    assert "descendant: depth=5" in capsys.readouterr().out


def test_identity_descendant_evaluates_like_aux(tmp_path):
    cfg = write_config(tmp_path)
    tdir, adir, ddir = tmp_path / "t", tmp_path / "a", tmp_path / "d"
    main(["train-teacher", "--config", str(cfg), "--out", str(tdir)])
    aux_cfg = write_config(tmp_path, "aux.json", train={"epochs": 1, "alpha": 0.9})
    main(["train-aux", "--config", str(aux_cfg), "--out", str(adir),
          "--teacher-cache", str(tdir / "teacher_logits.sws")])
    main(["init-des", "--pack", str(adir / "learngene.sws"), "--depth", "2", "--out", str(ddir)])

    e1, e2 = tmp_path / "e1", tmp_path / "e2"
    assert main(["eval", "--config", str(cfg), "--out", str(e1),
                 "--checkpoint", str(adir / "aux.sws")]) == 0
    assert main(["eval", "--config", str(cfg), "--out", str(e2),
                 "--checkpoint", str(ddir / "descendant.sws")]) == 0
    assert (e1 / "eval.csv").read_bytes() == (e2 / "eval.csv").read_bytes()


def test_finetune_descendant(tmp_path, capsys):
    cfg = write_config(tmp_path)
    tdir, adir, ddir, fdir = tmp_path / "t", tmp_path / "a", tmp_path / "d", tmp_path / "f"
    main(["train-teacher", "--config", str(cfg), "--out", str(tdir)])
    aux_cfg = write_config(tmp_path, "aux.json", train={"epochs": 1, "alpha": 0.9})
    main(["train-aux", "--config", str(aux_cfg), "--out", str(adir),
          "--teacher-cache", str(tdir / "teacher_logits.sws")])
    main(["init-des", "--pack", str(adir / "learngene.sws"), "--depth", "3", "--out", str(ddir)])

    # The aux config still says alpha=0.9; with no cache given, the tuner
    # must fall back to plain labels rather than fail.
    ft_cfg = write_config(tmp_path, "ft.json", train={"epochs": 1, "batch_size": 16, "seed": 5})
    del_train = json.loads(ft_cfg.read_text())
    del del_train["train"]["alpha"]
    ft_cfg.write_text(json.dumps(del_train))
    assert main(["finetune", "--config", str(ft_cfg), "--out", str(fdir),
                 "--checkpoint", str(ddir / "descendant.sws")]) == 0
    assert (fdir / "finetuned.sws").exists()
    assert "finetuned: loss=" in capsys.readouterr().out
    tuned = load_checkpoint(fdir / "finetuned.sws")
    assert tuned.cfg.depth == 3


def test_sweep_depth_csv(tmp_path):
    cfg = write_config(tmp_path)
    tdir, adir, sdir = tmp_path / "t", tmp_path / "a", tmp_path / "s"
    main(["train-teacher", "--config", str(cfg), "--out", str(tdir)])
    aux_cfg = write_config(tmp_path, "aux.json", train={"epochs": 1, "alpha": 0.9})
    main(["train-aux", "--config", str(aux_cfg), "--out", str(adir),
          "--teacher-cache", str(tdir / "teacher_logits.sws")])

    assert main(["sweep-depth", "--config", str(cfg), "--out", str(sdir),
                 "--pack", str(adir / "learngene.sws"), "--vanilla", str(tdir / "teacher.sws"),
                 "--depths", "4,2", "--scratch-epochs", "1"]) == 0
    lines = (sdir / "sweep.csv").read_text().strip().split("\n")
    assert lines[0] == "depth,params,method,val_loss,top1"
    rows = [ln.split(",") for ln in lines[1:]]
    assert [(r[0], r[2]) for r in rows] == [
        ("2", "scratch"), ("2", "simple_lg"), ("2", "sws"),
        ("4", "scratch"), ("4", "simple_lg"), ("4", "sws"),
    ]
    # Identity depth: the sws row at depth 2 must match the aux's own eval.
    e = tmp_path / "e"
    main(["eval", "--config", str(cfg), "--out", str(e), "--checkpoint", str(adir / "aux.sws")])
    aux_loss = (e / "eval.csv").read_text().strip().split("\n")[1].split(",")[1]
    sws2 = [r for r in rows if r[0] == "2" and r[2] == "sws"][0]
    assert sws2[3] == aux_loss


def test_replay_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path)
    a, b = tmp_path / "r1", tmp_path / "r2"
    assert main(["train-teacher", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["train-teacher", "--config", str(cfg), "--out", str(b)]) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "teacher.sws").read_bytes() == (b / "teacher.sws").read_bytes()
    assert (a / "teacher_logits.sws").read_bytes() == (b / "teacher_logits.sws").read_bytes()

    def stable_manifest(p):
        return [ln for ln in (p / "manifest.txt").read_text().splitlines()
                if not ln.startswith(("wallclock_seconds=", "argv="))]

    assert stable_manifest(a) == stable_manifest(b)


def test_seed_flag_changes_the_run(tmp_path):
    cfg = write_config(tmp_path)
    a, b = tmp_path / "s1", tmp_path / "s2"
    main(["train-teacher", "--config", str(cfg), "--out", str(a), "--seed", "1"])
    main(["train-teacher", "--config", str(cfg), "--out", str(b), "--seed", "2"])
    assert (a / "teacher.sws").read_bytes() != (b / "teacher.sws").read_bytes()


def test_set_override_reaches_training(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "o"
    main(["train-teacher", "--config", str(cfg), "--out", str(out), "--set", "train.epochs=0"])
    _, rows = read_metrics(out / "metrics.csv")
    assert len(rows) == 1


# ---- exit codes -----------------------------------------------------------------


def test_exit_2_on_bad_config(tmp_path):
    cfg = write_config(tmp_path, plan={"sizes": [1, 2]})  # sums to 3, depth is 2
    assert main(["train-aux", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2


def test_exit_2_when_aux_lacks_teacher(tmp_path):
    cfg = write_config(tmp_path, train={"epochs": 1, "alpha": 0.9})
    assert main(["train-aux", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2


def test_exit_2_on_bad_set_flag(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["train-teacher", "--config", str(cfg), "--out", str(tmp_path / "x"),
                 "--set", "oops"]) == 2


def test_exit_3_on_missing_files(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "x"),
                 "--checkpoint", str(tmp_path / "nothing.sws")]) == 3
    assert main(["train-teacher", "--config", str(tmp_path / "missing.json"),
                 "--out", str(tmp_path / "y")]) == 3


def test_exit_4_on_corrupt_artifact(tmp_path):
    cfg = write_config(tmp_path)
    bad = tmp_path / "bad.sws"
    bad.write_bytes(b"not a container at all")
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "x"),
                 "--checkpoint", str(bad)]) == 4


def test_exit_4_on_stale_cache(tmp_path):
    cfg = write_config(tmp_path)
    tdir = tmp_path / "t"
    main(["train-teacher", "--config", str(cfg), "--out", str(tdir)])
    other = write_config(tmp_path, "other.json",
                         data={"synthetic": {"n": 120, "classes": 3, "size": 8, "seed": 9},
                               "train_fraction": 0.8, "split_seed": 2},
                         train={"epochs": 1, "alpha": 0.9})
    assert main(["train-aux", "--config", str(other), "--out", str(tmp_path / "x"),
                 "--teacher-cache", str(tdir / "teacher_logits.sws")]) == 4


def test_exit_4_on_bad_idx_data(tmp_path):
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    img.write_bytes(b"\x00\x00\x09\x99" + b"\x00" * 16)
    lab.write_bytes(b"\x00\x00\x08\x01" + b"\x00" * 8)
    raw = json.loads(json.dumps(BASE))
    raw["data"] = {"idx": {"images": str(img), "labels": str(lab)}, "train_fraction": 0.8}
    cfg = tmp_path / "idx.json"
    cfg.write_text(json.dumps(raw))
    assert main(["train-teacher", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 4


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_exit_5_on_numeric_blowup(tmp_path):
    # A checkpoint crafted to overflow float32 inside attention: the norm
    # gain and qkv weights are both ~1e20, so their product is inf.
    mcfg = ModelConfig(**BASE["model"])
    model = build_model(mcfg, seed=0)
    for lp in model.layers:
        lp.ln1_g.data = np.full_like(lp.ln1_g.data, 1e20)
        lp.qkv_w.data = np.full_like(lp.qkv_w.data, 1e20)
    bad = tmp_path / "huge.sws"
    save_checkpoint(model, bad)
    cfg = write_config(tmp_path)
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "x"),
                 "--checkpoint", str(bad)]) == 5


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_exit_5_message_names_the_problem(tmp_path, capsys):
    mcfg = ModelConfig(**BASE["model"])
    model = build_model(mcfg, seed=0)
    for lp in model.layers:
        lp.ln1_g.data = np.full_like(lp.ln1_g.data, 1e20)
        lp.qkv_w.data = np.full_like(lp.qkv_w.data, 1e20)
    bad = tmp_path / "huge.sws"
    save_checkpoint(model, bad)
    cfg = write_config(tmp_path)
    main(["eval", "--config", str(cfg), "--out", str(tmp_path / "x"), "--checkpoint", str(bad)])
    assert "error:" in capsys.readouterr().err
