import csv
import json

import numpy as np
import pytest

from cspdet import cli
from cspdet import numerics as nx
from cspdet.data import SceneSpec, generate_dataset, read_pgm, write_dataset
from cspdet.geometry import BoundBox, ObjectAnnotation, iou

SMOKE = {
    "optimizer": {"iterations": 50, "checkpoint_every": 25},
    "data": {"n_train": 4, "val": {"n": 4, "seed": 5}},
    "augment": {"hflip_prob": 0.0, "scale_range": [1.0, 1.0], "brightness_jitter": 0.0},
}


def validate_detections_jsonl(path):
    """Schema check for the detect output."""
    lines = path.read_text().splitlines()
    for line in lines:
        rec = json.loads(line)
        assert isinstance(rec["image"], str)
        if "error" in rec:
            assert isinstance(rec["error"], str)
            continue
        assert set(rec) == {"image", "detections"}
        scores = [d["score"] for d in rec["detections"]]
        assert scores == sorted(scores, reverse=True)
        for d in rec["detections"]:
            assert set(d) == {"x1", "y1", "x2", "y2", "score"}
            assert d["x1"] < d["x2"] and d["y1"] < d["y2"] and 0 < d["score"] <= 1
    return [json.loads(x) for x in lines]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("smoke")
    cfgp = d / "smoke.json"
    cfgp.write_text(json.dumps({**SMOKE, "output_dir": "out"}))
    assert cli.main(["train", "--config", str(cfgp)]) == 0
    # the training scenes as files, for detect / eval on them
    spec = SceneSpec()
    gt = write_dataset(generate_dataset(spec, 4, seed=spec.seed), d / "train_set")
    return d, cfgp, gt


def test_train_smoke_outputs(smoke_run):
    d, _, _ = smoke_run
    out = d / "out"
    assert (out / "final" / "manifest.json").is_file()
    assert (out / "checkpoints" / "step_000025" / "manifest.json").is_file()
    rows = read_csv(out / "train_log.csv")
    assert [int(r["step"]) for r in rows] == list(range(1, 51))
    assert set(rows[0]) == set(cli.LOG_FIELDS)
    assert float(rows[-1]["total"]) < float(rows[0]["total"])
    assert len(read_csv(out / "val_metrics.csv")) == 2


def test_resume_matches_uninterrupted(smoke_run, tmp_path):
    d, cfgp, _ = smoke_run
    cfg2 = tmp_path / "resume.json"
    cfg2.write_text(json.dumps({**SMOKE, "output_dir": "out"}))
    ck = d / "out" / "checkpoints" / "step_000025"
    assert cli.main(["train", "--config", str(cfg2), "--resume", str(ck)]) == 0
    a, b = d / "out" / "final", tmp_path / "out" / "final"
    files = sorted(p.relative_to(a) for p in a.rglob("*.cspt"))
    assert files and all((a / f).read_bytes() == (b / f).read_bytes() for f in files)
    la, lb = read_csv(d / "out" / "train_log.csv"), read_csv(tmp_path / "out" / "train_log.csv")
    # the fresh output dir only holds the resumed steps
    assert la[25:] == lb


def test_train_config_errors(tmp_path):
    assert cli.main(["train", "--config", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"r": 8}}))
    assert cli.main(["train", "--config", str(bad)]) == 2
    assert cli.main(["train"]) == 2


def test_train_nonfinite_loss_exits_3(tmp_path, monkeypatch):
    import cspdet.network as network

    def broken(*a, **k):
        raise FloatingPointError("non-finite loss component(s): center=nan")

    monkeypatch.setattr(network, "train_step", broken)
    import cspdet.estimator as estimator
    monkeypatch.setattr(estimator, "train_step", broken)
    cfgp = tmp_path / "c.json"
    cfgp.write_text(json.dumps({**SMOKE, "output_dir": "out"}))
    assert cli.main(["train", "--config", str(cfgp)]) == 3


def test_detect_and_eval_on_training_images(smoke_run, tmp_path):
    d, _, gt = smoke_run
    dets = tmp_path / "dets.jsonl"
    assert cli.main(["detect", "--checkpoint", str(d / "out" / "final"), "--input", str(gt),
                     "--out", str(dets)]) == 0
    recs = validate_detections_jsonl(dets)
    assert len(recs) == 4
    again = tmp_path / "dets2.jsonl"
    cli.main(["detect", "--checkpoint", str(d / "out" / "final"), "--input", str(gt), "--out", str(again)])
    assert dets.read_bytes() == again.read_bytes()
    assert cli.main(["eval", "--dets", str(dets), "--gt", str(gt), "--out", str(tmp_path / "ev")]) == 0
    rows = read_csv(tmp_path / "ev" / "metrics.csv")
    assert [r["iou_thresh"] for r in rows] == ["0.5", "0.75"]
    assert list(rows[0]) == ["setting", "iou_thresh", "mr2", "ap", "n_images", "n_gt"]
    assert (tmp_path / "ev" / "fppi_0.5.csv").is_file() and (tmp_path / "ev" / "pr_0.75.csv").is_file()


def test_overfit_smoke_model_finds_training_objects(tmp_path):
    # one fixed 2-object image, no augmentation: the model must localize at least one object
    img_dir = tmp_path / "one"
    rec = generate_dataset(SceneSpec(objects_min=2, objects_max=2), 1, seed=3)[0]
    gt = write_dataset([rec] * 4, img_dir)
    cfgp = tmp_path / "c.json"
    cfgp.write_text(json.dumps({**SMOKE, "optimizer": {"iterations": 200, "checkpoint_every": 1000,
                                                       "lr": 2e-3},
                                "data": {"annotations": str(gt), "val": {"n": 0, "seed": 0}},
                                "output_dir": "out"}))
    assert cli.main(["train", "--config", str(cfgp)]) == 0
    dets = tmp_path / "dets.jsonl"
    assert cli.main(["detect", "--checkpoint", str(tmp_path / "out" / "final"), "--input", str(gt),
                     "--out", str(dets)]) == 0
    found = validate_detections_jsonl(dets)[0]["detections"]
    best = max(iou(BoundBox(f["x1"], f["y1"], f["x2"], f["y2"]), a.box)
               for f in found for a in rec.annotations)
    assert best >= 0.5


def test_detect_untrained_model_writes_valid_jsonl(tmp_path):
    from cspdet.checkpoint import save_checkpoint
    from cspdet.estimator import CSPDetector

    est = CSPDetector(stage_channels=(4, 4, 4, 4), head_channels=4)
    est._init_state()
    save_checkpoint(est, tmp_path / "ck")
    gt = write_dataset(generate_dataset(SceneSpec(), 2, seed=0), tmp_path / "data")
    (tmp_path / "data" / "junk.ppm").write_bytes(b"P6\nbroken")
    for src in (gt, tmp_path / "data"):
        out = tmp_path / "d.jsonl"
        assert cli.main(["detect", "--checkpoint", str(tmp_path / "ck"), "--input", str(src),
                         "--out", str(out)]) == 0
        recs = validate_detections_jsonl(out)
        assert len(recs) == (2 if src == gt else 3)
    only_bad = tmp_path / "data" / "junk.ppm"
    assert cli.main(["detect", "--checkpoint", str(tmp_path / "ck"), "--input", str(only_bad),
                     "--out", str(tmp_path / "bad.jsonl")]) == 1
    assert "error" in validate_detections_jsonl(tmp_path / "bad.jsonl")[0]
    assert cli.main(["detect", "--checkpoint", str(tmp_path / "nope"), "--input", str(gt),
                     "--out", str(tmp_path / "x.jsonl")]) == 2


def _gt_as_dets(gt_path, out_path):
    with open(gt_path) as fh, open(out_path, "w") as out:
        for line in fh:
            rec = json.loads(line)
            ds = []
            for o in rec["objects"]:
                b = ObjectAnnotation(o["cx"], o["cy"], o["h"], o["w"]).box
                ds.append({"x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2, "score": 1.0})
            out.write(json.dumps({"image": rec["image"], "detections": ds}) + "\n")


def test_eval_verbatim_and_empty(tmp_path):
    gt = write_dataset(generate_dataset(SceneSpec(), 5, seed=1), tmp_path / "data")
    dets = tmp_path / "dets.jsonl"
    _gt_as_dets(gt, dets)
    assert cli.main(["eval", "--dets", str(dets), "--gt", str(gt), "--out", str(tmp_path / "a")]) == 0
    rows = read_csv(tmp_path / "a" / "metrics.csv")
    assert [float(r["ap"]) for r in rows] == [1.0, 1.0]
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert cli.main(["eval", "--dets", str(empty), "--gt", str(gt), "--out", str(tmp_path / "b")]) == 0
    rows = read_csv(tmp_path / "b" / "metrics.csv")
    assert [float(r["ap"]) for r in rows] == [0.0, 0.0]
    assert [float(r["mr2"]) for r in rows] == [1.0, 1.0]
    assert cli.main(["eval", "--dets", str(empty), "--gt", str(gt), "--iou", "2"]) == 2
    (tmp_path / "junk.jsonl").write_text("{\n")
    assert cli.main(["eval", "--dets", str(tmp_path / "junk.jsonl"), "--gt", str(gt)]) == 2


def test_eval_hand_fixture_matches_oracle(tmp_path):
    from test_evaluation import three_image_fixture
    import math

    dets, gts = three_image_fixture()
    lines_gt, lines_det = [], []
    for i, (d, g) in enumerate(zip(dets, gts)):
        name = f"im{i}.ppm"
        lines_gt.append(json.dumps({"image": name, "width": 100, "height": 100,
                                    "objects": [{"cx": a.cx, "cy": a.cy, "h": a.h, "w": a.w,
                                                 "ignore": a.ignore} for a in g]}))
        lines_det.append(json.dumps({"image": name, "detections": [
            {"x1": x.box.x1, "y1": x.box.y1, "x2": x.box.x2, "y2": x.box.y2, "score": x.score}
            for x in d]}))
    (tmp_path / "gt.jsonl").write_text("\n".join(lines_gt) + "\n")
    (tmp_path / "d.jsonl").write_text("\n".join(lines_det) + "\n")
    assert cli.main(["eval", "--dets", str(tmp_path / "d.jsonl"), "--gt", str(tmp_path / "gt.jsonl"),
                     "--iou", "0.5", "--out", str(tmp_path)]) == 0
    (row,) = read_csv(tmp_path / "metrics.csv")
    assert abs(float(row["ap"]) - 5 / 6) <= 1e-9
    assert abs(float(row["mr2"]) - math.exp((8 * math.log(1 / 3) + math.log(1e-6)) / 9)) <= 1e-9


def test_inspect_targets(tmp_path):
    one = tmp_path / "one.jsonl"
    one.write_text(json.dumps({"image": "a.ppm", "width": 64, "height": 64,
                               "objects": [{"cx": 30.0, "cy": 22.0, "h": 20.0, "w": 8.2}]}) + "\n"
                   + json.dumps({"image": "b.ppm", "width": 32, "height": 32, "objects": []}) + "\n")
    assert cli.main(["inspect-targets", "--gt", str(one), "--out", str(tmp_path / "t")]) == 0
    side = json.loads((tmp_path / "t" / "00000" / "targets.json").read_text())
    assert side["num_positives"] == 1 and side["map_width"] == 16
    pgm = read_pgm(tmp_path / "t" / "00000" / "gauss.pgm")
    assert np.unravel_index(np.argmax(pgm), pgm.shape) == (5, 7)
    center = nx.load_tensor(tmp_path / "t" / "00000" / "center.cspt").reshape(16, 16)
    assert center[5, 7] == 1 and center.sum() == 1
    for plane in side["planes"].values():
        arr = nx.load_tensor(tmp_path / "t" / "00001" / plane)
        assert not arr.any()
    assert not read_pgm(tmp_path / "t" / "00001" / "gauss.pgm").any()


def test_gradcheck_exit_codes(capsys, monkeypatch):
    assert cli.main(["gradcheck", "--scope", "ops"]) == 0
    first = capsys.readouterr().out
    assert cli.main(["gradcheck", "--scope", "ops"]) == 0
    assert capsys.readouterr().out == first
    real = nx.deconv2d_backward

    def corrupted(x, p, g, *a, **k):
        gx, gw, gb = real(x, p, g, *a, **k)
        return gx * 1.01, gw, gb

    monkeypatch.setattr(nx, "deconv2d_backward", corrupted)
    assert cli.main(["gradcheck", "--scope", "ops"]) == 1
    out = capsys.readouterr().out
    assert "FAILED: deconv2d" in out


def test_generate_and_ablate_structure(tmp_path, capsys):
    cfgp = tmp_path / "c.json"
    cfgp.write_text(json.dumps({"optimizer": {"iterations": 2, "batch_size": 2},
                                "model": {"stage_channels": [4, 4, 4, 4], "head_channels": 4},
                                "data": {"n_train": 4, "val": {"n": 3, "seed": 1}},
                                "output_dir": "out"}))
    assert cli.main(["generate", "--config", str(cfgp), "--out", str(tmp_path / "g"), "--n", "3"]) == 0
    assert (tmp_path / "g" / "annotations.jsonl").is_file()
    assert cli.main(["ablate", "--config", str(cfgp), "--axis", "r"]) == 0
    rows = read_csv(tmp_path / "out" / "ablate_r.csv")
    assert [r["setting"] for r in rows if r["iou_thresh"] == "0.5"] == ["r=2", "r=4", "r=8", "r=16"]
    assert cli.main(["ablate", "--config", str(cfgp), "--axis", "bogus"]) == 2
