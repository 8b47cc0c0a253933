"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS criterion N: ...`` or ``FAIL criterion N: ...``
line (also collected in the terminal summary).  The training-based checks
share a session cache, so a run needed by several criteria is trained once.
"""

import csv
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from cspdet import cli
from cspdet.codec import CodecConfig, gaussian_mask
from cspdet.config import load_config
from cspdet.evaluation import evaluate, match_detections
from cspdet.experiments import load_datasets, summarize, train_and_evaluate
from cspdet.geometry import Detection
from cspdet.gradcheck import run_gradcheck
from cspdet.loss import LossConfig, center_loss, offset_loss, scale_loss, total_loss

from test_codec import ann, random_distinct_objects, round_trip_errors, single_gauss
from test_evaluation import three_image_fixture

ROOT = Path(__file__).resolve().parents[1]
TOY = ROOT / "configs" / "toy.json"

# Ablation runs use a reduced iteration budget; the toy preset criterion uses the full one.
ABLATION = {"optimizer": {"iterations": 2000}}
FACE = {"data": {"train": {"aspect_mode": "range"}}}


def _both(key, value):
    return {"model": {key: value}, "codec": {key: value}}


def _merge(*parts):
    out: dict = {}
    for p in parts:
        for k, v in p.items():
            if isinstance(v, dict):
                out[k] = _merge(out.get(k, {}), v)
            else:
                out[k] = v
    return out


class RunCache:
    """Trains each distinct config override once per session."""

    def __init__(self):
        self.base = load_config(TOY, env={})
        self.runs: dict = {}
        self.data: dict = {}

    def _data(self, cfg):
        key = json.dumps(cfg.data, sort_keys=True, default=str)
        if key not in self.data:
            self.data[key] = load_datasets(cfg)
        return self.data[key]

    def get(self, override):
        key = json.dumps(override, sort_keys=True)
        if key not in self.runs:
            cfg = self.base.replace(override)
            t0 = time.perf_counter()
            _, rows = train_and_evaluate(cfg, key, self._data(cfg))
            self.runs[key] = {"rows": rows, "seconds": time.perf_counter() - t0,
                              **{(r["iou_thresh"], m): r[m] for r in rows
                                 for m in ("ap", "mr2", "center_error")}}
        return self.runs[key]


@pytest.fixture(scope="session")
def runs():
    return RunCache()


def test_criterion_1_gradient_integrity(report):
    t0 = time.perf_counter()
    assert cli.main(["gradcheck", "--scope", "all", "--seed", "0"]) == 0
    results = run_gradcheck("all", seed=0)
    elapsed = time.perf_counter() - t0
    ops = max(r.worst for r in results if r.scope != "model")
    model = max(r.worst for r in results if r.scope == "model")
    ok = all(r.passed for r in results) and ops <= 1e-5 and model <= 1e-4 and elapsed / 2 < 120
    report(1, ok, f"worst op/loss rel err {ops:.2e} (<=1e-5), worst model rel err {model:.2e} "
                  f"(<=1e-4), {elapsed / 2:.0f}s per run (<120s)")


def test_criterion_2_codec_round_trip(report):
    rng = np.random.default_rng(2024)
    on = CodecConfig(r=4, offset_enabled=True)
    off = CodecConfig(r=4, offset_enabled=False)
    worst_c, worst_h, worst_off = 0.0, 0.0, 0.0
    t0 = time.perf_counter()
    for _ in range(100):
        objs = random_distinct_objects(rng)
        c, h = round_trip_errors(objs, on)
        worst_c, worst_h = max(worst_c, c), max(worst_h, h)
        worst_off = max(worst_off, round_trip_errors(objs, off)[0])
    bound = (4 / 2) * math.sqrt(2)
    ok = worst_c < 1e-9 and worst_h < 1e-9 and worst_off <= bound
    report(2, ok, f"offsets on: center err {worst_c:.1e}px, height rel err {worst_h:.1e}; "
                  f"offsets off: center err {worst_off:.3f} <= {bound:.3f}px "
                  f"({time.perf_counter() - t0:.1f}s)")


def test_criterion_3_loss_sanity(report):
    y = np.zeros((8, 8))
    y[2, 3] = y[5, 6] = 1
    gauss = gaussian_mask([ann(14, 10, 12), ann(26, 22, 12)], 8, 8, CodecConfig())
    p = np.where(y == 1, 1 - 1e-12, 1e-12)
    lc = center_loss(p, y, gauss)[0]
    t = np.random.default_rng(0).uniform(2, 4, size=(1, 8, 8))
    ls = scale_loss(t.copy(), t, y[None])[0]
    o = np.random.default_rng(1).uniform(0, 1, size=(2, 8, 8))
    lo = offset_loss(o.copy(), o, np.stack([y, y]))[0]
    half = np.zeros((4, 4))
    half[0, 0] = 1
    ph = np.where(half == 1, 0.5, 0.0)
    lh = center_loss(ph, half, np.zeros_like(half))[0]
    cfg = LossConfig()
    rng = np.random.default_rng(3)
    ident = max(abs(total_loss(c, s, q, cfg).total - (0.01 * c + 1.0 * s + 0.1 * q))
                for c, s, q in rng.uniform(0, 10, size=(100, 3)))
    ok = lc <= 1e-9 and ls == 0 and lo == 0 and abs(lh - 0.25 * math.log(2)) <= 1e-12 and ident <= 1e-12
    report(3, ok, f"saturated L_center {lc:.1e}, L_scale {ls}, L_offset {lo}; p=0.5 case off by "
                  f"{abs(lh - 0.25 * math.log(2)):.1e}; weighting identity off by {ident:.1e}")


def test_criterion_4_gaussian_mask(report):
    cfg = CodecConfig()
    rng = np.random.default_rng(4)
    aligned = all(gaussian_mask([o], 16, 16, cfg)[int(o.cy // 4), int(o.cx // 4)] == 1.0
                  for o in (ann(*rng.uniform(4, 60, 2), float(rng.uniform(8, 40)))
                            for _ in range(50)))
    worst = 0.0
    for _ in range(1000):
        a = ann(*rng.uniform(0, 64, 2), float(rng.uniform(8, 40)))
        b = ann(*rng.uniform(0, 64, 2), float(rng.uniform(8, 40)))
        both = gaussian_mask([a, b], 16, 16, cfg)
        expect = np.maximum(single_gauss(a, 16, 16, cfg), single_gauss(b, 16, 16, cfg))
        worst = max(worst, float(np.abs(both - expect).max()))
    # a negative cell's loss contribution shrinks as its mask value grows
    y = np.zeros((1, 2))
    y[0, 0] = 1
    p = np.array([[0.7, 0.3]])
    contrib = [center_loss(p, y, np.array([[1.0, m]]))[0] - center_loss(p, y, np.array([[1.0, 1.0]]))[0]
               for m in np.linspace(0, 1, 101)]
    mono = bool(np.all(np.diff(contrib) < 0)) and abs(contrib[-1]) <= 1e-15
    ok = aligned and worst <= 1e-12 and mono
    report(4, ok, f"M=1 at aligned centers: {aligned}; max composition error over 1000 pairs "
                  f"{worst:.1e}; (1-M)^beta negative term strictly decreasing: {mono}")


@pytest.mark.slow
def test_criterion_5_toy_training(runs, report):
    run = runs.get({})
    cfg = runs.base
    ap, mr = run[(0.5, "ap")], run[(0.5, "mr2")]
    opt = cfg.optimizer
    ok = (ap >= 0.90 and mr <= 0.15 and run["seconds"] <= 900 and opt["iterations"] <= 3000
          and opt["batch_size"] == 8 and run["rows"][0]["n_images"] == 100)
    report(5, ok, f"toy preset ({opt['iterations']} iters, batch {opt['batch_size']}): AP@0.5 {ap:.4f} "
                  f"(>=0.90), MR-2 {mr:.4f} (<=0.15), {run['seconds']:.0f}s (<=900s)")


@pytest.mark.slow
def test_criterion_6_offset_ablation(runs, report):
    r8_on = runs.get(_merge(ABLATION, _both("r", 8)))
    r8_off = runs.get(_merge(ABLATION, _both("r", 8), _both("offset_enabled", False)))
    r4_on = runs.get(ABLATION)
    r4_off = runs.get(_merge(ABLATION, _both("offset_enabled", False)))
    ce = (r8_on[(0.5, "center_error")], r8_off[(0.5, "center_error")])
    ap8 = (r8_on[(0.75, "ap")], r8_off[(0.75, "ap")])
    gap50 = abs(r4_on[(0.5, "ap")] - r4_off[(0.5, "ap")])
    gap75 = r4_on[(0.75, "ap")] - r4_off[(0.75, "ap")]
    ok = ce[0] < ce[1] and ap8[0] > ap8[1] and gap50 <= 0.03 and gap75 > 0
    report(6, ok, f"r=8 center err on/off {ce[0]:.3f}/{ce[1]:.3f}px, AP@0.75 on/off "
                  f"{ap8[0]:.4f}/{ap8[1]:.4f}; r=4 AP@0.5 gap {gap50:.4f} (<=0.03), "
                  f"AP@0.75 gap {gap75:+.4f} (>0)")


@pytest.mark.slow
def test_criterion_7_scale_mode_ablation(runs, report):
    hw = _both("scale_mode", "height_width")
    face_h = runs.get(_merge(ABLATION, FACE))
    face_hw = runs.get(_merge(ABLATION, FACE, hw))
    fixed_h = runs.get(ABLATION)
    fixed_hw = runs.get(_merge(ABLATION, hw))
    face_gap = face_hw[(0.75, "ap")] - face_h[(0.75, "ap")]
    fixed_gap = abs(fixed_hw[(0.75, "ap")] - fixed_h[(0.75, "ap")])
    ok = face_gap >= 0.05 and fixed_gap <= 0.03
    report(7, ok, f"face AP@0.75 height_width/height {face_hw[(0.75, 'ap')]:.4f}/"
                  f"{face_h[(0.75, 'ap')]:.4f} (gap {face_gap:+.4f} >= 0.05); fixed-aspect "
                  f"{fixed_hw[(0.75, 'ap')]:.4f}/{fixed_h[(0.75, 'ap')]:.4f} (|gap| {fixed_gap:.4f} <= 0.03)")


@pytest.mark.slow
def test_criterion_8_center_disturbance(runs, report):
    rows = []
    for radius in (0, 4, 8):
        for seed in (0, 1, 2):
            over = _merge(ABLATION, {"seed": seed} if seed else {},
                          {"data": {"center_jitter": float(radius)}} if radius else {})
            for row in runs.get(over)["rows"]:
                rows.append({**row, "setting": f"jitter={radius}"})
    mr = summarize(rows, "mr2", 0.5)
    ap75 = summarize(rows, "ap", 0.75)
    m = [mr[f"jitter={r}"] for r in (0, 4, 8)]
    a = [ap75[f"jitter={r}"] for r in (0, 4, 8)]
    ok = m[0] < m[1] < m[2]
    report(8, ok, "seed-averaged MR-2@0.5 for jitter 0/4/8px: " + "/".join(f"{v:.4f}" for v in m)
           + " (strictly increasing); AP@0.75: " + "/".join(f"{v:.4f}" for v in a))


def test_criterion_9_evaluation_oracle(report):
    dets, gts = three_image_fixture()
    m = evaluate(dets, gts, 0.5)
    mr_expect = math.exp((8 * math.log(1 / 3) + math.log(1e-6)) / 9)
    fixture_ok = abs(m["mr2"] - mr_expect) <= 1e-9 and abs(m["ap"] - 5 / 6) <= 1e-9
    perfect = [[Detection(a.box, 1.0) for a in im] for im in gts]
    p = evaluate(perfect, gts, 0.5)
    miss = evaluate([[] for _ in gts], gts, 0.5)
    edge_ok = p["ap"] == 1.0 and abs(p["mr2"] - 1e-6) <= 1e-15 and miss["ap"] == 0.0 and miss["mr2"] == 1.0
    dup = match_detections([dets[0][0], dets[0][1]], gts[0][:1], 0.5)
    ok = fixture_ok and edge_ok and dup.n_tp == 1
    report(9, ok, f"fixture MR-2 {m['mr2']:.9f} vs {mr_expect:.9f}, AP {m['ap']:.9f} vs {5 / 6:.9f}; "
                  f"perfect AP {p['ap']} MR-2 {p['mr2']:.0e}; all-miss AP {miss['ap']} MR-2 {miss['mr2']}")


def _pipeline(tmp: Path) -> Path:
    tmp.mkdir()
    cfgp = tmp / "run.json"
    smoke = json.loads((ROOT / "configs" / "smoke.json").read_text())
    smoke["output_dir"] = "out"
    cfgp.write_text(json.dumps(smoke))
    assert cli.main(["train", "--config", str(cfgp)]) == 0
    assert cli.main(["generate", "--config", str(cfgp), "--out", str(tmp / "val")]) == 0
    ann = tmp / "val" / "annotations.jsonl"
    assert cli.main(["detect", "--checkpoint", str(tmp / "out" / "final"), "--input", str(ann),
                     "--out", str(tmp / "dets.jsonl")]) == 0
    assert cli.main(["eval", "--dets", str(tmp / "dets.jsonl"), "--gt", str(ann),
                     "--out", str(tmp / "eval")]) == 0
    return tmp / "eval"


@pytest.mark.slow
def test_criterion_10_determinism(tmp_path, report):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    names = sorted(p.name for p in a.glob("*.csv"))
    same = names == sorted(p.name for p in b.glob("*.csv")) and all(
        (a / n).read_bytes() == (b / n).read_bytes() for n in names)
    with open(a / "metrics.csv", newline="") as fh:
        ap = [row["ap"] for row in csv.DictReader(fh)]
    report(10, same and "metrics.csv" in names,
           f"two train+detect+eval runs: {len(names)} CSV files byte-identical: {same} (AP {', '.join(ap)})")
