"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line; the same lines are
repeated in the terminal summary. The training-based criteria share one
cross-validation run driven through the command line, as a user would run it.
"""
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from conftest import fd_cases, verdict
from test_metrics import qwk_oracle
from test_nn import BN_EPS, _backbone_case, _ds_block_case
from test_preproc import mec_oracle

from drtriage import autodiff as ad
from drtriage import coral, dataset, metrics, modelio, nn, train
from drtriage.autodiff import Tensor
from drtriage.cli import main
from drtriage.coral import CoralHead
from drtriage.config import load_run_config

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "acceptance.json"
FD_CASES = 50


def _with(tmp: Path, name: str, **changes) -> Path:
    d = json.loads(CONFIG.read_text())
    for key, value in changes.items():
        if isinstance(value, dict):
            d[key] = {**d.get(key, {}), **value}
        else:
            d[key] = value
    path = tmp / name
    path.write_text(json.dumps(d))
    return path


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def cv_run(work):
    out = work / "cv"
    start = time.perf_counter()
    code = main(["--single-thread", "train", "--config", str(CONFIG), "--out", str(out)])
    elapsed = time.perf_counter() - start
    assert code == 0
    return out, elapsed


@pytest.fixture(scope="module")
def exported(cv_run, work):
    out, _ = cv_run
    model = work / "best.rtm"
    assert main(["export", "--run-dir", str(out), "--output", str(model)]) == 0
    return model


def test_criterion_01_end_to_end_cross_validation(cv_run):
    out, elapsed = cv_run
    s = json.loads((out / "summary.json").read_text())
    q, a = s["qwk"]["mean"], s["accuracy"]["mean"]
    ok = elapsed <= 900 and q >= 0.80 and a >= 0.60
    verdict(1, ok, f"600 synthetic images, 3 folds: qwk {q:.4f} (>= 0.80), accuracy {a:.4f} (>= 0.60), {elapsed:.0f} s (<= 900)")


def test_criterion_02_errors_fall_on_adjacent_grades(cv_run):
    out, _ = cv_run
    report = json.loads((out / "oof-report.json").read_text())
    cm = np.asarray(report["confusion"])
    frac = metrics.adjacency_fraction(cm)
    errors = int(cm.sum() - np.trace(cm))
    verdict(2, frac >= 0.8, f"adjacency fraction {frac:.4f} over {errors} held-out errors (>= 0.8)")


def test_criterion_03_coral_versus_softmax_ablation(work, capsys):
    out = work / "ablation"
    assert main(["--single-thread", "ablate", "--config", str(CONFIG), "--out", str(out)]) == 0
    table = capsys.readouterr().out
    report = json.loads((out / "ablation.json").read_text())
    assert [s["seed"] for s in report["coral"]] == [s["seed"] for s in report["softmax"]] == [0, 1, 2]
    with capsys.disabled():
        print("\n" + table)
    c, s = report["coral_mean"]["mae"], report["softmax_mean"]["mae"]
    verdict(3, c <= s, f"mean abs grade error over seeds 0-2: coral {c:.4f}, softmax {s:.4f} (coral <= softmax)")


def _binary(op):
    def make(rng):
        shape = tuple(int(v) for v in rng.integers(1, 5, size=3))
        other = tuple(1 if rng.random() < 0.4 else d for d in shape)
        proj = rng.normal(size=shape)
        f = lambda a, b: ad.sum(ad.mul(op(a, b), Tensor(proj)))  # noqa: E731
        return f, [Tensor(rng.normal(size=shape), True), Tensor(rng.normal(size=other), True)]

    return make


def _unary(op, sample):
    def make(rng):
        shape = tuple(int(v) for v in rng.integers(1, 5, size=3))
        proj = rng.normal(size=shape)
        return (lambda a: ad.sum(ad.mul(op(a), Tensor(proj)))), [Tensor(sample(rng, shape), True)]

    return make


def _matmul(rng):
    n, k, m = (int(v) for v in rng.integers(1, 5, size=3))
    proj = rng.normal(size=(n, m))
    f = lambda a, b: ad.sum(ad.mul(ad.matmul(a, b), Tensor(proj)))  # noqa: E731
    return f, [Tensor(rng.normal(size=(n, k)), True), Tensor(rng.normal(size=(k, m)), True)]


def _conv(rng):
    groups = int(rng.choice([1, 2]))
    depthwise = rng.random() < 0.4
    cin = groups * int(rng.integers(1, 3))
    cout = cin if depthwise else groups * int(rng.integers(1, 3))
    groups = cin if depthwise else groups
    k = int(rng.choice([1, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, k // 2 + 1))
    x = rng.normal(size=(int(rng.integers(1, 3)), cin, 5, 5))
    w = rng.normal(size=(cout, cin // groups, k, k))
    proj = rng.normal(size=ad.conv2d(Tensor(x), Tensor(w), stride, pad, groups).shape)
    f = lambda a, b: ad.sum(ad.mul(ad.conv2d(a, b, stride, pad, groups), Tensor(proj)))  # noqa: E731
    return f, [Tensor(x, True), Tensor(w, True)]


def _reshape_sum(rng):
    shape = tuple(int(v) for v in rng.integers(1, 5, size=3))
    axis = int(rng.integers(0, 3))
    proj = rng.normal(size=shape[:axis] + shape[axis + 1 :])

    def f(a):
        r = ad.reshape(ad.reshape(a, (int(np.prod(shape)),)), shape)
        return ad.sum(ad.mul(ad.sum(r, axis=axis), Tensor(proj)))

    return f, [Tensor(rng.normal(size=shape), True)]


def _global_mean(rng):
    shape = tuple(int(v) for v in rng.integers(1, 5, size=4))
    proj = rng.normal(size=shape[:2])
    return (lambda a: ad.sum(ad.mul(ad.global_mean(a), Tensor(proj)))), [Tensor(rng.normal(size=shape), True)]


def _se(rng):
    n, c, r, side = int(rng.integers(1, 3)), int(rng.integers(2, 7)), int(rng.integers(1, 4)), int(rng.integers(1, 5))
    shapes = [(n, c, side, side), (c, r), (r,), (r, c), (c,)]
    proj = rng.normal(size=shapes[0])
    f = lambda *a: ad.sum(ad.mul(nn.se_block(*a), Tensor(proj)))  # noqa: E731
    return f, [Tensor(rng.normal(size=s), True) for s in shapes]


def _coral_loss(rng):
    n = int(rng.integers(1, 6))
    t = coral.smooth(coral.cumulative_targets(rng.integers(0, 5, size=n)), 0.05)
    f = lambda fe, w, b: coral.coral_loss(coral.coral_logits(fe, CoralHead(w, b)), t)  # noqa: E731
    return f, [
        Tensor(rng.normal(size=(n, 6)), True),
        Tensor(rng.normal(size=6), True),
        Tensor(np.sort(rng.normal(size=4))[::-1].copy(), True),
    ]


FD_TARGETS = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "scalar_mul": _unary(lambda a: ad.scalar_mul(a, -1.7), lambda r, s: r.normal(size=s)),
    "matmul": _matmul,
    "conv2d": _conv,
    "relu6": _unary(ad.relu6, lambda r, s: r.uniform(-2, 8, size=s)),
    "sigmoid": _unary(ad.sigmoid, lambda r, s: r.normal(scale=3, size=s)),
    "log": _unary(ad.log, lambda r, s: r.uniform(0.2, 5, size=s)),
    "exp": _unary(ad.exp, lambda r, s: r.normal(size=s)),
    "global_mean": _global_mean,
    "reshape+sum": _reshape_sum,
    "se_block": _se,
    "ds_block": _ds_block_case,
    "backbone": _backbone_case,
    "coral_loss": _coral_loss,
}


def test_criterion_04_gradients(kinks):
    rng = np.random.Generator(np.random.PCG64(4))
    worst = {}
    for name, make in FD_TARGETS.items():
        eps = BN_EPS if name in ("ds_block", "backbone") else 1e-3
        worst[name], _ = fd_cases(kinks, make, FD_CASES, rng, eps=eps)
    closed = 0.0
    for _ in range(500):
        n = int(rng.integers(1, 8))
        x = Tensor(rng.normal(scale=4, size=(n, 4)), requires_grad=True)
        t = coral.smooth(coral.cumulative_targets(rng.integers(0, 5, size=n)), 0.05)
        coral.coral_loss(x, t).backward()
        expected = (coral._sigmoid(x.data) - t) / n
        closed = max(closed, float(np.abs(x.grad - expected).max()))
    name = max(worst, key=worst.get)
    ok = max(worst.values()) <= 1e-3 and closed <= 1e-6
    verdict(
        4, ok,
        f"{len(worst)} targets x {FD_CASES} cases, worst relative error {worst[name]:.2e} ({name}) <= 1e-3; "
        f"closed-form coral gradient gap {closed:.1e} <= 1e-6",
    )


def test_criterion_05_qwk_oracle():
    rng = np.random.Generator(np.random.PCG64(5))
    gap = 0.0
    scaled = 0.0
    for _ in range(1000):
        cm = rng.integers(0, 30, size=(5, 5))
        cm[0, 0] += 1
        cm[4, 4] += 1
        q = metrics.qwk(cm)
        gap = max(gap, abs(q - qwk_oracle(cm.tolist())))
        scaled = max(scaled, abs(metrics.qwk(cm * int(rng.integers(2, 9))) - q))
    perfect = metrics.qwk(np.diag([3, 1, 4, 1, 5]))
    ok = gap <= 1e-12 and perfect == 1.0 and scaled <= 1e-12
    verdict(5, ok, f"1000 matrices: max oracle gap {gap:.1e}; perfect diagonal {perfect!r}; scaling drift {scaled:.1e}")


def test_criterion_06_rank_consistency():
    rng = np.random.Generator(np.random.PCG64(6))
    bad_order = bad_decode = 0
    for _ in range(10_000):
        d = int(rng.integers(1, 9))
        head = CoralHead(Tensor(rng.normal(size=d), dtype=np.float64),
                         Tensor(np.sort(rng.normal(scale=3, size=4))[::-1].copy(), dtype=np.float64))
        logits = coral.coral_logits(Tensor(rng.normal(size=d), dtype=np.float64), head).data[0]
        grade, probs = coral.decode(logits)
        bad_order += bool(np.any(np.diff(probs) > 0))
        bad_decode += any(coral.decode(coral.apply_temperature(logits, T))[0] != grade for T in (0.1, 1, 3, 10))
    verdict(6, bad_order == 0 and bad_decode == 0,
            f"10000 triples: {bad_order} with increasing probabilities, {bad_decode} with temperature-dependent grades")


def test_criterion_07_min_enclosing_circle():
    from drtriage.preproc import min_enclosing_circle

    rng = np.random.Generator(np.random.PCG64(7))
    gap = 0.0
    outside = 0
    for _ in range(200):
        pts = rng.uniform(-50, 50, size=(int(rng.integers(1, 13)), 2))
        cx, cy, r = min_enclosing_circle(pts)
        gap = max(gap, abs(r - mec_oracle(pts)[2]))
        outside += int(np.any(np.hypot(pts[:, 0] - cx, pts[:, 1] - cy) > r + 1e-9))
    verdict(7, gap <= 1e-9 and outside == 0, f"200 point sets: radius gap {gap:.1e} <= 1e-9, {outside} sets with points outside")


def test_criterion_08_calibration(exported, work):
    rng = np.random.Generator(np.random.PCG64(8))
    base = rng.normal(scale=1.5, size=(4000, 4))
    targets = (rng.random(base.shape) < coral._sigmoid(base)).astype(float)
    T_fit = coral.fit_temperature(3 * base, targets)

    calibrated = work / "calibrated.rtm"
    fit_cfg, held_cfg = CONFIG.with_name("calib.json"), CONFIG.with_name("eval.json")
    assert main(["calibrate", "--model", str(exported), "--config", str(fit_cfg), "--output", str(calibrated)]) == 0
    ece = {}
    for name, model in (("before", exported), ("after", calibrated)):
        assert main(["evaluate", "--model", str(model), "--config", str(held_cfg), "--out", str(work / f"eval-{name}")]) == 0
        ece[name] = json.loads((work / f"eval-{name}" / "report.json").read_text())["ece"]
    T = modelio.load_model(calibrated.read_bytes()).temperature
    ok = 2.85 <= T_fit <= 3.15 and ece["after"] <= ece["before"]
    verdict(8, ok, f"3x-sharpened logits give T {T_fit:.4f} in [2.85, 3.15]; held-out ece {ece['before']:.4f} -> "
                   f"{ece['after']:.4f} with T {T:.3f} fitted on a separate synthetic split")


def test_criterion_09_determinism_and_serialization(work):
    cfg_path = _with(work, "small.json", dataset={"per_grade": 10}, train={"epochs": 2, "folds": 2})
    runs = []
    for name in ("first", "second"):
        assert main(["--single-thread", "train", "--config", str(cfg_path), "--out", str(work / name)]) == 0
        runs.append(work / name)
    compared = ["summary.json", "fold0.rtm", "fold1.rtm"]
    identical = all((runs[0] / f).read_bytes() == (runs[1] / f).read_bytes() for f in compared)

    cfg = load_run_config(cfg_path)
    man = dataset.synth_manifest(60, replace(dataset.SynthParams(), seed=9))
    data = train.prepare(cfg.load_dataset(), cfg.preproc)
    labels = data.labels
    tr, va = (data.subset(np.flatnonzero(np.arange(len(labels)) % 2 == k)) for k in (0, 1))
    _, model = train.train_fold(tr, va, cfg.backbone, replace(cfg.train, epochs=1), cfg.preproc, cfg.augment)
    blob = modelio.save_model(model)
    roundtrip = modelio.save_model(modelio.load_model(blob)) == blob
    loaded = modelio.load_model(blob)

    test = train.prepare(man, cfg.preproc)
    idx = np.random.Generator(np.random.PCG64(9)).choice(len(test), 100, replace=False)
    mem = train.predict(model, test.subset(idx))
    mem_probs = coral._sigmoid(mem.logits)
    grade_mismatch, prob_gap = 0, 0.0
    for row, i in enumerate(idx):
        grade, probs, _ = modelio.infer(loaded, dataset.load_pixels(man.samples[i]))
        grade_mismatch += int(grade != mem.grades[row])
        prob_gap = max(prob_gap, float(np.abs(probs - mem_probs[row]).max()))

    errors = []
    bad_magic = b"XTM1" + blob[4:]
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0x01
    for buf, expected in ((bad_magic, modelio.BadMagicError), (bytes(flipped), modelio.ChecksumError)):
        try:
            modelio.load_model(buf)
            errors.append("accepted")
        except expected:
            pass
        except modelio.ModelFormatError as exc:
            errors.append(type(exc).__name__)
    ok = identical and roundtrip and grade_mismatch == 0 and prob_gap <= 1e-6 and not errors
    verdict(
        9, ok,
        f"reruns identical {identical}; RTM1 roundtrip bitwise {roundtrip}; 100 images: {grade_mismatch} grade "
        f"mismatches, max prob gap {prob_gap:.1e} <= 1e-6; corruption typed errors {'ok' if not errors else errors}",
    )


def test_criterion_10_dataset_arithmetic():
    merged = dataset.merge(dataset.bundled_manifest("aptos"), dataset.bundled_manifest("idrid"))
    counts = merged.counts
    ok = counts == [1973, 395, 1167, 286, 357] and len(merged) == 4178
    verdict(10, ok, f"merged bundled manifests: per-class {counts}, total {len(merged)}")
