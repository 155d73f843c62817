"""End-to-end acceptance checks, one test per criterion.

Each test prints a PASS/FAIL line (collected in the terminal summary) and
asserts the criterion at its stated tolerance and time budget.
"""

import json
import math
import time

import numpy as np
import pytest

from mmnet import layers as L
from mmnet import model as M
from mmnet.bench import activation_bench, bench_ordering, bench_table
from mmnet.cli import main
from mmnet.fishdb import SAMPLE_CSV, Basis, Category, ConsumabilityPipeline, FishDB, Verdict
from mmnet.layers import ConvParams
from mmnet.metrics import ConfusionMatrix, accuracy, micro_average
from mmnet.synthetic import separable_embeddings, texture_dataset
from mmnet.training import TrainConfig, gradient_check, scaled_learning_rate, train_head


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


def test_c01_head_reduction_arithmetic(capsys, criterion):
    c = criterion(1, "head-reduction arithmetic")
    with Timer() as t:
        code = main(["params", "--head", "reduced", "--json"])
    out = json.loads(capsys.readouterr().out)
    c.check(code == 0, "params exits 0")
    c.check(out["baseline_top"] == 1_025_000, f"baseline top {out['baseline_top']:,} == 1,025,000")
    c.check(out["reduced_trunk"] == 530_944, f"reduced trunk {out['reduced_trunk']:,} == 530,944")
    rel = abs(out["reduced_trunk"] - 531_000) / 531_000
    c.check(rel <= 2e-4, f"|trunk - 531,000| / 531,000 = {rel:.2e} <= 2e-4")
    c.check(out["ratio"] <= 0.52, f"ratio {out['ratio']:.4f} <= 0.52")
    c.check(t.seconds < 1.0, f"runtime {t.seconds:.3f}s < 1s")
    c.done()


def test_c02_dataset_split(capsys, criterion):
    c = criterion(2, "dataset split")
    with Timer() as t:
        code = main(["split", "--n", "37462", "--ratio", "0.8", "--json"])
    out = json.loads(capsys.readouterr().out)
    c.check(code == 0 and (out["train"], out["test"]) == (29_970, 7_492), f"split {out['train']:,} / {out['test']:,} == 29,970 / 7,492")
    c.check(t.seconds < 1.0, f"runtime {t.seconds:.3f}s < 1s")
    c.done()


def test_c03_gradient_correctness(criterion):
    c = criterion(3, "gradient correctness")
    with Timer() as t:
        spec = M.head_only_spec("reduced", 3, in_features=16, hidden=8)
        w = M.init_weights(spec, 0, np.float64)
        rng = np.random.default_rng(0)
        for name in w.names():
            if name.endswith("/gamma"):
                w[name][...] = rng.uniform(0.5, 1.5, w[name].shape)
            elif name.endswith("/beta"):
                w[name][...] = rng.normal(0.0, 0.2, w[name].shape)
        ds = separable_embeddings(3, 6, 16, seed=10, spread=1.0)
        feats = ds.images.reshape(len(ds), 16).astype(np.float64)
        errs = gradient_check(spec, w, feats, ds.labels, h=1e-4, seed=0)
    worst = max(errs, key=errs.get)
    c.note(f"{len(errs)} parameter tensors")
    c.check({n.rsplit('/', 1)[1] for n in errs} == {"weights", "bias", "gamma", "beta"}, "dense weight/bias and BN gamma/beta all checked")
    c.check(errs[worst] < 1e-4, f"max relative error {errs[worst]:.2e} ({worst}) < 1e-4")
    c.check(t.seconds < 10.0, f"runtime {t.seconds:.2f}s < 10s")
    c.done()


def test_c04_activation_identities(criterion):
    c = criterion(4, "activation identities")
    with Timer() as t:
        x = np.linspace(-10.0, 10.0, 1001)
        tanh_err = np.max(np.abs(np.tanh(x) - (2 * L.sigmoid(2 * x) - 1)))
        s = L.swish(x)
        sig = L.sigmoid(x)
        analytic = L.activation_derivative(L.SWISH, x)
        closed = s + sig * (1 - s)
        h = 1e-5
        central = (L.swish(x + h) - L.swish(x - h)) / (2 * h)
        d_err = max(np.max(np.abs(analytic - closed)), np.max(np.abs(analytic - central)))
    c.check(tanh_err <= 1e-12, f"tanh identity max err {tanh_err:.1e} <= 1e-12")
    c.check(d_err <= 1e-6, f"swish derivative max err {d_err:.1e} <= 1e-6 (closed form and central difference)")
    c.check(t.seconds < 1.0, f"runtime {t.seconds:.3f}s < 1s")
    c.done()


def _brute_conv_same(x, k):
    """Loop-level stride-1 'same' cross-correlation, odd square kernel."""
    n, h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((n, h + 2 * ph, w + 2 * pw, cin))
    xp[:, ph : ph + h, pw : pw + w] = x
    out = np.zeros((n, h, w, cout))
    for b in range(n):
        for r in range(h):
            for col in range(w):
                for o in range(cout):
                    out[b, r, col, o] = np.sum(xp[b, r : r + kh, col : col + kw, :] * k[:, :, :, o])
    return out


def test_c05_separable_equivalence(criterion):
    c = criterion(5, "separable-convolution equivalence")
    rng = np.random.default_rng(5)
    worst = 0.0
    with Timer() as t:
        for _ in range(20):
            x = rng.normal(size=(1, 5, 5, 2))
            dw = rng.normal(size=(3, 3, 2))
            pw = rng.normal(size=(2, 4))
            sep = L.conv2d(x, ConvParams(dw, mode=L.ConvMode.DEPTHWISE))
            sep = L.conv2d(sep, ConvParams(pw[None, None], mode=L.ConvMode.POINTWISE))
            composed = dw[:, :, :, None] * pw[None, None, :, :]
            worst = max(worst, float(np.max(np.abs(sep - _brute_conv_same(x, composed)))))
    c.check(worst <= 1e-6, f"20 random 5x5x2 inputs, max abs diff {worst:.1e} <= 1e-6")
    c.check(t.seconds < 5.0, f"runtime {t.seconds:.2f}s < 5s")
    c.done()


def test_c06_metric_oracle(criterion):
    c = criterion(6, "metric oracle")
    rng = np.random.default_rng(6)
    worst = 0.0
    with Timer() as t:
        for _ in range(100):
            k = int(rng.integers(2, 12))
            counts = rng.integers(0, 50, (k, k))
            cm = ConfusionMatrix(counts)
            m, acc = micro_average(cm), accuracy(cm)
            worst = max(worst, abs(m.precision - acc), abs(m.recall - acc), abs(m.f_score - acc))
        hand = ConfusionMatrix([[2, 0, 0], [1, 1, 0], [0, 0, 1]])
        hand_acc = accuracy(hand)
    c.check(worst <= 1e-12, f"100 random matrices, micro P/R/F1 vs accuracy max diff {worst:.1e} <= 1e-12")
    c.check(hand_acc == 4 / 5, f"hand 3-class example accuracy {hand_acc} == 0.8")
    c.check(t.seconds < 1.0, f"runtime {t.seconds:.3f}s < 1s")
    c.done()


@pytest.fixture(scope="module")
def textures():
    return texture_dataset(10, 200, 32, seed=0)


@pytest.mark.slow
def test_c07_training_surrogate(textures, criterion):
    c = criterion(7, "desk-scale training surrogate")
    with Timer() as t:
        spec = M.build_model(10, "reduced", (32, 32, 3), head_activation=L.SWISH)
        w = M.init_weights(spec, 0)
        lr = scaled_learning_rate(len(textures))
        rep = train_head(spec, w, textures, TrainConfig(learning_rate=lr, epochs=50, batch_size=32, seed=0, activation=L.SWISH))
    losses = rep.losses()
    acc = rep.epochs[-1].train_accuracy
    first, last = float(np.mean(losses[:5])), float(np.mean(losses[-5:]))
    c.note(f"lr {lr:.3g} (1e-4 scaled to {len(textures)} images)")
    c.check(len(rep.epochs) == 50, "50 epochs")
    c.check(acc >= 0.95, f"final train accuracy {acc:.4f} >= 0.95")
    c.check(last < first, f"mean loss last 5 {last:.4f} < first 5 {first:.4f}")
    c.check(t.seconds < 300, f"runtime {t.seconds:.1f}s < 300s")
    c.done()


def test_c08_activation_bench(textures, criterion):
    c = criterion(8, "activation x batch-size harness")
    train = textures.take(np.arange(0, len(textures), 4))
    val = textures.take(np.arange(1, len(textures), 8))
    acts = [L.SIGMOID, L.TANH, L.RELU, L.SWISH]
    kw = dict(activations=acts, batch_sizes=[16, 32, 64], epochs=5, learning_rate=scaled_learning_rate(len(train)), seed=8)
    rows = activation_bench(train, val, **kw)
    again = activation_bench(train, val, **kw)
    cells = {(r.activation, r.batch_size) for r in rows}
    c.check(cells == {(str(a), b) for a in acts for b in (16, 32, 64)}, f"{len(cells)} of 12 table cells present")
    c.check(all(math.isfinite(r.final_loss) and r.val_accuracy is not None for r in rows), "every cell has finite loss and held-out accuracy")
    c.check(rows == again, "second run with the same seed is identical")
    order = bench_ordering(rows)
    c.note(f"swish > relu at each batch size (informational): {order['swish_beats_relu']}")
    print(bench_table(rows))
    c.done()


def test_c09_consumability_pipeline(criterion):
    c = criterion(9, "consumability pipeline")
    with Timer() as t:
        db = FishDB.from_csv(SAMPLE_CSV)
        names = [r.species for r in db.records] + ["Arothron unlistedus"]
        spec = M.head_only_spec("baseline", len(names), in_features=4)
        w = M.init_weights(spec, 0)
        w["head/classifier/weights"][...] = 0
        pipe = ConsumabilityPipeline(spec, w, names, db)
        results = []
        for k in range(len(names)):
            w["head/classifier/bias"][...] = 0
            w["head/classifier/bias"][k] = 5.0
            results.append(pipe.classify(np.ones((1, 1, 1, 4), np.float32))[0])
    expected = {r.species: (Verdict.CONSUMABLE if r.category is Category.COMMERCIAL else Verdict.UNCONSUMABLE) for r in db.records}
    c.note(f"{len(db.records)} fixture rows ({sum(r.category is Category.DANGER for r in db.records)} Danger)")
    c.check([n for n, _ in results] == names, "stage 1 returns each forced class")
    wrong = [n for n, v in results[:-1] if v.label is not expected[n] or v.basis is not Basis.SPECIES]
    c.check(not wrong, f"every listed species maps by category (mismatches: {wrong})")
    fallback = results[-1][1]
    c.check((fallback.label, fallback.basis) == (Verdict.UNCONSUMABLE, Basis.GENUS), "Arothron genus fallback -> Unconsumable")
    c.check(t.seconds < 1.0, f"runtime {t.seconds:.3f}s < 1s")
    c.done()


@pytest.mark.slow
def test_c10_determinism(tmp_path, capsys, criterion):
    c = criterion(10, "train determinism")
    args = ["train", "--synthetic-classes", "10", "--per-class", "40", "--input-size", "32", "--epochs", "10", "--batch-size", "32", "--seed", "10"]
    runs = []
    for tag in ("a", "b"):
        code = main(args + ["--out", str(tmp_path / f"{tag}.mmnw"), "--report", str(tmp_path / f"{tag}.jsonl")])
        capsys.readouterr()
        c.check(code == 0, f"run {tag} exits 0")
        rows = [json.loads(l) for l in (tmp_path / f"{tag}.jsonl").read_text().splitlines()]
        for r in rows:
            r.pop("seconds", None)
        runs.append(((tmp_path / f"{tag}.mmnw").read_bytes(), rows))
    c.check(runs[0][0] == runs[1][0], f"weight files byte-identical ({len(runs[0][0]):,} bytes)")
    c.check(runs[0][1] == runs[1][1], f"reports identical with timings excluded ({len(runs[0][1]) - 1} epochs)")
    c.done()
