"""End-to-end acceptance run: one PASS/FAIL line per criterion.

Long training runs are cached under ``acceptance_runs/`` (override with
``SETVEC_ACCEPTANCE_DIR``). A cached checkpoint is reused only when its stored
training config equals the one requested here and it finished every epoch; a
partially finished run is resumed. Deleting the directory forces a fresh run.
"""

import os
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from setvec import checkpoint as C
from setvec import data as D
from setvec import metrics
from setvec import model as M
from setvec import tensor as T
from setvec.errors import FormatError
from setvec.evaluate import evaluate
from setvec.seeding import substream
from setvec.train import TrainConfig, read_log, train

ROOT = Path(__file__).resolve().parents[1]
RUNS = Path(os.environ.get("SETVEC_ACCEPTANCE_DIR", ROOT / "acceptance_runs"))

# tolerances and thresholds of the acceptance criteria
R2_DIGITS = 0.90
AUC_DIGITS = 0.85
RANDOM_BASELINE = (0.45, 0.55)
PERM_RTOL = 1e-9
PRIMITIVE_TOL = 1e-4
END_TO_END_TOL = 1e-3
AUC_ORACLE_TOL = 1e-9
R2_PHANTOM = 0.8
AUC_PHANTOM = 0.7
MAX_EPOCHS = 30

# synthetic prime-sum task: 2,000 training bags of 20-50 digits, 500 held out
DIGIT_DATA = dict(n_train=2000, n_test=500, min_size=20, max_size=50)
DIGIT_TRAIN = dict(lambda1=100.0, lambda2=0.01, epochs=MAX_EPOCHS, pool_mode="gated_sum", bags_per_step=1)
# phantom severity task: 400 training subjects, 200 held out
PHANTOM_DATA = dict(n_train=400, n_test=200)
# batch statistics carry bag-level intensity, so eval-mode running stats mispredict; volumes train without them
PHANTOM_TRAIN = dict(lambda1=100.0, lambda2=0.01, epochs=30, target_norm="standardize",
                     arch=M.ArchConfig.for_volumes(dtype="float32", batchnorm=False))


def report(criterion, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def trained(name: str, cfg: TrainConfig, bags):
    """Train ``cfg`` on ``bags`` under ``RUNS/name``, reusing or resuming a matching checkpoint."""
    run = RUNS / name
    run.mkdir(parents=True, exist_ok=True)
    ck_path, log_path = run / "checkpoint.bin", run / "metrics.ndjson"
    resume = None
    if ck_path.is_file() and log_path.is_file():
        ck = C.load_checkpoint(ck_path)
        # the learning rate is fixed and shuffles are keyed by epoch, so a shorter run extends exactly
        if {**ck.config, "epochs": cfg.epochs} == cfg.to_dict():
            if ck.epoch == cfg.epochs:
                return ck.params, read_log(log_path)
            if ck.epoch < cfg.epochs:
                resume = ck
    train(bags, cfg, log_path=log_path, checkpoint_path=ck_path, resume=resume)
    return C.load_checkpoint(ck_path).params, read_log(log_path)


@pytest.fixture(scope="module")
def digit_splits():
    src = Path(os.environ.get("SETVEC_DIGITS_DIR", ROOT / "data" / "digits"))
    try:
        pairs = D.find_idx_pair(src, "train"), D.find_idx_pair(src, "test")
    except FileNotFoundError:
        src = RUNS / "digits"
        try:
            D.write_bundled_digits(src)
        except FileNotFoundError as exc:
            pytest.skip(f"no digit images available: {exc}")
        pairs = D.find_idx_pair(src, "train"), D.find_idx_pair(src, "test")
    train_ds, test_ds = D.load_digits(*pairs[0]), D.load_digits(*pairs[1])
    return D.make_digit_splits(train_ds, test_ds, 0, DIGIT_DATA["n_train"], DIGIT_DATA["n_test"],
                               DIGIT_DATA["min_size"], DIGIT_DATA["max_size"])


@pytest.fixture(scope="module")
def digit_model(digit_splits):
    cfg = TrainConfig(**DIGIT_TRAIN)
    params, log = trained("digits_lambda1_100", cfg, digit_splits[0])
    return cfg, params, log, evaluate(digit_splits[1], params, cfg.pool_mode)


class TestAcceptance:
    def test_criterion_1_prediction(self, digit_model):
        cfg, _, log, rep = digit_model
        r2 = rep.summary.r2
        ok = r2 >= R2_DIGITS and len(log) <= MAX_EPOCHS
        report(1, ok, f"held-out R2 = {r2:.4f} after {len(log)} epochs ({cfg.pool_mode} pool), "
                      f"need >= {R2_DIGITS} within {MAX_EPOCHS}")
        assert ok

    def test_criterion_2_attention_auc(self, digit_splits, digit_model):
        bags = digit_splits[1]
        auc = digit_model[3].summary.mean_auc
        equal = metrics.attention_roc(bags, [np.full(len(b), 1.0 / len(b)) for b in bags]).mean_auc
        rng = substream(0, "random-baseline")
        random = metrics.attention_roc(bags, [rng.random(len(b)) for b in bags]).mean_auc
        ok = (auc >= AUC_DIGITS and auc > equal and auc > random
              and RANDOM_BASELINE[0] <= random <= RANDOM_BASELINE[1])
        report(2, ok, f"mean attention AUC = {auc:.4f} (need >= {AUC_DIGITS}); equal weights {equal:.4f}, "
                      f"seeded random {random:.4f} (need in {list(RANDOM_BASELINE)})")
        assert ok

    def test_criterion_3_lambda1_ablation(self, digit_splits, digit_model):
        cfg, _, _, rep100 = digit_model
        cfg0 = TrainConfig(**{**DIGIT_TRAIN, "lambda1": 0.0})
        params0, _ = trained("digits_lambda1_0", cfg0, digit_splits[0])
        rep0 = evaluate(digit_splits[1], params0, cfg0.pool_mode)
        er0, er100 = rep0.summary.effective_rank, rep100.summary.effective_rank
        sd0, sd100 = rep0.summary.extra["attention_std"], rep100.summary.extra["attention_std"]
        ok = er100 > er0 and sd0 < sd100
        report(3, ok, f"effective rank {er0:.3f} (lambda1=0) vs {er100:.3f} (lambda1=100); "
                      f"attention std {sd0:.5f} vs {sd100:.5f}; R2 {rep0.summary.r2:.4f} vs {rep100.summary.r2:.4f} "
                      "(reported)")
        assert ok

    def test_criterion_4_permutation(self, digit_splits, digit_model):
        cfg, params, _, _ = digit_model
        rng = substream(0, "permutations")
        bags = [digit_splits[1][i] for i in rng.choice(len(digit_splits[1]), 100, replace=False)]
        failures = 0
        for bag in bags:
            order = rng.permutation(len(bag))
            y0, a0, _ = M.forward_bag(bag, params, pool_mode=cfg.pool_mode)
            y1, a1, _ = M.forward_bag(bag.permuted(order), params, pool_mode=cfg.pool_mode)
            same_y = abs(y1 - y0) <= PERM_RTOL * max(abs(y0), 1e-300)
            failures += not (same_y and np.array_equal(a1.weights, a0.weights[order]))
        report(4, failures == 0, f"{failures} failures over {len(bags)} permuted bags "
                                 f"(y_hat rtol {PERM_RTOL}, alpha exact)")
        assert failures == 0

    def test_criterion_5_gradients(self):
        r = np.random.default_rng(5)

        def softmax_l2(v):
            return T.total(T.square(T.sub(T.softmax(v), 0.3)))

        def bn(training):
            return lambda x, g, b: T.batchnorm(x, g, b, np.full(2, 0.3), np.full(2, 2.0), training=training)[0]

        kink_free = r.normal(size=(4, 5))
        kink_free = np.where(np.abs(kink_free) < 0.05, 0.1, kink_free)
        checks = {
            "affine": (T.affine, [r.normal(size=(3, 4)), r.normal(size=(2, 4)), r.normal(size=2)]),
            "elu": (T.elu, [kink_free]),
            "sigmoid": (T.sigmoid, [r.normal(size=6) * 3]),
            "softmax": (softmax_l2, [r.normal(size=5)]),
            "colmax": (T.colmax, [r.permutation(np.arange(12.0)).reshape(4, 3) * 0.37]),
            "conv2d": (lambda x, K, b: T.conv2d(x, K, b, 2),
                       [r.normal(size=(2, 2, 7, 6)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)]),
            "conv3d": (lambda x, K, b: T.conv3d(x, K, b, 2),
                       [r.normal(size=(2, 5, 5, 5)), r.normal(size=(2, 2, 3, 3, 3)), r.normal(size=2)]),
            "conv_transpose2d": (lambda z, K, b: T.conv_transpose2d(z, K, b, 2, output_shape=(8, 7)),
                                 [r.normal(size=(2, 3, 3, 3)), r.normal(size=(3, 2, 3, 3)), r.normal(size=2)]),
            "conv_transpose3d": (lambda z, K, b: T.conv_transpose3d(z, K, b, 2),
                                 [r.normal(size=(2, 2, 2, 3)), r.normal(size=(2, 1, 3, 3, 3)), r.normal(size=1)]),
            "batchnorm_train": (bn(True), [r.normal(size=(4, 2, 3)), r.normal(size=2), r.normal(size=2)]),
            "batchnorm_eval": (bn(False), [r.normal(size=(3, 2, 2)), r.normal(size=2), r.normal(size=2)]),
        }
        prim = {name: T.grad_check(op, inputs) for name, (op, inputs) in checks.items()}

        ds = D.DigitDataset(np.random.default_rng(0).random((40, 28, 28)), np.arange(40) % 10)
        p2 = M.init_params(M.ArchConfig(), substream(1, "init"))
        for k in p2.group("attention"):
            p2.arrays[k] = p2.arrays[k] * 6 + (0.3 if k.endswith(".b") else 0.0)
        p2.target_shift, p2.target_scale = 10.0, 8.0
        e2e = M.spot_check_gradients(D.make_bags(ds, 0, 3, 3, 7), p2, M.ObjectiveConfig(100.0, 0.01),
                                     per_group=3, step=1e-3)
        worst_prim = max(prim.values())
        worst_e2e = max(e2e.values())
        ok = worst_prim < PRIMITIVE_TOL and worst_e2e < END_TO_END_TOL
        report(5, ok, f"worst primitive rel. error {worst_prim:.2e} over {len(prim)} ops (< {PRIMITIVE_TOL}), "
                      f"worst end-to-end {worst_e2e:.2e} over groups {sorted(e2e)} (< {END_TO_END_TOL})")
        assert ok

    def test_criterion_6_oracles(self, digit_splits):
        rng = np.random.default_rng(6)
        auc_gap = 0.0
        for _ in range(50):
            n = int(rng.integers(4, 60))
            labels = rng.random(n) < rng.uniform(0.2, 0.8)
            labels[:2] = [True, False]
            scores = np.round(rng.random(n), int(rng.integers(1, 4)))  # coarse rounding produces ties
            auc_gap = max(auc_gap, abs(metrics.roc_curve(scores, labels).auc - metrics.auc_pairwise(scores, labels)))

        label_errors = 0
        for bag in digit_splits[0] + digit_splits[1]:
            expected = 0
            for d in bag.instance_labels:
                if d in (2, 3, 5, 7):
                    expected += int(d)
            relevance = [d in (2, 3, 5, 7) for d in bag.instance_labels]
            label_errors += bag.y != expected or bag.relevance.tolist() != relevance

        patch_errors = 0
        for i in range(20):
            shape = tuple(int(s) for s in rng.integers(32, 72, size=3))
            volume = rng.random(shape).astype(np.float32)
            bag = D.extract_patches_3d(volume, 32, 0.4)
            cover = np.zeros(shape, dtype=int)
            for (a, b, c), patch in zip(bag.coordinates, bag.patches):
                cover[a:a + 32, b:b + 32, c:c + 32] += 1
                patch_errors += patch.shape != (32, 32, 32) or not np.array_equal(
                    patch, volume[a:a + 32, b:b + 32, c:c + 32])
            patch_errors += int(cover.min() < 1)

        n_bags = len(digit_splits[0]) + len(digit_splits[1])
        ok = auc_gap <= AUC_ORACLE_TOL and label_errors == 0 and patch_errors == 0
        report(6, ok, f"trapezoid vs pairwise AUC max gap {auc_gap:.1e} on 50 fixtures; {label_errors} label "
                      f"mismatches over {n_bags} bags; {patch_errors} coverage/sub-block errors on 20 volumes")
        assert ok

    def test_criterion_7_determinism(self, tmp_path):
        ds = D.DigitDataset(np.random.default_rng(7).random((30, 28, 28)), np.arange(30) % 10)
        bags = D.make_bags(ds, 7, 12, 2, 6)
        cfg = TrainConfig(epochs=2, bags_per_step=4, arch=M.ArchConfig(channels=(2, 4), latent_dim=4),
                          val_fraction=0.0)
        a = train(bags, cfg, log_path=tmp_path / "a.ndjson", checkpoint_path=tmp_path / "a.bin")
        train(bags, cfg, log_path=tmp_path / "b.ndjson")
        same_log = (tmp_path / "a.ndjson").read_bytes() == (tmp_path / "b.ndjson").read_bytes()
        loaded = C.load_checkpoint(tmp_path / "a.bin")
        round_trip = loaded.params.equals(a.params) and all(
            loaded.opt_state.m[k].tobytes() == a.opt_state.m[k].tobytes() for k in a.opt_state.m)
        raw = bytearray((tmp_path / "a.bin").read_bytes())
        raw[len(raw) // 3] ^= 0x10
        try:
            C.from_bytes(bytes(raw))
            rejected = False
        except FormatError:
            rejected = True
        ok = same_log and round_trip and rejected
        report(7, ok, f"identical logs {same_log}; bit-exact checkpoint round trip {round_trip}; "
                      f"tampered checkpoint rejected {rejected}")
        assert ok

    def test_criterion_8_phantom(self):
        train_bags, test_bags = D.make_phantom_splits(0, PHANTOM_DATA["n_train"], PHANTOM_DATA["n_test"])
        cfg = TrainConfig(**PHANTOM_TRAIN)
        params, log = trained("phantom", cfg, train_bags)
        rep = evaluate(test_bags, params, cfg.pool_mode)
        r2, auc = rep.summary.r2, rep.summary.mean_auc
        ok = r2 >= R2_PHANTOM and auc >= AUC_PHANTOM
        report(8, ok, f"phantom held-out R2 = {r2:.4f} (need >= {R2_PHANTOM}), mean attention AUC = {auc:.4f} "
                      f"(need >= {AUC_PHANTOM}) on {len(test_bags)} subjects after {len(log)} epochs")
        assert ok

    def test_training_loss_non_increasing(self, digit_splits):
        cfg = TrainConfig(epochs=3)
        _, log = trained("digits_default_3_epochs", cfg, digit_splits[0])
        totals = [rec["total"] for rec in log[:3]]
        ok = len(totals) == 3 and totals[0] >= totals[1] >= totals[2]
        report("train-loss", ok, f"epoch-mean total loss over the first 3 epochs with the default config: "
                                 f"{[round(t, 4) for t in totals]}")
        assert ok
