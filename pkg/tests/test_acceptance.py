"""Acceptance criteria, one test per criterion, each printing a pass/fail
line.  Criteria 7, 8 and 10 train end-to-end and are marked slow; run

    python -m pytest tests/test_acceptance.py -v -s

to watch the lines as they appear.
"""

import numpy as np
import pytest

from unitmod import detector as det
from unitmod import losses as L
from unitmod import physics, synth, train
from unitmod import tensor as T
from unitmod.detector import Detection, ToyDetector
from unitmod.gradcheck import check_gradients, standard_suite
from unitmod.losses import LossWeights
from unitmod.net import UnitModule, UnitModuleConfig
from unitmod.tensor import Tensor
from unitmod.train import TrainConfig, Trainer
from unitmod.ucrt import UcrtConfig, hsv_to_rgb, hue_mean, rgb_to_hsv, ucrt

TRAIN_SEED = 11
TEST_SEED = 12
RUN_SEED = 5


def report(criterion: str, passed: bool, detail: str) -> None:
    print(f"ACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'} - {detail}")
    assert passed, f"criterion {criterion}: {detail}"


def acceptance_config() -> TrainConfig:
    """The criterion-7 training configuration.

    lr and the saturated-pixel weight are rebalanced for the toy detector
    (the published per-detector weight tables do the same); both arms of
    the comparison share every setting.
    """
    return TrainConfig(epochs=30, batch_size=8, lr=0.03, warmup_iters=100,
                       seed=RUN_SEED, weights=LossWeights(w2=5.0), val_every=30)


@pytest.fixture(scope="session")
def accept_data():
    train_ds = synth.generate_dataset(seed=TRAIN_SEED, count=500, size=64)
    test_ds = synth.generate_dataset(seed=TEST_SEED, count=100, size=64)
    return train_ds, test_ds


@pytest.fixture(scope="session")
def joint_runs(accept_data, tmp_path_factory):
    """Train once with the module and once without, identical seeds."""
    train_ds, test_ds = accept_data
    out = tmp_path_factory.mktemp("accept")
    cfg = acceptance_config()
    with_tr, with_hist, _ = train.fit(train_ds, cfg, val_samples=None,
                                      out_dir=out / "with", log=lambda *a: None)
    cfg_no = acceptance_config()
    cfg_no.unitmodule_enabled = False
    no_tr, no_hist, _ = train.fit(train_ds, cfg_no, val_samples=None,
                                  out_dir=out / "without", log=lambda *a: None)
    with_metrics = train.evaluate(with_tr.unit, with_tr.detector, test_ds)
    no_metrics = train.evaluate(None, no_tr.detector, test_ds)
    return {
        "out": out,
        "with": with_tr, "without": no_tr,
        "with_hist": with_hist, "without_hist": no_hist,
        "with_metrics": with_metrics, "without_metrics": no_metrics,
    }


class TestCriterion01ParameterBudget:
    def test_criterion_1(self):
        def conv(cin, cout, k, groups=1, bias=False):
            return cout * (cin // groups) * k * k + (cout if bias else 0)

        def gn(c):
            return 2 * c

        cs1, cs2, kernels = 32, 32, (9, 9)
        oracle = conv(3, cs1, 3) + gn(cs1) + conv(cs1, cs2, 3) + gn(cs2)
        for k in kernels:
            oracle += (conv(cs2, cs2, 1) + gn(cs2)
                       + conv(cs2, cs2, k, groups=cs2) + gn(cs2)
                       + conv(cs2, cs2, 3, groups=cs2) + gn(cs2)
                       + conv(cs2, cs2, 1) + gn(cs2))
        oracle += conv(cs2, cs2, 3) + gn(cs2) + conv(cs2, 3, 3, bias=True)
        module = UnitModule(UnitModuleConfig(), np.random.default_rng(0))
        count = module.inference_parameter_count()
        ok = count == oracle and 29_000 <= count <= 33_000
        report("1 parameter budget", ok,
               f"inference params {count}, oracle {oracle}, window [29000, 33000]")


class TestCriterion02GradientSuite:
    def test_criterion_2(self):
        results = standard_suite("all", tol=1e-3)
        worst_op = max(r.max_rel_err for r in results if "composite" not in r.name)
        all_ok = all(r.passed for r in results)

        # full joint-loss graph (module losses + detector loss) on a 64x64 batch
        rng = np.random.default_rng(7)
        with T.use_dtype(np.float64):
            unit = UnitModule(UnitModuleConfig(stem_channels=(16, 16),
                                               lk_kernels=(9, 9)),
                              np.random.default_rng(1))
            detector = ToyDetector(np.random.default_rng(2))
            img = Tensor(rng.uniform(0.05, 0.95, size=(2, 3, 64, 64)))
            boxes = [[(0, 5, 5, 30, 28)], [(1, 20, 20, 50, 55), (2, 2, 40, 18, 60)]]

            def build():
                enhanced, t1, light, cast = unit.enhance(img)
                lc = light.detach()
                j2 = physics.alpha_degrade(img, 0.9, lc)
                enhanced2, t2, _, _ = unit.enhance(j2, want_cast=False)
                inv = 1.0 / (64 * 64)
                total, _ = L.unit_module_loss(
                    L.transmission_loss(t1, t2, 0.9) * inv,
                    L.saturated_pixel_loss(enhanced, enhanced2) * inv,
                    (L.total_variation_loss(enhanced)
                     + L.total_variation_loss(enhanced2)) * inv,
                    L.color_cast_loss(enhanced) + L.color_cast_loss(enhanced2),
                    L.assisting_color_cast_loss(cast, lc), LossWeights())
                return total + det.detector_loss(detector(enhanced), boxes)

            leaves = ([(f"unit.{n}", p) for n, p in unit.named_parameters()]
                      + [(f"det.{n}", p) for n, p in detector.named_parameters()])
            # h=1e-7 (float64): with tens of thousands of ReLU activations
            # some pre-activation sits ~1e-6 from its kink, and any larger
            # step averages the two slopes instead of measuring one
            composite = check_gradients("joint_composite", build, leaves,
                                        h=1e-7, tol=1e-2, max_entries=1, rng=rng)
        ok = all_ok and composite.passed
        report("2 gradient suite", ok,
               f"{len(results)} op/loss checks (worst {worst_op:.2e} < 1e-3), "
               f"joint composite {composite.max_rel_err:.2e} < 1e-2 "
               f"({composite.checked} sampled entries)")


class TestCriterion03PhysicsInvariants:
    def test_criterion_3(self):
        rng = np.random.default_rng(3)
        worst_inv = worst_round = worst_comp = 0.0
        for _ in range(100):
            j = Tensor(rng.uniform(0, 1, size=(1, 3, 8, 8)).astype(np.float32))
            alpha = float(rng.uniform(0.05, 0.95))
            light = physics.background_light(j)
            j2 = physics.alpha_degrade(j, alpha, light)
            worst_inv = max(worst_inv, float(np.abs(
                physics.background_light(j2).data - light.data).max()))

            t = Tensor(rng.uniform(0.1, 1.0, size=(1, 3, 8, 8)).astype(np.float32))
            a = Tensor(rng.uniform(0, 1, size=(1, 3)).astype(np.float32))
            back = physics.enhance(physics.degrade(j, t, a), t, a)
            worst_round = max(worst_round, float(np.abs(back.data - j.data).max()))

            one = physics.degrade(j, alpha * t, a)
            two = physics.alpha_degrade(physics.degrade(j, t, a), alpha, a)
            worst_comp = max(worst_comp, float(np.abs(one.data - two.data).max()))
        ok = worst_inv <= 1e-6 and worst_round <= 1e-6 and worst_comp <= 1e-6
        report("3 physics invariants", ok,
               f"light invariance {worst_inv:.2e}, inversion {worst_round:.2e}, "
               f"composition {worst_comp:.2e} (all <= 1e-6 over 100 cases)")


class TestCriterion04LossFixedPoints:
    def test_criterion_4(self):
        rng = np.random.default_rng(4)
        t1 = Tensor(rng.uniform(0.2, 1.0, size=(1, 3, 6, 6)).astype(np.float32))
        in_range = Tensor(rng.uniform(0, 1, size=(1, 3, 6, 6)).astype(np.float32))
        const = Tensor(np.full((1, 3, 6, 6), 0.4, dtype=np.float32))
        gray = Tensor(np.repeat(rng.uniform(0, 1, size=(1, 1, 6, 6)), 3, axis=1)
                      .astype(np.float32))
        c = Tensor(rng.uniform(0, 1, size=(1, 3)).astype(np.float32))
        fixed = [
            L.transmission_loss(t1, 0.9 * t1, 0.9).item(),
            L.saturated_pixel_loss(in_range, in_range).item(),
            L.total_variation_loss(const).item(),
            L.color_cast_loss(gray).item(),
            L.assisting_color_cast_loss(c, c).item(),
        ]
        derived = [
            (L.transmission_loss(Tensor(np.full((1, 1, 1, 1), 0.5, np.float32)),
                                 Tensor(np.full((1, 1, 1, 1), 0.4, np.float32)),
                                 0.9).item(), 0.0025),
            (L.saturated_pixel_loss(
                Tensor(np.array([-0.1, 0.5, 1.2], np.float32).reshape(1, 1, 1, 3)),
                Tensor(np.full((1, 1, 1, 3), 0.5, np.float32))).item(), 0.3),
            (L.total_variation_loss(Tensor(
                np.array([[0.0, 1.0], [0.0, 1.0]], np.float32)
                .reshape(1, 1, 2, 2))).item(), 2.0),
            (L.color_cast_loss(Tensor(np.stack(
                [np.full((2, 2), v, np.float32) for v in (0.2, 0.4, 0.6)])[None]
            )).item(), 0.24),
            (L.assisting_color_cast_loss(
                Tensor(np.array([[0.5, 0.5, 0.5]], np.float32)),
                Tensor(np.array([[0.6, 0.5, 0.4]], np.float32))).item(), 0.02),
        ]
        worst_fixed = max(abs(v) for v in fixed)
        worst_derived = max(abs(got - want) for got, want in derived)
        ok = worst_fixed <= 1e-6 and worst_derived <= 1e-6
        report("4 loss fixed points", ok,
               f"fixed points |v| <= {worst_fixed:.2e}, derived examples "
               f"|err| <= {worst_derived:.2e} (both <= 1e-6)")


class TestCriterion05Ucrt:
    def test_criterion_5(self):
        cfg = UcrtConfig()
        rng = np.random.default_rng(5)
        in_ok = out_ok = sv_ok = True
        for trial in range(1000):
            if trial % 2 == 0:
                hue = rng.uniform(25, 110)
            else:
                hue = rng.uniform(0, 12) if trial % 4 == 1 else rng.uniform(122, 165)
            h = rng.uniform(hue - 6, hue + 6, size=(8, 8)) % 180.0
            s = rng.uniform(60, 255, size=(8, 8))
            v = rng.uniform(60, 255, size=(8, 8))
            img = hsv_to_rgb(np.stack([h, s, v]).astype(np.float32))
            m_in = hue_mean(rgb_to_hsv(img))
            out = ucrt(img, cfg, np.random.default_rng(trial))
            hsv_out = rgb_to_hsv(out)
            m_out = hue_mean(hsv_out)
            d_in = max(18.0 - m_in, m_in - 116.0, 0.0)
            d_out = max(18.0 - m_out, m_out - 116.0, 0.0)
            if d_in == 0.0:
                in_ok &= d_out == 0.0
            else:
                # 1e-3 slack: float32 HSV round-trip noise when only the
                # S/V channels fire, far below the 5-unit shifts under test
                out_ok &= d_out <= d_in + 1e-3
            sv_ok &= bool(hsv_out[1].min() >= 0 and hsv_out[1].max() <= 255
                          and hsv_out[2].min() >= 0 and hsv_out[2].max() <= 255)
        img = np.random.default_rng(6).uniform(0, 1, size=(3, 8, 8)).astype(np.float32)
        a = ucrt(img, cfg, np.random.default_rng(99))
        b = ucrt(img, cfg, np.random.default_rng(99))
        identical = bool(np.array_equal(a, b))
        ok = in_ok and out_ok and sv_ok and identical
        report("5 color transfer", ok,
               f"1000 seeded trials: in-range stayed in [18,116]={in_ok}, "
               f"out-of-range never receded={out_ok}, S/V in [0,255]={sv_ok}, "
               f"seeded repeat byte-identical={identical}")


class TestCriterion06Reparameterization:
    def test_criterion_6(self):
        rng = np.random.default_rng(6)
        module = UnitModule(UnitModuleConfig(), np.random.default_rng(1))
        for _ in range(3):  # move the tracked statistics off their init
            module.features(Tensor(rng.uniform(0, 1, (2, 3, 16, 16)).astype(np.float32)))
        module.eval()
        merged = module.reparameterize()
        worst = 0.0
        for _ in range(20):
            img = Tensor(rng.uniform(0, 1, size=(1, 3, 32, 32)).astype(np.float32))
            a = module.enhance(img, want_cast=False)[0]
            b = merged.enhance(img, want_cast=False)[0]
            worst = max(worst, float(np.abs(a.data - b.data).max()))
        ok = worst < 1e-5
        report("6 re-parameterization", ok,
               f"merged vs two-branch max |diff| {worst:.2e} < 1e-5 on 20 inputs")


@pytest.mark.slow
class TestCriterion07EndToEnd:
    def test_criterion_7(self, joint_runs):
        wm = joint_runs["with_metrics"]
        nm = joint_runs["without_metrics"]
        gain = wm["psnr_enhanced"] - wm["psnr_degraded"]
        ap_with, ap_without = wm["mean_ap"], nm["mean_ap"]
        ok = gain >= 2.0 and ap_with >= ap_without
        report("7 end-to-end learning", ok,
               f"PSNR enhanced {wm['psnr_enhanced']:.2f} dB vs degraded "
               f"{wm['psnr_degraded']:.2f} dB (gain {gain:+.2f} >= +2), "
               f"mAP with {ap_with:.3f} >= without {ap_without:.3f}")


@pytest.mark.slow
class TestCriterion08ConsistencyTrend:
    def test_criterion_8(self, joint_runs, accept_data):
        _, test_ds = accept_data
        trained = joint_runs["with"].unit
        fresh = Trainer(acceptance_config()).unit

        def mean_gap(unit):
            unit.eval()
            gaps = []
            for s in test_ds[:50]:
                img = Tensor(s.degraded[None])
                t1 = unit.transmission(img)
                light = physics.background_light(img)
                j2 = physics.alpha_degrade(img, 0.9, light.detach())
                t2 = unit.transmission(j2)
                gaps.append(float(np.abs(0.9 * t1.data - t2.data).mean()))
            return float(np.mean(gaps))

        init_gap = mean_gap(fresh)
        trained_gap = mean_gap(trained)
        ok = trained_gap <= 0.5 * init_gap
        report("8 consistency trend", ok,
               f"mean |a*t1 - t2| init {init_gap:.4f} -> trained {trained_gap:.4f} "
               f"({trained_gap / max(init_gap, 1e-12):.1%} of init, need <= 50%)")


class TestCriterion09ApOracle:
    def test_criterion_9(self):
        from test_detector import brute_force_ap, random_case

        rng = np.random.default_rng(9)
        exact = True
        for _ in range(50):
            dets, gts = random_case(rng)
            fast = det.average_precision(dets, gts)
            slow = brute_force_ap(dets, gts)
            exact &= fast[0].keys() == slow[0].keys()
            exact &= all(fast[0][k] == slow[0][k] for k in fast[0])
        report("9 AP oracle equivalence", exact,
               "50 random cases match the brute-force PR evaluator exactly")


@pytest.mark.slow
class TestCriterion10Determinism:
    def test_criterion_10(self, joint_runs, accept_data, tmp_path):
        train_ds, _ = accept_data
        cfg = acceptance_config()
        _, with_hist2, _ = train.fit(train_ds, cfg, log=lambda *a: None)
        cfg_no = acceptance_config()
        cfg_no.unitmodule_enabled = False
        _, no_hist2, _ = train.fit(train_ds, cfg_no, log=lambda *a: None)
        histories_match = (with_hist2 == joint_runs["with_hist"]
                           and no_hist2 == joint_runs["without_hist"])

        # checkpoint resume replays an uninterrupted run bit for bit
        resume_cfg = acceptance_config()
        resume_cfg.epochs = 4
        resume_cfg.checkpoint_every = 2
        subset = train_ds[:100]
        full, full_hist, _ = train.fit(subset, resume_cfg, out_dir=tmp_path / "r",
                                       log=lambda *a: None)
        resumed = Trainer(resume_cfg)
        resumed.load(tmp_path / "r" / "ckpt_002.umck")
        resumed, _, _ = train.fit(subset, resume_cfg, trainer=resumed,
                                  log=lambda *a: None)
        full_state = full.state()
        resumed_state = resumed.state()
        resume_exact = all(np.array_equal(full_state[k], resumed_state[k])
                           for k in full_state)
        ok = histories_match and resume_exact
        report("10 determinism", ok,
               f"re-run histories identical={histories_match}, "
               f"checkpoint resume bit-exact={resume_exact}")
