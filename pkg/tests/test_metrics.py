import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as npst

import diffdenoise as dd
from diffdenoise.metrics import MetricReport, mse, paired_test, psnr, ssim


def _quantized_images(side=12, scale=2**-12):
    grid = st.integers(0, 2**12 - 1)
    shape = (side, side)
    return npst.arrays(np.int64, shape, elements=grid).map(lambda a: a.astype(np.float64) * scale)


class TestPsnr:
    def test_identical_images_is_inf(self, rng):
        img = rng.random((32, 32))
        assert psnr(img, img) == math.inf

    def test_constant_offset(self, rng):
        img = rng.random((32, 32))
        assert abs(psnr(img, img + 0.1) - 20.0) < 1e-9

    def test_gaussian_noise_reference_level(self, phantom_bank):
        clean = np.clip(
            np.concatenate([p.ravel() for p in phantom_bank[:16]]).reshape(16, 4096), 0, 1
        )
        noisy = clean + np.random.default_rng(7).normal(0, 6 / 255, clean.shape)
        assert abs(psnr(clean, noisy) - 32.57) < 0.1

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((8, 8)), np.zeros((8, 9)))

    def test_data_range_validated(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((8, 8)), np.ones((8, 8)), data_range=0.0)

    @given(x=_quantized_images(), y=_quantized_images(), k=st.integers(-2**14, 2**14))
    def test_shift_invariance_exact(self, x, y, k):
        # dyadic inputs keep every addition exact, so equality is bitwise
        c = k * 2.0**-12
        assert psnr(x, y) == psnr(x + c, y + c)

    @given(x=_quantized_images(), y=_quantized_images())
    def test_mse_bijection(self, x, y):
        err = mse(x, y)
        db = psnr(x, y)
        if err > 0:
            back = 10.0 ** (-db / 10.0)
            assert abs(back - err) <= 1e-9 * err


class TestSsim:
    def test_identical_images(self, rng):
        img = rng.random((32, 32))
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_contrast_inversion_below_one(self, phantom_bank):
        img = phantom_bank[0]
        assert ssim(img, 1.0 - img) < 1.0

    def test_monotone_in_noise_level(self, phantom_bank):
        means = []
        for level_idx, sigma in enumerate((3 / 255, 6 / 255, 12 / 255)):
            vals = []
            for i, clean in enumerate(phantom_bank[:8]):
                spec = dd.NoiseSpec(family="gaussian", sigma=sigma, seed=1000 * level_idx + i)
                vals.append(ssim(clean, dd.add_iid_noise(clean, spec)))
            means.append(np.mean(vals))
        assert means[0] > means[1] > means[2]

    def test_too_small_image_rejected(self, rng):
        with pytest.raises(ValueError):
            ssim(rng.random((8, 8)), rng.random((8, 8)))

    @given(x=_quantized_images(side=14), y=_quantized_images(side=14))
    def test_symmetry_and_range(self, x, y):
        forward = ssim(x, y)
        assert abs(forward - ssim(y, x)) <= 1e-9
        assert -1.0 - 1e-9 <= forward <= 1.0 + 1e-9


class TestPairedTest:
    def test_identical_scores_p_one(self):
        a = [1.0, 2.0, 3.0, 4.0, 5.0]
        assert paired_test(a, a) == 1.0

    def test_uniform_shift_significant(self):
        rng = np.random.default_rng(3)
        b = rng.standard_normal(50)
        p = paired_test(b + 1.0, b)
        assert p < 0.001
        # closed-form sanity bound: all 50 positive ranks give
        # z = (1275 - 637.5) / sqrt(50*51*101/24) ~ 6.15, p ~ 8e-10
        z = (50 * 51 / 2 - 50 * 51 / 4) / math.sqrt(50 * 51 * 101 / 24)
        assert z > 6.0

    def test_iid_pairs_not_significant(self):
        rng = np.random.default_rng(2024)
        p = paired_test(rng.standard_normal(40), rng.standard_normal(40))
        assert p > 0.001

    def test_minimum_length(self):
        with pytest.raises(ValueError):
            paired_test([1.0, 2.0], [1.0, 2.0])


def _report_with(methods: dict[str, float], n=12, spread=0.05, seed=0) -> MetricReport:
    rng = np.random.default_rng(seed)
    report = MetricReport(image_ids=[f"img{i}" for i in range(n)])
    base = rng.standard_normal(n) * spread
    for name, mean in methods.items():
        scores = list(mean + base + rng.standard_normal(n) * spread)
        report.add_method(name, scores, list(np.clip(np.asarray(scores) / 50.0, -1, 1)))
    return report


class TestMetricReport:
    def test_means_and_pvalues(self):
        report = _report_with({"a": 30.0, "b": 33.0})
        assert report.mean("psnr", "b") > report.mean("psnr", "a")
        assert report.p_value("psnr", "a", "b") < 0.05

    def test_bold_rule_separated(self):
        report = _report_with({"worst": 28.0, "mid": 30.0, "best": 34.0})
        bold = report.bold_methods("psnr")
        assert bold == {"best"}

    def test_bold_rule_expands_to_ties(self):
        report = _report_with({"worst": 20.0, "tie1": 30.0, "tie2": 30.001})
        bold = report.bold_methods("psnr")
        assert {"tie1", "tie2"} <= bold
        # property from the bolding rule: every bold vs non-bold pair separates
        for b in bold:
            for other in set(report.methods) - bold:
                assert report.p_value("psnr", b, other) < 0.05

    def test_csv_round_trip(self, tmp_path):
        report = _report_with({"a": 30.0, "b": 33.0})
        path = tmp_path / "m.csv"
        report.to_csv(path)
        loaded = MetricReport.from_csv(path)
        assert loaded.image_ids == report.image_ids
        assert loaded.methods == report.methods
        assert np.allclose(loaded.psnr_scores["a"], report.psnr_scores["a"], atol=1e-6)

    def test_csv_row_count(self, tmp_path):
        report = _report_with({"a": 30.0}, n=9)
        path = tmp_path / "m.csv"
        report.to_csv(path)
        rows = path.read_text().strip().splitlines()
        assert len(rows) == 1 + 9

    def test_summary_table_marks_best(self):
        report = _report_with({"bad": 25.0, "good": 35.0})
        table = report.summary_table(title="regime")
        assert "*35." in table
        assert "*25." not in table

    def test_length_mismatch_rejected(self):
        report = MetricReport(image_ids=["a", "b"])
        with pytest.raises(ValueError):
            report.add_method("m", [1.0], [1.0])
