import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tape.degrade import gen_clean_patch
from tape.errors import DimensionError
from tape.metrics import EvalReport, psnr, ssim


def test_psnr_power_of_ten():
    a = np.random.default_rng(0).uniform(0, 0.9, size=(3, 16, 16))
    assert psnr(a, a + 0.1) == 20.0


def test_psnr_half_mse():
    a = np.zeros((1, 4, 4))
    b = np.full((1, 4, 4), math.sqrt(0.5))
    assert psnr(a, b) == pytest.approx(10 * math.log10(2), abs=1e-12)
    assert psnr(a, b) == pytest.approx(3.0103, abs=1e-4)


def test_psnr_identical_is_inf():
    a = np.random.default_rng(1).uniform(size=(3, 8, 8))
    assert psnr(a, a) == math.inf


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_psnr_decreases_with_nested_perturbations(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(3, 8, 8))
    noise = rng.normal(size=a.shape)
    values = [psnr(a, a + s * noise) for s in (0.01, 0.02, 0.05, 0.1, 0.3)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_ssim_identity_and_inverse():
    a = gen_clean_patch((16, 16), np.random.default_rng(2))
    assert ssim(a, a) == 1.0
    assert ssim(a, 1.0 - a) < 0.5


def test_ssim_equal_constants():
    a = np.full((3, 8, 8), 0.3)
    assert ssim(a, a.copy()) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_ssim_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(3, 16, 16)), rng.uniform(size=(3, 16, 16))
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12
    assert ssim(a, a) == 1.0


def test_ssim_matches_single_window_formula():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(size=(1, 8, 8)), rng.uniform(size=(1, 8, 8))
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    cov = np.mean((a - a.mean()) * (b - b.mean()))
    ref = ((2 * a.mean() * b.mean() + c1) * (2 * cov + c2)) / (
        (a.mean() ** 2 + b.mean() ** 2 + c1) * (a.var() + b.var() + c2))
    assert ssim(a, b) == pytest.approx(ref, rel=1e-12)


def test_metric_errors():
    with pytest.raises(DimensionError):
        ssim(np.zeros((3, 4, 4)), np.zeros((3, 4, 4)))
    with pytest.raises(DimensionError):
        psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


def test_eval_report_aggregates():
    rng = np.random.default_rng(4)
    clean = rng.uniform(size=(3, 8, 8))
    single = EvalReport("noise")
    single.add(clean + 0.05, clean)
    assert single.count == 1
    assert single.mean_psnr == psnr(clean + 0.05, clean)
    assert single.mean_ssim == ssim(clean + 0.05, clean)
    report = EvalReport("noise")
    for s in (0.01, 0.1):
        report.add(clean + s, clean)
    assert report.count == 2
    assert report.mean_psnr == pytest.approx(30.0)
    csv_lines = report.to_csv().strip().splitlines()
    assert csv_lines[0] == "task,image,psnr,ssim" and csv_lines[-1].startswith("noise,mean,")
    assert "mean" in report.table()
    assert math.isnan(EvalReport("x").mean_psnr)
