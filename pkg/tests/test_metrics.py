import itertools
import json
import os
import stat
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nicegan.metrics import (CapabilityError, ExternalAdapter, MetricReport, RandomConvExtractor,
                             append_reports, extract_features, fid, frechet_distance, get_extractor,
                             kid, mmd2_unbiased, polynomial_kernel, read_feature_file,
                             write_feature_file)


def brute_mmd2(x, y):
    """Direct triple loop over the unbiased estimator's sums."""
    d = len(x[0])

    def k(a, b):
        return (sum(ai * bi for ai, bi in zip(a, b)) / d + 1.0) ** 3

    m, n = len(x), len(y)
    sxx = sum(k(x[i], x[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    syy = sum(k(y[i], y[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    sxy = sum(k(x[i], y[j]) for i in range(m) for j in range(n)) / (m * n)
    return sxx + syy - 2 * sxy


def test_fixture_value():
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert brute_mmd2(x.tolist(), x.tolist()) == pytest.approx(-2.375, abs=1e-12)
    assert mmd2_unbiased(x, x) == pytest.approx(-2.375, abs=1e-12)
    assert kid(x, x, subset_size=2)[0] == pytest.approx(-2.375, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(8, 5)), r.normal(0.3, 1.2, size=(7, 5))
    ref = brute_mmd2(x.tolist(), y.tolist())
    assert mmd2_unbiased(x, y) == pytest.approx(ref, rel=1e-8)
    assert kid(x, y, subset_size=8)[0] == pytest.approx(ref, rel=1e-8)


def test_symmetry_and_permutation():
    r = np.random.default_rng(3)
    x, y = r.normal(size=(10, 4)), r.normal(size=(12, 4))
    assert mmd2_unbiased(x, y) == pytest.approx(mmd2_unbiased(y, x), abs=1e-12)
    assert mmd2_unbiased(x[::-1], y[r.permutation(12)]) == pytest.approx(mmd2_unbiased(x, y), abs=1e-12)


def test_zero_features_give_zero_kid():
    z = np.zeros((6, 3))
    assert kid(z, z, subset_size=6) == (0.0, 0.0)
    assert np.all(polynomial_kernel(z, z) == 1.0)


def test_kid_full_subset_reduction():
    r = np.random.default_rng(8)
    x, y = r.normal(size=(20, 6)), r.normal(size=(20, 6))
    mean, std = kid(x, y, subset_size=1000, n_subsets=1)
    assert abs(mean - mmd2_unbiased(x, y)) <= 1e-12 and std == 0.0


def test_kid_subsets_reproducible():
    r = np.random.default_rng(8)
    x, y = r.normal(size=(30, 6)), r.normal(size=(30, 6))
    a = kid(x, y, subset_size=10, n_subsets=5, rng=np.random.default_rng(1))
    b = kid(x, y, subset_size=10, n_subsets=5, rng=np.random.default_rng(1))
    assert a == b and a[1] > 0


def test_unbiased_under_null():
    r = np.random.default_rng(0)
    vals = [mmd2_unbiased(r.normal(size=(20, 3)), r.normal(size=(20, 3))) for _ in range(100)]
    se = np.std(vals, ddof=1) / np.sqrt(len(vals))
    assert abs(np.mean(vals)) <= 3 * se


def test_mmd_errors():
    with pytest.raises(ValueError):
        mmd2_unbiased(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        mmd2_unbiased(np.zeros((1, 2)), np.zeros((3, 2)))


def test_fid_closed_forms():
    assert frechet_distance(np.zeros(1), np.eye(1), np.ones(1), np.eye(1)) == pytest.approx(1.0, abs=1e-5)
    assert frechet_distance(np.zeros(1), 4 * np.eye(1), np.zeros(1), np.eye(1)) == pytest.approx(1.0, abs=1e-5)
    # diagonal d-dim: sum_i (mu_i diff)^2 + (s1_i + s2_i - 2 sqrt(s1_i s2_i))
    s1, s2 = np.array([4.0, 1.0, 9.0]), np.array([1.0, 1.0, 4.0])
    mu1, mu2 = np.array([0.0, 1.0, 2.0]), np.array([1.0, 1.0, 0.0])
    ref = np.sum((mu1 - mu2) ** 2) + np.sum(s1 + s2 - 2 * np.sqrt(s1 * s2))
    assert frechet_distance(mu1, np.diag(s1), mu2, np.diag(s2)) == pytest.approx(ref, abs=1e-5)


def test_fid_identity_and_symmetry():
    r = np.random.default_rng(2)
    a, b = r.normal(size=(50, 8)), r.normal(1.0, 2.0, size=(40, 8))
    assert fid(a, a) <= 1e-6
    assert abs(fid(a, b) - fid(b, a)) <= 1e-6


def test_fid_singular_covariance():
    r = np.random.default_rng(2)
    a = r.normal(size=(5, 16))
    assert fid(a, a) <= 1e-6
    assert np.isfinite(fid(a, r.normal(size=(5, 16))))


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (6, 3), elements=st.floats(-5, 5)),
       arrays(np.float64, (5, 3), elements=st.floats(-5, 5)))
def test_mmd_properties(x, y):
    assert mmd2_unbiased(x, y) == pytest.approx(mmd2_unbiased(y, x), rel=1e-9, abs=1e-9)
    assert mmd2_unbiased(x, y) == pytest.approx(brute_mmd2(x.tolist(), y.tolist()), rel=1e-8, abs=1e-9)
    assert fid(x, y) >= -1e-6


def test_identity_extractor_flattens():
    f = extract_features("identity", np.zeros((4, 8, 8, 3)))
    assert f.shape == (4, 192)


def test_random_conv_repeatable():
    imgs = np.random.default_rng(0).uniform(-1, 1, (3, 32, 32, 3))
    a = RandomConvExtractor(seed=0)(imgs)
    b = RandomConvExtractor(seed=0)(imgs)
    assert a.shape == (3, 256)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, RandomConvExtractor(seed=1)(imgs))


def test_external_adapter_missing():
    with pytest.raises(CapabilityError):
        get_extractor("external_adapter")(np.zeros((2, 8, 8, 3)))
    with pytest.raises(CapabilityError):
        ExternalAdapter("/no/such/extractor")(np.zeros((2, 8, 8, 3)))


def test_external_adapter_file_protocol(tmp_path):
    script = tmp_path / "feat.py"
    script.write_text(
        "import sys, json, numpy as np\n"
        "src, dst = sys.argv[1], sys.argv[2]\n"
        "meta = json.load(open(src + '.json'))\n"
        "x = np.fromfile(src, dtype='<f4').reshape(meta['rows'], meta['dim'])\n"
        "f = x[:, :4].astype('<f4')\n"
        "f.tofile(dst)\n"
        "json.dump({'rows': f.shape[0], 'dim': 4}, open(dst + '.json', 'w'))\n")
    imgs = np.random.default_rng(0).uniform(-1, 1, (3, 8, 8, 3)).astype(np.float32)
    feats = ExternalAdapter(f"{sys.executable} {script}")(imgs)
    np.testing.assert_allclose(feats, imgs.reshape(3, -1)[:, :4], atol=0)


def test_feature_file_round_trip(tmp_path):
    m = np.arange(12, dtype=np.float64).reshape(3, 4)
    p = str(tmp_path / "f.bin")
    write_feature_file(p, m)
    assert json.load(open(p + ".json")) == {"rows": 3, "dim": 4}
    np.testing.assert_array_equal(read_feature_file(p), m)


def test_reports(tmp_path):
    p = tmp_path / "m.jsonl"
    append_reports(str(p), [MetricReport("kid", 0.5, 0.0, 3, "random_conv", {"direction": "x2y"})])
    rec = json.loads(p.read_text())
    assert rec["name"] == "kid" and rec["direction"] == "x2y" and rec["iter"] == 3
    with pytest.raises(ValueError):
        MetricReport("fid", float("nan"))
