import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from complab.infoloss import (GaussianModel, JointGaussian, additive_model_mi, empirical_covariance,
                              gaussian_entropy, gaussian_mutual_info, gram_retention, info_loss_proxy,
                              layer_info_report, svd_project)
from complab.model import build_model
from complab.netspec import NetSpec, builtin_design

HALF_LOG_2PIE = 0.5 * math.log(2 * math.pi * math.e)


def random_psd(rng, n, rank=None):
    a = rng.standard_normal((n, rank or n + 2))
    return a @ a.T


def bivariate(rho):
    return JointGaussian.from_cov(np.array([[1.0, rho], [rho, 1.0]]), 1)


# --------------------------------------------------------------------- entropy

def test_entropy_examples():
    assert gaussian_entropy(GaussianModel([0.0], [[1.0]])).value == pytest.approx(1.418939, abs=1e-6)
    assert gaussian_entropy(GaussianModel(np.zeros(3), np.eye(3))).value == pytest.approx(3 * HALF_LOG_2PIE)
    r = gaussian_entropy(GaussianModel([0.0], [[0.0]]))
    assert r.flag == "degenerate" and r.value == -math.inf


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), n1=st.integers(1, 4), n2=st.integers(1, 4))
def test_entropy_additive_over_blocks(seed, n1, n2):
    rng = np.random.default_rng(seed)
    a, b = random_psd(rng, n1), random_psd(rng, n2)
    full = np.zeros((n1 + n2, n1 + n2))
    full[:n1, :n1], full[n1:, n1:] = a, b
    h = gaussian_entropy(GaussianModel(np.zeros(n1 + n2), full)).value
    parts = gaussian_entropy(GaussianModel(np.zeros(n1), a)).value + gaussian_entropy(GaussianModel(np.zeros(n2), b)).value
    assert h == pytest.approx(parts, abs=1e-9)


def test_asymmetric_covariance_rejected():
    with pytest.raises(ValueError):
        GaussianModel([0, 0], [[1, 0.5], [0.2, 1]])


# --------------------------------------------------------------------------- MI

def test_mi_examples():
    assert gaussian_mutual_info(bivariate(0.0)).value == 0.0
    assert gaussian_mutual_info(bivariate(0.5)).value == pytest.approx(0.143841, abs=1e-6)
    r = gaussian_mutual_info(bivariate(1.0))
    assert r.flag == "fully_correlated" and r.value == math.inf


@pytest.mark.parametrize("rho", [0.0, 0.3, -0.3, 0.9, -0.9])
def test_mi_rho_sweep(rho):
    assert abs(gaussian_mutual_info(bivariate(rho)).value - (-0.5 * math.log(1 - rho * rho))) < 1e-9


def test_mi_matches_entropy_identity():
    rng = np.random.default_rng(0)
    c = random_psd(rng, 5)
    j = JointGaussian.from_cov(c, 2)
    hx = gaussian_entropy(j.x).value
    hy = gaussian_entropy(j.y).value
    hxy = gaussian_entropy(GaussianModel(np.zeros(5), c)).value
    assert gaussian_mutual_info(j).value == pytest.approx(hx + hy - hxy, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), nx=st.integers(1, 4), ny=st.integers(1, 4))
def test_mi_symmetric_nonnegative(seed, nx, ny):
    rng = np.random.default_rng(seed)
    j = JointGaussian.from_cov(random_psd(rng, nx + ny), nx)
    a, b = gaussian_mutual_info(j).value, gaussian_mutual_info(j.swapped()).value
    assert abs(a - b) < 1e-9 and a >= -1e-9


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), nx=st.integers(1, 4), ny=st.integers(1, 4))
def test_mi_independent_is_zero(seed, nx, ny):
    rng = np.random.default_rng(seed)
    j = JointGaussian(GaussianModel(np.zeros(nx), random_psd(rng, nx)),
                      GaussianModel(np.zeros(ny), random_psd(rng, ny)), np.zeros((nx, ny)))
    assert abs(gaussian_mutual_info(j).value) < 1e-9


def test_proxy_examples():
    assert info_loss_proxy(1.0) == 1.0
    assert info_loss_proxy(0.0) == math.inf
    assert info_loss_proxy(0.143841) == pytest.approx(6.952, abs=1e-3)
    with pytest.raises(ValueError):
        info_loss_proxy(-0.1)


# ------------------------------------------------------------------ covariance

def test_empirical_covariance_examples():
    c = empirical_covariance(np.array([[0.0, 0.0], [2.0, 2.0]]))
    np.testing.assert_allclose(c.cov, [[2, 2], [2, 2]])
    assert np.all(empirical_covariance(np.ones((5, 3))).cov == 0)
    big = empirical_covariance(np.random.default_rng(1).standard_normal((10_000, 3)))
    assert np.abs(big.cov - np.eye(3)).max() < 0.05


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_empirical_covariance_affine(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((40, 3))
    a, b = rng.standard_normal((4, 3)), rng.standard_normal(4)
    c = empirical_covariance(x).cov
    np.testing.assert_allclose(empirical_covariance(x @ a.T + b).cov, a @ c @ a.T, atol=1e-9)


# --------------------------------------------------------------------- SVD

def test_svd_examples():
    assert svd_project(np.diag([4.0, 1.0]), 1).retention == pytest.approx(0.8)
    assert svd_project(np.diag([4.0, 1.0]), 2).retention == 1.0
    with pytest.raises(ValueError):
        svd_project(np.eye(3), 0)


def brute_force_retention(m, d):
    """Retention from an arbitrary-precision symmetric eigensolver."""
    mpmath.mp.dps = 30
    ev = sorted((float(e) for e in mpmath.eigsy(mpmath.matrix(m.tolist()), eigvals_only=True)), reverse=True)
    return sum(ev[:d]) / sum(ev)


def test_svd_matches_brute_force_small():
    rng = np.random.default_rng(2)
    m = random_psd(rng, 6)
    for d in range(1, 7):
        assert abs(svd_project(m, d).retention - brute_force_retention(m, d)) < 1e-9


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 32))
def test_svd_retention_properties(seed, n):
    rng = np.random.default_rng(seed)
    m = random_psd(rng, n, rank=int(rng.integers(1, n + 3)))
    prev = 0.0
    sv = np.linalg.svd(m, compute_uv=False)  # PSD: singular values are the eigenvalues
    for d in range(1, n + 1):
        p = svd_project(m, d)
        assert p.retention >= prev - 1e-12
        prev = p.retention
        assert abs(p.retention - sv[:d].sum() / sv.sum()) < 1e-9
        np.testing.assert_allclose(p.basis.T @ p.basis, np.eye(d), atol=1e-9)


def test_gram_retention_range():
    rng = np.random.default_rng(3)
    maps = rng.standard_normal((4, 8, 8))
    r = [gram_retention(maps, d) for d in range(1, 9)]
    assert all(0 <= v <= 1 for v in r) and r == sorted(r) and r[-1] == pytest.approx(1.0)


def test_additive_model():
    cx = np.array([[2.0]])
    ck = np.array([[1.0]])
    assert additive_model_mi(cx, ck).value == pytest.approx(0.5 * math.log(3.0))


# ------------------------------------------------------------------- report

def test_identity_model_fully_correlated():
    spec = NetSpec("identity", (8, 8, 3), [])
    model = build_model(spec, np.random.default_rng(0))
    batch = np.random.default_rng(1).standard_normal((32, 8, 8, 3)).astype(np.float32)
    rep = layer_info_report(model, batch, sample_dims=8)
    assert len(rep.layers) == 1 and rep.layers[0].flags == ["fully_correlated"]


def test_design1_report_ranges():
    model = build_model(builtin_design("design1").scaled(8), np.random.default_rng(0))
    batch = np.random.default_rng(1).standard_normal((64, 28, 28, 3)).astype(np.float32)
    rep = layer_info_report(model, batch, sample_dims=16)
    assert [l.block for l in rep.layers] == ["block2", "block4", "block6"]
    for l in rep.layers:
        assert 0 <= l.svd_retention <= 1
        assert l.kind == "max_pool"
    json.loads(rep.to_json())
    assert "1/MI" in rep.to_table()
    again = layer_info_report(model, batch, sample_dims=16)
    assert again.to_json() == rep.to_json()


def test_report_needs_enough_samples():
    model = build_model(builtin_design("design1").scaled(8), np.random.default_rng(0))
    with pytest.raises(ValueError):
        layer_info_report(model, np.zeros((8, 28, 28, 3), np.float32), sample_dims=16)


# ------------------------------------------------------------- trained models

def _proxies(run_dir, batch):
    from complab.experiments import load_trained
    model, _ = load_trained(run_dir)
    return [l.info_loss_proxy for l in layer_info_report(model, batch, sample_dims=16).layers]


def test_pool_loses_more_than_strided_conv_after_training():
    """Trained pooling reductions should keep less information than learned strided convs."""
    import os
    from pathlib import Path

    from complab import experiments as X
    from complab.data import load_cifar10, preprocess_eval_batch

    data = os.environ.get("COMPLAB_CIFAR_DIR")
    if not data or not Path(data).is_dir():
        pytest.skip("needs CIFAR-10 in COMPLAB_CIFAR_DIR")
    root = Path(os.environ.get("COMPLAB_RESULTS", Path(__file__).resolve().parents[1] / "results"))
    X.run_ablation("conv_vs_pool", scale="small", seeds=(1, 2, 3), dataset=data, out_root=root)
    _, test = load_cifar10(data)
    batch = preprocess_eval_batch(test.subset(256))
    wins = 0
    for seed in (1, 2, 3):
        conv = _proxies(root / "small" / "design1_conv" / f"seed{seed}", batch)
        pool = _proxies(root / "small" / "design1" / f"seed{seed}", batch)
        # a seed counts when pooling loses at least as much on most reduction stages
        wins += sum(p >= c for p, c in zip(pool, conv)) >= 2
    assert wins >= 2
