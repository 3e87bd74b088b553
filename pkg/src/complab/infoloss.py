"""Gaussian entropy, mutual information and low-rank retention.

All logarithms are natural, so entropies and informations are in nats. The
information-loss proxy is ``1 / I(X; Y)`` with unit proportionality constant;
only comparisons between proxies are meaningful.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

LOG_2PIE = math.log(2 * math.pi * math.e)
SYM_TOL = 1e-10


@dataclass
class GaussianModel:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        n = self.mean.size
        if self.cov.shape != (n, n):
            raise ValueError(f"covariance shape {self.cov.shape} does not match mean of length {n}")
        _check_symmetric(self.cov)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass
class JointGaussian:
    x: GaussianModel
    y: GaussianModel
    cross: np.ndarray

    def __post_init__(self):
        self.cross = np.atleast_2d(np.asarray(self.cross, dtype=np.float64))
        if self.cross.shape != (self.x.dim, self.y.dim):
            raise ValueError(f"cross covariance must be {(self.x.dim, self.y.dim)}, got {self.cross.shape}")

    @property
    def cov(self) -> np.ndarray:
        return np.block([[self.x.cov, self.cross], [self.cross.T, self.y.cov]])

    def swapped(self) -> "JointGaussian":
        return JointGaussian(self.y, self.x, self.cross.T)

    @classmethod
    def from_cov(cls, cov: np.ndarray, nx: int, mean=None) -> "JointGaussian":
        cov = np.asarray(cov, dtype=np.float64)
        mean = np.zeros(cov.shape[0]) if mean is None else np.asarray(mean, dtype=np.float64)
        return cls(GaussianModel(mean[:nx], cov[:nx, :nx]), GaussianModel(mean[nx:], cov[nx:, nx:]),
                   cov[:nx, nx:])


@dataclass
class InfoResult:
    """A value in nats plus a flag for the cases where it is not finite."""

    value: float
    flag: str | None = None  # "degenerate" | "fully_correlated"


def _check_symmetric(c: np.ndarray):
    scale = max(1.0, float(np.abs(c).max(initial=0.0)))
    if not np.allclose(c, c.T, atol=SYM_TOL * scale, rtol=0):
        raise ValueError("covariance matrix is not symmetric")


def _logdet(c: np.ndarray) -> float:
    """log|C| of a PSD matrix, ``-inf`` when (numerically) singular.

    Eigenvalues below ``1e-12 * trace`` count as zero.
    """
    if c.size == 0:
        return 0.0
    w = np.linalg.eigvalsh(c)
    tr = float(np.trace(c))
    if tr <= 0 or w.min() <= 1e-12 * tr:
        return -math.inf
    return float(np.log(w).sum())


def gaussian_entropy(g: GaussianModel) -> InfoResult:
    """``0.5 * ln((2 pi e)^n |C|)``; singular covariances give ``-inf`` flagged degenerate."""
    ld = _logdet(g.cov)
    if ld == -math.inf:
        return InfoResult(-math.inf, "degenerate")
    return InfoResult(0.5 * (g.dim * LOG_2PIE + ld))


def gaussian_mutual_info(j: JointGaussian) -> InfoResult:
    """``0.5 * ln(|C_X| |C_Y| / |C|)`` for a jointly Gaussian pair.

    A singular joint with non-singular marginals means the pair is (partly)
    deterministic and the information is unbounded: ``inf``, flagged
    ``fully_correlated``. Singular marginals are flagged ``degenerate``.
    """
    lx, ly = _logdet(j.x.cov), _logdet(j.y.cov)
    if lx == -math.inf or ly == -math.inf:
        return InfoResult(math.nan, "degenerate")
    lj = _logdet(j.cov)
    if lj == -math.inf:
        return InfoResult(math.inf, "fully_correlated")
    return InfoResult(0.5 * (lx + ly - lj))


def info_loss_proxy(mi: float, tol: float = 1e-9) -> float:
    if mi < -tol:
        raise ValueError(f"mutual information must be non-negative, got {mi}")
    if mi <= 0:
        return math.inf
    return 1.0 / mi


def empirical_covariance(samples) -> GaussianModel:
    """Sample mean and unbiased (``m - 1``) covariance of row vectors."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    m = x.shape[0]
    if m < 2:
        raise ValueError("need at least two samples")
    mu = x.mean(axis=0)
    d = x - mu
    cov = d.T @ d / (m - 1)
    return GaussianModel(mu, (cov + cov.T) / 2)


@dataclass
class Projection:
    basis: np.ndarray  # (n, d), orthonormal columns
    eigenvalues: np.ndarray  # all n, descending
    retention: float

    def project(self, f: np.ndarray) -> np.ndarray:
        return self.basis.T @ f


def svd_project(m: np.ndarray, d: int) -> Projection:
    """Top-``d`` eigenbasis of a symmetric PSD matrix and its retained energy."""
    m = np.asarray(m, dtype=np.float64)
    n = m.shape[0]
    if m.shape != (n, n):
        raise ValueError("matrix must be square")
    if not 1 <= d <= n:
        raise ValueError(f"rank must lie in [1, {n}], got {d}")
    _check_symmetric(m)
    w, v = np.linalg.eigh(m)
    w, v = w[::-1], v[:, ::-1]
    tr = w.sum()
    w = np.where(w < 1e-12 * max(tr, 0.0), 0.0, w)
    total = w.sum()
    retention = 1.0 if d == n or total == 0 else float(np.clip(w[:d].sum() / total, 0.0, 1.0))
    return Projection(basis=v[:, :d], eigenvalues=w, retention=retention)


def gram_retention(maps: np.ndarray, d: int) -> float:
    """Mean retention of ``F F^T`` at rank ``d`` over a stack of 2-d maps ``(..., h, w)``."""
    f = np.asarray(maps, dtype=np.float64).reshape(-1, *maps.shape[-2:])
    gram = f @ f.transpose(0, 2, 1)
    w = np.linalg.eigvalsh(gram)[:, ::-1]
    tr = w.sum(axis=1, keepdims=True)
    w = np.where(w < 1e-12 * np.maximum(tr, 0), 0.0, w)
    total = w.sum(axis=1)
    ok = total > 0
    if not ok.any():
        return 1.0
    r = w[ok, :d].sum(axis=1) / total[ok]
    return float(np.clip(r, 0, 1).mean())


def additive_model_mi(cx: np.ndarray, ck: np.ndarray) -> InfoResult:
    """MI between X and Y = X + K with independent K, i.e. ``0.5 ln(|C_X + C_K| / |C_K|)``.

    This is the output model ``Y ~ N(mu_X + mu_K, C_X + C_K)`` taken at face
    value, with cross covariance ``C_X``.
    """
    cx = np.asarray(cx, dtype=np.float64)
    joint = JointGaussian(GaussianModel(np.zeros(len(cx)), cx), GaussianModel(np.zeros(len(cx)), cx + ck), cx)
    return gaussian_mutual_info(joint)


# --------------------------------------------------------------------------
# layer report
# --------------------------------------------------------------------------

@dataclass
class LayerInfo:
    block: str
    kind: str
    mi_nats: float
    info_loss_proxy: float
    svd_retention: float
    additive_model_mi_nats: float | None = None
    flags: list[str] = field(default_factory=list)


@dataclass
class InfoReport:
    layers: list[LayerInfo]
    sample_dims: int
    batch: int

    def to_dict(self):
        return asdict(self)

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return str(v)
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, list):
                return [clean(x) for x in v]
            return v
        return json.dumps(clean(self.to_dict()), indent=2)

    def to_table(self) -> str:
        head = f"{'block':<10} {'kind':<14} {'MI (nats)':>10} {'1/MI':>10} {'retention':>9} {'additive MI':>11}  flags"
        lines = [head, "-" * len(head)]
        for r in self.layers:
            pm = "-" if r.additive_model_mi_nats is None else f"{r.additive_model_mi_nats:.4g}"
            lines.append(f"{r.block:<10} {r.kind:<14} {r.mi_nats:>10.4g} {r.info_loss_proxy:>10.4g} "
                         f"{r.svd_retention:>9.4f} {pm:>11}  {','.join(r.flags)}")
        lines.append("proxy = 1/MI with unit constant; compare rows, not absolute values")
        return "\n".join(lines)


def _sample_cols(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    flat = x.reshape(x.shape[0], -1).astype(np.float64)
    # constant coordinates (dead ReLUs) would only make the covariance singular
    var = flat.var(axis=0)
    live = np.flatnonzero(var > 1e-12 * max(var.max(), 1e-300))
    pool = live if len(live) >= k else np.arange(flat.shape[1])
    idx = np.sort(rng.choice(pool, size=min(k, len(pool)), replace=False))
    return flat[:, idx]


def _block_info(name, kind, pre, post, sample_dims, rng, kernel=None) -> LayerInfo:
    xs = _sample_cols(pre, sample_dims, rng)
    ys = xs if post is pre else _sample_cols(post, sample_dims, rng)
    g = empirical_covariance(np.hstack([xs, ys]))
    res = gaussian_mutual_info(JointGaussian.from_cov(g.cov, xs.shape[1]))
    flags = [res.flag] if res.flag else []
    if res.flag == "fully_correlated":
        proxy = 0.0
    elif res.flag == "degenerate":
        proxy = math.nan
    else:
        proxy = info_loss_proxy(max(res.value, 0.0))
    # per-channel spatial maps of the block input, projected to the output height
    maps = np.moveaxis(pre, -1, 1) if pre.ndim == 4 else pre[:, None, None, :]
    d = post.shape[1] if post.ndim == 4 else 1
    retention = gram_retention(maps, max(1, min(d, maps.shape[-2])))
    additive = None
    if kernel is not None:
        cx = empirical_covariance(xs).cov
        ck = np.var(kernel, dtype=np.float64) * np.eye(len(cx))
        additive = additive_model_mi(cx, ck).value
    return LayerInfo(name, kind, res.value, proxy, retention, additive, flags)


def layer_info_report(model, batch: np.ndarray, sample_dims: int = 16, seed: int = 0) -> InfoReport:
    """MI between the input and output of every spatial reduction block.

    ``sample_dims`` coordinates of each activation are drawn (seeded) and the
    joint covariance is estimated over the batch. A model with no blocks is
    reported as a single identity entry.
    """
    if batch.shape[0] < sample_dims + 2:
        raise ValueError(f"batch of {batch.shape[0]} is too small for {sample_dims} sampled dims")
    rng = np.random.default_rng(seed)
    model.forward(batch, mode="eval", keep=True)
    acts = model.activations
    out = []
    if not model.nodes:
        out.append(_block_info("identity", "identity", batch, batch, sample_dims, rng))
    for node in model.nodes:
        b = node.block
        if not b.is_reduction:
            continue
        pre = acts[b.inputs[0]]
        kernel = None
        if b.kind == "conv_composition":
            kernel = node.ops[0].kernel
        kind = "max_pool" if b.kind == "max_pool" else "strided_conv"
        out.append(_block_info(b.name, kind, pre, acts[b.name], sample_dims, rng, kernel))
    model.activations = {}
    return InfoReport(layers=out, sample_dims=sample_dims, batch=int(batch.shape[0]))
