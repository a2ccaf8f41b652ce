"""Attack-success rate and image-quality metrics.

FID and LPIPS are *proxies* computed from a frozen toy classifier's features —
the reports label them ``fid_proxy`` / ``lpips_proxy`` so the numbers never
masquerade as the reference-network metrics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import scipy.linalg
import torch
import torch.nn.functional as F

PSNR_CAP = 100.0
SSIM_WINDOW = 7
SSIM_C1 = 0.01**2  # dynamic range 1
SSIM_C2 = 0.03**2


def compute_asr(
    clean: torch.Tensor,
    adv: torch.Tensor,
    labels: torch.Tensor,
    predict_fn,
) -> float | None:
    """Fraction of clean-correct images whose defended prediction flips.

    ``predict_fn`` maps an image batch to predicted labels under the scenario
    being evaluated. Returns ``None`` when no clean image is classified
    correctly (undefined ASR).
    """
    clean_pred = predict_fn(clean)
    eligible = clean_pred == labels
    n = int(eligible.sum())
    if n == 0:
        return None
    adv_pred = predict_fn(adv)
    flipped = (adv_pred != labels) & eligible
    return float(flipped.sum()) / n


def compute_psnr(x: torch.Tensor, x_adv: torch.Tensor) -> float:
    """Peak signal-to-noise ratio on [0, 1] images, capped at 100 dB."""
    if x.shape != x_adv.shape:
        raise ValueError("shape mismatch")
    mse = torch.mean((x - x_adv) ** 2).item()
    if mse <= 0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def _uniform_filter(x: torch.Tensor, window: int) -> torch.Tensor:
    k = torch.ones(1, 1, window, window, dtype=x.dtype) / (window * window)
    return F.conv2d(x, k)


def compute_ssim(x: torch.Tensor, x_adv: torch.Tensor, window: int = SSIM_WINDOW) -> float:
    """Mean structural similarity with a uniform window on [0, 1] images."""
    if x.shape != x_adv.shape:
        raise ValueError("shape mismatch")
    if x.dim() == 3:
        x, x_adv = x[None], x_adv[None]
    mu_x = _uniform_filter(x, window)
    mu_y = _uniform_filter(x_adv, window)
    xx = _uniform_filter(x * x, window) - mu_x * mu_x
    yy = _uniform_filter(x_adv * x_adv, window) - mu_y * mu_y
    xy = _uniform_filter(x * x_adv, window) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * xy + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (xx + yy + SSIM_C2)
    return float((num / den).mean())


def _embed(embedder, images: torch.Tensor) -> np.ndarray:
    with torch.no_grad():
        return embedder.penultimate(images).numpy()


def compute_fid_proxy(set_a: torch.Tensor, set_b: torch.Tensor, embedder) -> float:
    """Frechet distance between Gaussian fits of toy-classifier embeddings."""
    fa = _embed(embedder, set_a)
    fb = _embed(embedder, set_b)
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    cov_a = np.cov(fa, rowvar=False)
    cov_b = np.cov(fb, rowvar=False)
    d = cov_a.shape[0]
    if np.linalg.matrix_rank(cov_a) < d or np.linalg.matrix_rank(cov_b) < d:
        cov_a = cov_a + 1e-6 * np.eye(d)
        cov_b = cov_b + 1e-6 * np.eye(d)
    covmean = scipy.linalg.sqrtm(cov_a @ cov_b)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    diff = mu_a - mu_b
    fid = float(diff @ diff + np.trace(cov_a + cov_b - 2.0 * covmean))
    return max(fid, 0.0)


def compute_lpips_proxy(x: torch.Tensor, x_adv: torch.Tensor, embedder) -> float:
    """Mean channel-normalized feature distance across the embedder's layers."""
    if x.shape != x_adv.shape:
        raise ValueError("shape mismatch")
    with torch.no_grad():
        dists = []
        for fa, fb in zip(_layer_features(embedder, x), _layer_features(embedder, x_adv)):
            na = fa / (fa.norm(dim=1, keepdim=True) + 1e-10)
            nb = fb / (fb.norm(dim=1, keepdim=True) + 1e-10)
            dists.append(torch.mean((na - nb) ** 2))
        return float(torch.stack(dists).mean())


def _layer_features(net, x: torch.Tensor) -> list[torch.Tensor]:
    """Activations after each nonlinearity of the classifier's feature stack."""
    feats = []
    if hasattr(net, "features"):
        h = x
        for layer in net.features:
            h = layer(h)
            if isinstance(layer, torch.nn.SiLU):
                feats.append(h)
    else:  # MLP: treat hidden activations as 1x1 feature maps
        h = x
        for layer in net.body:
            h = layer(h)
            if isinstance(layer, torch.nn.SiLU):
                feats.append(h[:, :, None, None])
    if not feats:
        raise ValueError("embedder exposes no feature layers")
    return feats


@dataclass
class MetricsReport:
    """One report row: a (method, scenario, classifier) cell of the grid."""

    attack: str
    scenario: str
    classifier: str
    asr: float | None
    psnr: float
    ssim: float
    fid_proxy: float
    lpips_proxy: float
    runtime_mean: float | None
    n: int

    def validate(self) -> "MetricsReport":
        if self.asr is not None and not 0.0 <= self.asr <= 1.0:
            raise ValueError("asr outside [0, 1]")
        if not -1.0 <= self.ssim <= 1.0:
            raise ValueError("ssim outside [-1, 1]")
        for name in ("psnr", "fid_proxy", "lpips_proxy"):
            v = getattr(self, name)
            if v is None or not math.isfinite(v):
                raise ValueError(f"{name} must be finite")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def format_report_table(rows: list[MetricsReport]) -> str:
    """Columnar text table, one line per (classifier, scenario, method) row."""
    header = f"{'classifier':<10} {'scenario':<8} {'attack':<28} {'asr':>8} {'psnr':>9} {'ssim':>7} {'fid_proxy':>10} {'lpips_proxy':>12} {'n':>5}"
    lines = [header, "-" * len(header)]
    for r in rows:
        asr = "undef" if r.asr is None else f"{r.asr:.4f}"
        lines.append(
            f"{r.classifier:<10} {r.scenario:<8} {r.attack:<28} {asr:>8} {r.psnr:>9.4f} {r.ssim:>7.4f} "
            f"{r.fid_proxy:>10.4f} {r.lpips_proxy:>12.6f} {r.n:>5d}"
        )
    return "\n".join(lines) + "\n"
