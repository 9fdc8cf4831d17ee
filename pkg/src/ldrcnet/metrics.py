"""Full-reference image quality metrics (PSNR, SSIM) and dataset reports.

Images are float arrays in [0, 1], shaped (H, W) or (H, W, C).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

INF = float("inf")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio over all pixels and channels; ``inf`` if identical."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return INF
    return 10.0 * math.log10(max_val * max_val / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def _ssim_channel(a: np.ndarray, b: np.ndarray, g: np.ndarray, data_range: float) -> float:
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over the valid (unpadded) region, averaged across channels.

    11x11 Gaussian window with sigma 1.5, K1 = 0.01, K2 = 0.03.
    """
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    h, w = a.shape[:2]
    if min(h, w) < SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_window()
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], g, data_range) for c in range(a.shape[2])]))


@dataclass
class PairMetric:
    name: str
    psnr: float
    ssim: float


@dataclass
class MetricReport:
    pairs: List[PairMetric] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        vals = [p.psnr for p in self.pairs]
        return INF if any(math.isinf(v) for v in vals) else float(np.mean(vals))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([p.ssim for p in self.pairs]))

    def summary(self) -> str:
        return f"mean PSNR {_fmt_psnr(self.mean_psnr)}, mean SSIM {self.mean_ssim:.4f}"

    def to_tsv(self) -> str:
        lines = ["name\tpsnr\tssim"]
        lines += [f"{p.name}\t{_fmt_psnr(p.psnr)}\t{p.ssim:.6f}" for p in self.pairs]
        lines.append(f"mean\t{_fmt_psnr(self.mean_psnr)}\t{self.mean_ssim:.6f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        """Schema: {"pairs": [{"name", "psnr", "ssim"}], "mean_psnr", "mean_ssim"}.

        Infinite PSNR is written as the string "inf".
        """
        doc = {
            "pairs": [{"name": p.name, "psnr": _json_num(p.psnr), "ssim": p.ssim} for p in self.pairs],
            "mean_psnr": _json_num(self.mean_psnr),
            "mean_ssim": self.mean_ssim,
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        doc = json.loads(text)
        return cls([PairMetric(p["name"], float(p["psnr"]), float(p["ssim"])) for p in doc["pairs"]])


def _fmt_psnr(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.4f}"


def _json_num(v: float):
    return "inf" if math.isinf(v) else v


def eval_dataset(outputs: Sequence[np.ndarray], targets: Sequence[np.ndarray], names: Sequence[str] = None) -> MetricReport:
    """Per-pair PSNR/SSIM between model outputs and ground truth."""
    if len(outputs) != len(targets):
        raise ValueError(f"{len(outputs)} outputs but {len(targets)} targets")
    if not outputs:
        raise ValueError("nothing to evaluate")
    names = list(names) if names is not None else [str(i) for i in range(len(outputs))]
    return MetricReport([PairMetric(n, psnr(o, t), ssim(o, t)) for n, o, t in zip(names, outputs, targets)])
