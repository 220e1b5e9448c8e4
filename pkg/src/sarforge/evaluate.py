"""Percent-RMSE and SSIM between predicted and simulated SAR maps, plus reports."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RMSE_BAND = 11.0
SSIM_BAND = 0.84

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


class MetricError(ValueError):
    pass


def rmse_pct(pred, truth, mask=None):
    """100 * RMSE / max(truth), over the full raster or only ``mask`` cells."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {truth.shape}")
    peak = truth.max()
    if not peak > 0:
        raise MetricError("ground truth is all zero; percent RMSE undefined")
    diff = pred - truth
    if mask is not None:
        diff = diff[np.asarray(mask, dtype=bool)]
    return 100.0 * math.sqrt(float(np.mean(diff * diff))) / float(peak)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return g


def _filter_valid(img, g):
    # separable correlation, 'valid' region only
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=1) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=0) @ g


def ssim_map(pred, truth, data_range=None):
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim != 2 or min(x.shape) < SSIM_WINDOW:
        raise MetricError(f"SSIM needs 2D images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    L = float(y.max()) if data_range is None else float(data_range)
    if not L > 0:
        raise MetricError("SSIM dynamic range must be positive")
    c1 = (SSIM_K1 * L) ** 2
    c2 = (SSIM_K2 * L) ** 2
    g = gaussian_window()
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(pred, truth, data_range=None, mask=None):
    """Mean SSIM over 11x11 Gaussian (sigma 1.5) windows fully inside the image.

    ``data_range`` defaults to ``max(truth)``. With ``mask``, only windows
    centered on mask cells are averaged.
    """
    m = ssim_map(pred, truth, data_range)
    if mask is not None:
        r = SSIM_WINDOW // 2
        centers = np.asarray(mask, dtype=bool)[r : r + m.shape[0], r : r + m.shape[1]]
        if not centers.any():
            raise MetricError("mask has no valid window centers")
        return float(m[centers].mean())
    return float(m.mean())


@dataclass
class SampleMetrics:
    sample_id: int
    rmse_pct: float
    ssim: float
    flagged: bool


@dataclass
class MetricsReport:
    records: list = field(default_factory=list)

    @property
    def mean_rmse_pct(self):
        return float(np.mean([r.rmse_pct for r in self.records]))

    @property
    def max_rmse_pct(self):
        return float(np.max([r.rmse_pct for r in self.records]))

    @property
    def mean_ssim(self):
        return float(np.mean([r.ssim for r in self.records]))

    @property
    def min_ssim(self):
        return float(np.min([r.ssim for r in self.records]))

    @property
    def passes(self):
        return self.mean_rmse_pct < RMSE_BAND and self.mean_ssim > SSIM_BAND

    def banner(self):
        verdict = "PASS" if self.passes else "FAIL"
        return (f"{verdict}: mean rmse_pct {self.mean_rmse_pct:.3f}% (band < {RMSE_BAND}%), "
                f"mean ssim {self.mean_ssim:.4f} (band > {SSIM_BAND})")


def score_predictions(preds, truths, sample_ids=None, masks=None):
    """Per-sample metrics on predictions clamped to [0, 1]."""
    if len(preds) == 0:
        raise MetricError("no samples to evaluate")
    ids = range(len(preds)) if sample_ids is None else sample_ids
    report = MetricsReport()
    for k, (sid, p, t) in enumerate(zip(ids, preds, truths)):
        p = np.clip(p, 0.0, 1.0)
        mask = None if masks is None else masks[k]
        r = rmse_pct(p, t, mask)
        s = ssim(p, t, mask=mask)
        report.records.append(SampleMetrics(int(sid), r, s, not (r < RMSE_BAND and s > SSIM_BAND)))
    return report


def evaluate_split(predict_fn, samples, test_indices, mask_only=False):
    """Score ``predict_fn`` (n x H x W -> n x H x W) on the test split."""
    test_indices = list(test_indices)
    if not test_indices:
        raise MetricError("empty test split")
    x = np.stack([samples[i].input for i in test_indices])
    y = np.stack([samples[i].target for i in test_indices])
    preds = predict_fn(x)
    masks = (x > 0) if mask_only else None
    return score_predictions(preds, y, test_indices, masks), preds


def write_report_csv(report, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "rmse_pct", "ssim", "flagged"])
        for r in report.records:
            w.writerow([r.sample_id, repr(float(r.rmse_pct)), repr(float(r.ssim)), int(r.flagged)])
    return Path(path)


def read_report_csv(path):
    with open(path, newline="") as fh:
        return MetricsReport([
            SampleMetrics(int(row["sample_id"]), float(row["rmse_pct"]), float(row["ssim"]), row["flagged"] == "1")
            for row in csv.DictReader(fh)
        ])


def to_gray8(img, peak):
    """Scale so ``peak`` maps to 255; values are clipped to [0, 255]."""
    if not peak > 0:
        raise MetricError("image scale must be positive")
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) / peak * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, gray):
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(gray.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc
    return Path(path)


def read_pgm(path):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    return np.frombuffer(data, np.uint8, w * h, pos).reshape(h, w), maxval


def emit_report(report, samples, preds, out_dir, image_ids=()):
    """Write ``metrics.csv`` and input/truth/prediction PGM triplets for ``image_ids``.

    ``preds`` aligns with ``report.records``. Each triplet is scaled so the
    truth maximum maps to 255; the input uses its own maximum.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    write_report_csv(report, out / "metrics.csv")
    position = {r.sample_id: k for k, r in enumerate(report.records)}
    written = []
    for sid in image_ids:
        s = samples[sid]
        pred = np.clip(preds[position[sid]], 0.0, 1.0)
        peak = float(s.target.max())
        for tag, img, scale in (("input", s.input, float(s.input.max()) or 1.0),
                                ("truth", s.target, peak), ("pred", pred, peak)):
            written.append(write_pgm(out / f"sample{sid:05d}_{tag}.pgm", to_gray8(img, scale)))
    return written
