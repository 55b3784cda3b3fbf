"""Evaluation metrics: KDE densities with bootstrap bands, condensation-rate
distributions, PSD comparisons and the filtered-L2 conditional check."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats
from scipy.signal import fftconvolve

from .fields import Field, GridSpec, SnapshotSet
from .fluid_sim import condensation_rate
from .spectral import PsdCurve, lowpass, psd_samples

KDE_BINS = 1024


class DegenerateSampleError(ValueError):
    pass


class NoPositiveRatesError(ValueError):
    pass


def silverman_bandwidth(x: np.ndarray) -> float:
    """``0.9 min(std, IQR/1.34) n^(-1/5)``, falling back to std if IQR is 0."""
    x = np.asarray(x, dtype=np.float64)
    sd = float(np.std(x, ddof=1))
    iqr = float(np.subtract(*np.percentile(x, [75, 25])))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * spread * x.size ** (-0.2)


@dataclass(frozen=True, eq=False)
class KdeCurve:
    grid: np.ndarray
    density: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    n_boot: int
    ci_level: float
    bandwidth: float

    def at(self, x) -> np.ndarray:
        return np.interp(x, self.grid, self.density, left=0.0, right=0.0)

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))

    def log_density(self, floor: float = 1e-300) -> np.ndarray:
        return np.log10(np.maximum(self.density, floor))


def _kernel(h: float, dx: float) -> np.ndarray:
    half = int(np.ceil(5 * h / dx))
    u = np.arange(-half, half + 1) * dx
    k = np.exp(-0.5 * (u / h) ** 2)
    return k / (k.sum() * dx)


def kde_pdf(
    samples,
    n_boot: int = 10000,
    ci: float = 0.99,
    grid: np.ndarray | None = None,
    bandwidth: float | None = None,
    seed: int = 0,
    n_bins: int = KDE_BINS,
) -> KdeCurve:
    """Binned Gaussian KDE with pointwise bootstrap confidence bands.

    Samples are assigned to the nearest of ``n_bins`` equally spaced bins
    spanning the data range padded by 5 bandwidths; the histogram is then
    convolved with the kernel. Bootstrap resamples are multinomial redraws
    of the bin counts, which is equivalent to resampling the data. The bands
    are the ``(1 -+ ci)/2`` quantiles, widened where needed so they always
    contain the point estimate. ``grid`` only controls where the result is
    reported (by linear interpolation).
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 30:
        raise ValueError("need at least 30 samples")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise DegenerateSampleError("degenerate (zero-variance) samples")
    lo, hi = float(x.min()) - 5 * h, float(x.max()) + 5 * h
    dx = (hi - lo) / (n_bins - 1)
    centers = lo + dx * np.arange(n_bins)
    idx = np.clip(np.rint((x - lo) / dx).astype(np.int64), 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins).astype(np.float64)
    kern = _kernel(h, dx)

    def smooth(c):
        return np.maximum(fftconvolve(c, kern[None] if c.ndim == 2 else kern, mode="same", axes=-1), 0.0)

    est = smooth(counts) / x.size
    rng = np.random.default_rng(seed)
    p = counts / counts.sum()
    boots = np.empty((n_boot, n_bins))
    chunk = 500
    for i in range(0, n_boot, chunk):
        m = min(chunk, n_boot - i)
        boots[i : i + m] = smooth(rng.multinomial(x.size, p, size=m).astype(np.float64)) / x.size
    q_lo, q_hi = np.quantile(boots, [(1 - ci) / 2, (1 + ci) / 2], axis=0) if n_boot else (est, est)
    q_lo, q_hi = np.minimum(q_lo, est), np.maximum(q_hi, est)
    if grid is None:
        return KdeCurve(centers, est, q_lo, q_hi, n_boot, ci, h)
    grid = np.asarray(grid, dtype=np.float64)

    def interp(v):
        return np.interp(grid, centers, v, left=0.0, right=0.0)

    return KdeCurve(grid, interp(est), interp(q_lo), interp(q_hi), n_boot, ci, h)


def _field_of(s) -> Field:
    return s.field if isinstance(s, SnapshotSet) else s


def positive_condensation_rates(s, q_s: Field, tau: float) -> np.ndarray:
    """All positive per-pixel condensation rates of a set."""
    f = _field_of(s)
    sup = f.channel("supersaturation")
    qs = q_s.data[..., 0]
    c = condensation_rate(sup + qs, np.broadcast_to(qs, sup.shape), tau)
    c = c[c > 0]
    if c.size == 0:
        raise NoPositiveRatesError("no positive rates")
    return c


def saturation_of_set(s: SnapshotSet) -> tuple[Field, float]:
    """Per-sample saturation field gamma*y + context and relaxation time of a fluid set."""
    sp = s.extra.get("sim_params", {})
    gamma = float(sp.get("gamma", 1.0))
    tau = float(sp.get("tau", 1e-2))
    y = GridSpec(s.n_grid).mesh()[1]
    ctx = s.field.channel("context") if "context" in s.channels else np.zeros((len(s),) + y.shape)
    return Field((gamma * y + ctx)[..., None], ("q_s",)), tau


def set_condensation_rates(s: SnapshotSet) -> np.ndarray:
    """Positive condensation rates pooled over every snapshot of a fluid set."""
    qs, tau = saturation_of_set(s)
    sup = s.field.channel("supersaturation")
    rates = []
    for i in range(len(s)):
        f = Field(sup[i][None, ..., None], ("supersaturation",))
        try:
            rates.append(positive_condensation_rates(f, qs.samples(i), tau))
        except NoPositiveRatesError:
            continue
    if not rates:
        raise NoPositiveRatesError("no positive rates")
    return np.concatenate(rates)


def condensation_distribution(s, q_s: Field, tau: float, **kde_kw) -> KdeCurve:
    """KDE of positive condensation rates; view with ``log_density()``."""
    return kde_pdf(positive_condensation_rates(s, q_s, tau), **kde_kw)


def domain_stats(f) -> dict[str, tuple[float, float]]:
    """Pixel mean and standard deviation per channel over a whole set."""
    f = _field_of(f)
    return {c: (float(f.channel(c).mean()), float(f.channel(c).std())) for c in f.channels}


def filtered_l2(a: Field, b: Field, k_star: float, stats_a: Mapping, stats_b: Mapping) -> np.ndarray:
    """Pixel-wise L2 distance after low-passing (``|k| < k_star``) and
    normalizing each image by its own domain's mean and std.

    Returns ``(B, C)`` over the channels shared by ``a`` and ``b``
    (in ``a``'s order). Sample counts must match or one side must be 1.
    """
    if a.n_grid != b.n_grid:
        raise ValueError("grids differ")
    names = tuple(c for c in a.channels if c in b.channels)

    def norm(f, st):
        out = np.empty(f.data.shape[:3] + (len(names),))
        for i, c in enumerate(names):
            mu, sd = st[c]
            if not sd > 0:
                raise ValueError(f"zero std for channel {c!r}")
            out[..., i] = (f.channel(c) - mu) / sd
        return lowpass(Field(out, names), k_star).data

    d = norm(a, stats_a) - norm(b, stats_b)
    return np.sqrt((d**2).sum(axis=(1, 2)))


@dataclass(frozen=True, eq=False)
class L2Report:
    channels: tuple[str, ...]
    paired: np.ndarray  # (B, C)
    random: np.ndarray  # (B, C)

    def quartiles(self) -> dict[str, dict[str, np.ndarray]]:
        return {
            kind: {c: np.percentile(v[:, i], [25, 50, 75]) for i, c in enumerate(self.channels)}
            for kind, v in (("paired", self.paired), ("random", self.random))
        }

    def median_gap_confidence(self, channel: str, n_boot: int = 10000, seed: int = 0) -> float:
        """Bootstrap share of resamples with median(paired) < median(random)."""
        i = self.channels.index(channel)
        p, r = self.paired[:, i], self.random[:, i]
        rng = np.random.default_rng(seed)
        mp = np.median(p[rng.integers(0, p.size, (n_boot, p.size))], axis=1)
        mr = np.median(r[rng.integers(0, r.size, (n_boot, r.size))], axis=1)
        return float(np.mean(mp < mr))

    def two_sample_p(self, channel: str) -> float:
        """Kolmogorov-Smirnov p-value for paired vs random distances."""
        i = self.channels.index(channel)
        return float(stats.ks_2samp(self.paired[:, i], self.random[:, i]).pvalue)


def random_pairing(n: int, rng: np.random.Generator) -> np.ndarray:
    """A permutation with no fixed points (for ``n >= 2``)."""
    if n < 2:
        raise ValueError("need at least two samples")
    return (np.arange(n) + rng.integers(1, n, size=n)) % n


def l2_report(outputs: Field, sources: Field, k_star: float, stats_out=None, stats_src=None, seed: int = 0) -> L2Report:
    """Distances of each output to its own source and to a random other one."""
    stats_out = domain_stats(outputs) if stats_out is None else stats_out
    stats_src = domain_stats(sources) if stats_src is None else stats_src
    channels = tuple(c for c in outputs.channels if c in sources.channels)
    paired = filtered_l2(outputs, sources, k_star, stats_out, stats_src)
    perm = random_pairing(outputs.n_samples, np.random.default_rng(seed))
    rand = filtered_l2(outputs, sources.samples(perm), k_star, stats_out, stats_src)
    return L2Report(channels, paired, rand)


def write_l2_csv(report: L2Report, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pair_type", "channel", "distance"])
        for kind, v in (("paired", report.paired), ("random", report.random)):
            for i, c in enumerate(report.channels):
                for d in v[:, i]:
                    w.writerow([kind, c, repr(float(d))])


def write_kde_csv(curve: KdeCurve, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "density", "ci_low", "ci_high"])
        for row in zip(curve.grid, curve.density, curve.ci_low, curve.ci_high):
            w.writerow([repr(float(v)) for v in row])


@dataclass(frozen=True, eq=False)
class PsdBands:
    label: str
    curve: PsdCurve
    low: np.ndarray
    high: np.ndarray


def psd_with_bands(f, label: str = "", channels=None, n_boot: int = 200, ci: float = 0.99, seed: int = 0) -> PsdBands:
    """Sample-mean PSD with bootstrap-over-samples confidence bands."""
    f = _field_of(f)
    per = psd_samples(f, channels)
    names = tuple(channels) if channels is not None else f.channels
    mean = per.mean(axis=0)
    rng = np.random.default_rng(seed)
    b = per.shape[0]
    boots = np.stack([per[rng.integers(0, b, b)].mean(axis=0) for _ in range(n_boot)]) if n_boot else mean[None]
    lo, hi = np.quantile(boots, [(1 - ci) / 2, (1 + ci) / 2], axis=0)
    return PsdBands(label, PsdCurve(mean, names, f.n_grid), np.minimum(lo, mean), np.maximum(hi, mean))


def compare_psd(
    sets: Mapping[str, Field | SnapshotSet],
    out_dir,
    channels: Sequence[str] | None = None,
    n_boot: int = 200,
    seed: int = 0,
    plot: bool = True,
) -> dict[str, PsdBands]:
    """Write ``psd_<label>.csv`` per set plus one PNG per channel."""
    fields = {k: _field_of(v) for k, v in sets.items()}
    sizes = {f.n_grid for f in fields.values()}
    if len(sizes) != 1:
        raise ValueError(f"grid sizes differ: {sorted(sizes)}")
    if channels is None:
        channels = [c for c in next(iter(fields.values())).channels if c != "context"]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    from .spectral import write_psd_csv

    result = {}
    for label, f in fields.items():
        bands = psd_with_bands(f, label, channels, n_boot, seed=seed)
        write_psd_csv(bands.curve, out_dir / f"psd_{label}.csv", resolved_only=True)
        result[label] = bands
    if plot:
        for c in channels:
            plot_psd(result, c, out_dir / f"psd_{c}.png")
    return result


def plot_psd(bands: Mapping[str, PsdBands], channel: str, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for label, b in bands.items():
        i = b.curve.channels.index(channel)
        k = np.arange(1, b.curve.n_resolved)
        ax.loglog(k, b.curve.psd[k, i], label=label)
        ax.fill_between(k, b.low[k, i], b.high[k, i], alpha=0.3)
    ax.set_xlabel("wavenumber k")
    ax.set_ylabel(f"PSD ({channel})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def plot_kde(curves: Mapping[str, KdeCurve], path, xlabel: str = "", log: bool = True, marker: float | None = None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for label, c in curves.items():
        ax.plot(c.grid, c.density, label=label)
        ax.fill_between(c.grid, c.ci_low, c.ci_high, alpha=0.3)
    if log:
        ax.set_yscale("log")
    if marker is not None:
        ax.axvline(marker, color="k", ls="--", lw=0.8)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("density")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def spatial_mean_variance_ratio(generated: Field, reference: Field, channel: str) -> float:
    """Variance of per-sample spatial means, generated over reference."""
    g = generated.channel(channel).mean(axis=(1, 2))
    r = reference.channel(channel).mean(axis=(1, 2))
    return float(np.var(g) / np.var(r))
