"""Azimuthal power spectra, sharp low-pass filtering, resolution change and
the source/target spectral crossing used to pick the bridge time."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .fields import Field


def mode_numbers(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer mode numbers ``(my, mx)`` for a full ``fft2`` of an ``n x n`` grid."""
    m = np.fft.fftfreq(n, 1.0 / n)
    return m[:, None], m[None, :]


def band_index(n: int) -> np.ndarray:
    """Band of every ``fft2`` mode: ``k`` such that ``k^2 <= |m|^2 < (k+1)^2``."""
    my, mx = mode_numbers(n)
    m2 = (mx**2 + my**2).astype(np.int64)
    k = np.floor(np.sqrt(m2)).astype(np.int64)
    # guard the floating sqrt at exact squares
    k = np.where((k + 1) ** 2 <= m2, k + 1, k)
    return np.where(k**2 > m2, k - 1, k)


def band_counts(n: int) -> np.ndarray:
    return np.bincount(band_index(n).ravel())


@dataclass(frozen=True, eq=False)
class PsdCurve:
    """Band-averaged power spectral density.

    ``psd[k, c]`` covers every band ``k = 0 .. floor(sqrt(2) N / 2)`` so that
    the bands partition all Fourier modes; bands below ``N/2`` are the fully
    resolved, isotropic ones (see :meth:`resolved`).
    """

    psd: np.ndarray
    channels: tuple[str, ...]
    n_grid: int

    @property
    def k(self) -> np.ndarray:
        return np.arange(self.psd.shape[0])

    @property
    def n_resolved(self) -> int:
        return self.n_grid // 2

    def resolved(self) -> np.ndarray:
        return self.psd[: self.n_resolved]

    def channel(self, name: str) -> np.ndarray:
        return self.psd[:, self.channels.index(name)]

    def modes(self) -> np.ndarray:
        return band_counts(self.n_grid)


def psd_samples(f: Field, channels: Sequence[str] | None = None, subtract_mean: bool = True) -> np.ndarray:
    """Per-sample band PSDs, shape ``(B, n_bands, C)``."""
    names = tuple(channels) if channels is not None else f.channels
    idx = [f.channel_index(c) for c in names]
    x = np.moveaxis(f.data[..., idx], -1, 1)  # (B, C, N, N)
    if subtract_mean:
        x = x - x.mean(axis=(-2, -1), keepdims=True)
    n = f.n_grid
    power = np.abs(np.fft.fft2(x)) ** 2 / float(n) ** 4
    bands = band_index(n).ravel()
    counts = np.bincount(bands)
    flat = power.reshape(power.shape[0], power.shape[1], -1)
    out = np.empty(flat.shape[:2] + (counts.size,))
    for b in range(flat.shape[0]):
        for c in range(flat.shape[1]):
            out[b, c] = np.bincount(bands, weights=flat[b, c], minlength=counts.size) / counts
    return np.moveaxis(out, 1, 2)


def azimuthal_psd(f: Field, channel: str | Sequence[str] | None = None, subtract_mean: bool = True) -> PsdCurve:
    """Sample-averaged azimuthal PSD.

    ``PSD(k) = N^-4 * mean over modes in band k of |DFT|^2`` with the
    unnormalized DFT, i.e. white noise of variance ``s^2`` gives ``s^2 / N^2``.
    """
    if channel is None:
        names = f.channels
    elif isinstance(channel, str):
        names = (channel,)
    else:
        names = tuple(channel)
    per = psd_samples(f, names, subtract_mean)
    return PsdCurve(per.mean(axis=0), names, f.n_grid)


def write_psd_csv(curve: PsdCurve, path, resolved_only: bool = False) -> None:
    rows = curve.resolved() if resolved_only else curve.psd
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k"] + [f"psd_{c}" for c in curve.channels])
        for k, row in enumerate(rows):
            w.writerow([k] + [repr(float(v)) for v in row])


def read_psd_csv(path) -> PsdCurve:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    channels = tuple(h[len("psd_") :] for h in rows[0][1:])
    psd = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    n_bands = psd.shape[0]
    for e in range(2, 17):
        n = 2**e
        if band_counts(n).size == n_bands or n // 2 == n_bands:
            return PsdCurve(psd, channels, n)
    raise ValueError(f"{n_bands} bands match no power-of-two grid")


def _spectral_apply(f: Field, fn) -> Field:
    x = np.moveaxis(f.data, -1, 1)
    out = fn(np.fft.rfft2(x), f.n_grid)
    y = np.fft.irfft2(out, s=(f.n_grid, f.n_grid))
    return Field(np.moveaxis(y, 1, -1), f.channels)


def _rfft_modulus(n: int) -> np.ndarray:
    my = np.fft.fftfreq(n, 1.0 / n)[:, None]
    mx = np.fft.rfftfreq(n, 1.0 / n)[None, :]
    return np.sqrt(mx**2 + my**2)


def lowpass(f: Field, k_cut: float) -> Field:
    """Zero every mode with ``|k| >= k_cut`` (sharp cutoff)."""
    n = f.n_grid
    if not 0 < k_cut <= n / 2:
        raise ValueError(f"k_cut must be in (0, N/2], got {k_cut}")
    keep = _rfft_modulus(n) < k_cut
    return _spectral_apply(f, lambda xh, _n: xh * keep)


def upsample_lowres(f: Field, factor: int, k_cut: float | None = None, compensate: bool = True) -> Field:
    """Nearest-neighbour upsampling followed by an anti-alias filter.

    Pixels are replicated ``factor`` times per axis, then every mode with
    ``|k| >= k_cut`` (default ``N_coarse / 3``, the coarse solver's dealiased
    band) is removed. With ``compensate`` the retained modes are divided by
    the replication kernel's transfer function, so the coarse spectrum is
    carried over unchanged.
    """
    if factor < 2 or factor & (factor - 1):
        raise ValueError("factor must be a power of two >= 2")
    nc = f.n_grid
    k_cut = nc / 3 if k_cut is None else k_cut
    fine = np.repeat(np.repeat(f.data, factor, axis=1), factor, axis=2)
    nf = nc * factor
    keep = _rfft_modulus(nf) < k_cut
    my = np.fft.fftfreq(nf, 1.0 / nf)[:, None]
    mx = np.fft.rfftfreq(nf, 1.0 / nf)[None, :]

    def transfer(m):
        # |sum_{j<F} exp(-2 pi i m j / nf)| / F, with the phase of the kernel
        num = np.sin(np.pi * m * factor / nf)
        den = factor * np.sin(np.pi * m / nf)
        amp = np.divide(num, den, out=np.ones_like(m, dtype=float), where=m != 0)
        phase = np.exp(-1j * np.pi * m * (factor - 1) / nf)
        return amp * phase

    h = transfer(mx) * transfer(my)
    if compensate:
        gain = np.divide(keep, h, out=np.zeros(h.shape, dtype=complex), where=keep)
    else:
        gain = keep

    x = np.moveaxis(fine, -1, 1)
    y = np.fft.irfft2(np.fft.rfft2(x) * gain, s=(nf, nf))
    return Field(np.moveaxis(y, 1, -1), f.channels)


class NoCrossingWarning(UserWarning):
    pass


@dataclass(frozen=True)
class KStar:
    channel: str
    k_star: int
    psd_star: float
    crossed: bool


def find_k_star(
    psd_source: PsdCurve, psd_target: PsdCurve, channel: str | None = None, rtol: float = 1e-9
) -> KStar:
    """First band where the source/target PSD difference changes sign.

    Signs are taken over the resolved bands ``k >= 1``; with ``rtol > 0`` a
    pair within ``rtol`` (relative, default guards round-off only) counts as equal, i.e. sign 0. The
    crossing lies between bands ``k*`` and ``k*+1`` and ``PSD*`` is the
    geometric mean of the target curve there. Without any sign change the
    band with the smallest ``|log S - log T|`` is returned and
    ``crossed=False`` (a :class:`NoCrossingWarning` is emitted).
    """
    if psd_source.n_grid != psd_target.n_grid:
        raise ValueError("curves have different N")
    if channel is None:
        if len(psd_source.channels) != 1:
            raise ValueError("pass channel= for multi-channel curves")
        channel = psd_source.channels[0]
    s = psd_source.channel(channel)[1 : psd_source.n_resolved]
    t = psd_target.channel(channel)[1 : psd_target.n_resolved]
    if not np.any(s > 0) or not np.any(t > 0):
        raise ValueError("all-zero PSD curve")
    with np.errstate(divide="ignore", invalid="ignore"):
        sign = np.sign(s - t)
        if rtol > 0:
            close = np.abs(np.log(s) - np.log(t)) <= math.log1p(rtol)
            sign = np.where(close, 0.0, sign)
    change = np.nonzero(sign[:-1] != sign[1:])[0]
    if change.size:
        i = int(change[0])
        return KStar(channel, i + 1, float(math.sqrt(t[i] * t[i + 1])), True)
    with np.errstate(divide="ignore", invalid="ignore"):
        gap = np.abs(np.log(s) - np.log(t))
    gap = np.where(np.isfinite(gap), gap, np.inf)
    i = int(np.argmin(gap))
    warnings.warn(f"no spectral crossing for channel {channel!r}", NoCrossingWarning, stacklevel=2)
    return KStar(channel, i + 1, float(t[i]), False)
