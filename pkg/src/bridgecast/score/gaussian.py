"""Exact score of a stationary Gaussian random field under VE noising.

With a field whose Fourier coefficients are independent with per-mode
variance ``S(k)`` (unitary normalization), the noised law at time ``t`` is
diagonal in Fourier space with variance ``S + sigma^2(t)``, so the score is
a pointwise division there.
"""

from __future__ import annotations

import numpy as np

from ..fields import Field
from ..sde import NoiseSchedule
from ..spectral import band_index
from .base import ScoreModel


def wavenumber_modulus(n: int) -> np.ndarray:
    m = np.fft.fftfreq(n, 1.0 / n)
    return np.sqrt(m[:, None] ** 2 + m[None, :] ** 2)


def power_law_spectrum(n: int, exponent: float = 3.0, amplitude: float = 1.0, k_cut: float | None = None) -> np.ndarray:
    """``S(k) = amplitude * |k|^-exponent`` on the full ``fft2`` grid.

    ``S(0) = 0``; modes with ``|k| >= k_cut`` are zeroed when given.
    """
    k = wavenumber_modulus(n)
    s = np.zeros_like(k)
    nz = k > 0
    s[nz] = amplitude * k[nz] ** (-exponent)
    if k_cut is not None:
        s[k >= k_cut] = 0.0
    return s


class GaussianFieldScore(ScoreModel):
    """Analytic score for independent zero-mean Gaussian-field channels.

    ``spectrum`` is ``(N, N)`` (shared) or ``(C, N, N)`` (one per noised
    channel), laid out like ``np.fft.fft2``.
    """

    def __init__(
        self,
        spectrum: np.ndarray,
        schedule: NoiseSchedule,
        channels: tuple[str, ...] = ("x",),
        context_channels: tuple[str, ...] = (),
    ):
        self.channels = tuple(channels)
        self.context_channels = tuple(context_channels)
        spectrum = np.asarray(spectrum, dtype=np.float64)
        n_noised = len(self.noised_channels)
        if spectrum.ndim == 2:
            spectrum = np.broadcast_to(spectrum, (n_noised,) + spectrum.shape)
        if spectrum.shape[0] != n_noised or spectrum.shape[1] != spectrum.shape[2]:
            raise ValueError(f"spectrum shape {spectrum.shape} does not fit {n_noised} channels")
        if np.any(spectrum < 0):
            raise ValueError("spectrum must be non-negative")
        flip = np.roll(spectrum[:, ::-1, ::-1], 1, axis=(1, 2))
        if not np.allclose(spectrum, flip):
            raise ValueError("spectrum must satisfy S(k) = S(-k)")
        self.spectrum = np.array(spectrum)
        self.schedule = schedule

    @property
    def n_grid(self) -> int:
        return self.spectrum.shape[-1]

    def score(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        xn = np.moveaxis(x[..., self.noised_index], -1, 1)  # (B, C, N, N)
        if xn.shape[-1] != self.n_grid:
            raise ValueError("grid does not match spectrum")
        s2 = np.asarray(self.schedule.sigma2(np.asarray(t)))
        s2 = np.broadcast_to(s2, (xn.shape[0],))[:, None, None, None]
        out = -np.fft.ifft2(np.fft.fft2(xn) / (self.spectrum[None] + s2)).real
        return np.moveaxis(out, 1, -1)

    def sample(self, n_samples: int, rng: np.random.Generator) -> Field:
        """Exact draws from the clean field (context channels set to 0)."""
        n = self.n_grid
        white = rng.standard_normal((n_samples, len(self.noised_channels), n, n))
        x = np.fft.ifft2(np.sqrt(self.spectrum)[None] * np.fft.fft2(white)).real
        data = np.zeros((n_samples, n, n, len(self.channels)))
        data[..., self.noised_index] = np.moveaxis(x, 1, -1)
        return Field(data, self.channels)

    def expected_psd(self) -> np.ndarray:
        """Band-averaged PSD of the clean field, ``(n_bands, n_noised)``."""
        n = self.n_grid
        bands = band_index(n).ravel()
        counts = np.bincount(bands)
        out = [np.bincount(bands, weights=s.ravel()) / counts / n**2 for s in self.spectrum]
        return np.stack(out, axis=-1)
