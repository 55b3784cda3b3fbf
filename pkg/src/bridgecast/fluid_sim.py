"""Pseudospectral solver for forced 2D turbulence with a condensing tracer.

Vorticity obeys ``d(zeta)/dt + J(psi, zeta) = f - a zeta - kappa Lap^8 zeta``
with ``Lap psi = zeta`` and ``J(psi, b) = psi_y b_x - psi_x b_y``. The tracer
``q`` obeys ``dq/dt + J(psi, q) = e - c - kappa Lap^8 q`` where
``c = (q - q_s) Theta(q - q_s) / tau``.

Because ``q_s`` has a linear background ``gamma * y`` the solver evolves the
periodic part ``p = q - gamma * y``; the background enters as
``J(psi, gamma y) = -gamma psi_x``.

Time stepping is integrating-factor RK4 on the deterministic terms (drag and
hyperdiffusion exact), 2/3-rule dealiasing, and the white-in-time ring
forcing added once per step as an Euler-Maruyama increment.
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from .fields import Field, GridSpec, SnapshotSet

log = logging.getLogger(__name__)

CHANNELS = ("vorticity", "supersaturation", "context")


class SimulationBlowUp(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"simulation blow-up at step {step}")
        self.step = step


class EmptyRingError(ValueError):
    pass


@dataclass(frozen=True)
class SimParams:
    grid: GridSpec
    dt: float = 1e-3
    n_steps: int = 200_000
    n_spinup: int = 100_000
    drag: float = 1e-2
    hyperdiffusivity: float = 1e-8
    gamma: float = 1.0
    evaporation: float = 1.0
    tau: float = 1e-2
    forcing_wavenumber: float = 3.0
    forcing_bandwidth: float = 2.0
    energy_input: float = 0.1
    modulation_amplitude: float = 0.0
    modulation_wavenumber: int = 0
    rng_seed: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.hyperdiffusivity < 0 or self.drag < 0:
            raise ValueError("kappa and drag must be non-negative")
        if self.forcing_bandwidth <= 0:
            raise ValueError("forcing bandwidth must be positive")
        if not 0 <= self.n_spinup < self.n_steps:
            raise ValueError("need 0 <= n_spinup < n_steps")
        if self.modulation_wavenumber < 0:
            raise ValueError("modulation wavenumber must be >= 0")

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        grid = d.pop("grid")
        d["n_grid"] = grid["n_grid"]
        d["domain_length"] = grid["domain_length"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SimParams:
        d = dict(d)
        grid = GridSpec(int(d.pop("n_grid")), float(d.pop("domain_length", 2 * math.pi)))
        return cls(grid=grid, **d)

    def digest(self) -> str:
        text = "\n".join(f"{k}={v!r}" for k, v in sorted(self.as_dict().items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


# Dataset subsets. "paper" is the full-size configuration; "desk" keeps the
# physics but uses 128^2 for the high-res grid and covers the same 200 time
# units with 20k steps of dt = 1e-2.
SUBSETS = ("low-res", "high-res-1", "high-res-2", "high-res-4", "high-res-8", "high-res-16")


def subset_params(name: str, scale: str = "desk", **overrides) -> SimParams:
    if name not in SUBSETS:
        raise KeyError(f"unknown subset {name!r}; choose from {SUBSETS}")
    if scale not in ("desk", "paper"):
        raise ValueError(f"unknown scale {scale!r}")
    low = name == "low-res"
    if scale == "paper":
        n_grid, dt, n_steps, n_spinup = (64 if low else 512), 1e-3, 200_000, 100_000
    else:
        n_grid, dt, n_steps, n_spinup = (64 if low else 128), 1e-2, 20_000, 10_000
    kw = dict(
        grid=GridSpec(n_grid),
        dt=dt,
        n_steps=n_steps,
        n_spinup=n_spinup,
        hyperdiffusivity=1e-8 if low else 1e-16,
        modulation_amplitude=0.0 if low else 1.0,
        modulation_wavenumber=0 if low else int(name.rsplit("-", 1)[1]),
    )
    if "n_grid" in overrides:
        kw["grid"] = GridSpec(int(overrides.pop("n_grid")))
    kw.update(overrides)
    return SimParams(**kw)


def saturation_field(grid: GridSpec, gamma: float, amplitude: float, k_xy: int) -> Field:
    """``q_s = gamma y + A sin(2 pi k x / L) sin(2 pi k y / L)`` on the grid nodes."""
    x, y = grid.mesh()
    arg = 2 * math.pi * k_xy / grid.domain_length
    qs = gamma * y + amplitude * np.sin(arg * x) * np.sin(arg * y)
    return Field(qs[..., None], ("q_s",))


def _modulation(params: SimParams) -> np.ndarray:
    qs = saturation_field(params.grid, 0.0, params.modulation_amplitude, params.modulation_wavenumber)
    return qs.data[0, ..., 0]


def condensation_rate(q, q_s, tau: float):
    """``(q - q_s) Theta(q - q_s) / tau`` with ``Theta(0) = 0``.

    Accepts arrays or single-channel :class:`Field` objects.
    """
    if isinstance(q, Field):
        qa = q.data[..., 0]
        qsa = q_s.data[..., 0] if isinstance(q_s, Field) else q_s
        return Field(condensation_rate(qa, qsa, tau)[..., None], ("condensation",))
    d = np.asarray(q, dtype=np.float64) - np.asarray(q_s, dtype=np.float64)
    return np.where(d > 0, d, 0.0) / tau


class SpectralGrid:
    """Wavenumbers and masks in the ``rfft2`` layout ``(ky, kx)``."""

    def __init__(self, grid: GridSpec):
        n = grid.n_grid
        self.n = n
        self.grid = grid
        scale = 2 * math.pi / grid.domain_length
        self.mx = sfft.rfftfreq(n, 1.0 / n)[None, :]
        self.my = sfft.fftfreq(n, 1.0 / n)[:, None]
        self.kx = scale * self.mx
        self.ky = scale * self.my
        self.k2 = self.kx**2 + self.ky**2
        self.inv_k2 = np.divide(1.0, self.k2, out=np.zeros_like(self.k2), where=self.k2 > 0)
        self.dealias = (np.abs(self.mx) <= n / 3) & (np.abs(self.my) <= n / 3)
        # rfft2 stores kx > 0 once for a +/- pair
        w = np.full(self.k2.shape, 2.0)
        w[:, 0] = 1.0
        if n % 2 == 0:
            w[:, -1] = 1.0
        self.weights = w

    def to_grid(self, a_hat: np.ndarray) -> np.ndarray:
        return sfft.irfft2(a_hat, s=(self.n, self.n))

    def to_spectral(self, a: np.ndarray) -> np.ndarray:
        return sfft.rfft2(a)

    def energy(self, zeta_hat: np.ndarray) -> float:
        """Kinetic energy ``0.5 <|grad psi|^2>`` of one vorticity spectrum."""
        return 0.5 * float(np.sum(self.weights * np.abs(zeta_hat) ** 2 * self.inv_k2)) / self.n**4


def kinetic_energy(vorticity: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Kinetic energy per sample for vorticity grids of shape ``(B, N, N)``."""
    sg = SpectralGrid(grid)
    z = sfft.rfft2(np.asarray(vorticity, dtype=np.float64), axes=(-2, -1))
    e = np.sum(sg.weights * np.abs(z) ** 2 * sg.inv_k2, axis=(-2, -1))
    return 0.5 * e / grid.n_grid**4


class RingForcing:
    """White-in-time vorticity forcing on an isotropic wavenumber ring.

    Every mode with ``|k|`` in ``[k_f - dk/2, k_f + dk/2]`` gets the same
    amplitude and an independent random phase. The amplitude is set so the
    expected energy input is ``eps`` per unit time.
    """

    def __init__(self, grid: GridSpec, k_f: float, dk: float, eps: float):
        if k_f <= 0:
            raise ValueError("forcing wavenumber must be positive")
        sg = SpectralGrid(grid)
        k = np.sqrt(sg.k2)
        ring = (k >= k_f - dk / 2) & (k <= k_f + dk / 2) & sg.dealias & (sg.k2 > 0)
        if not ring.any():
            raise EmptyRingError(f"no modes with |k| in [{k_f - dk / 2}, {k_f + dk / 2}]")
        self.ring = ring
        # sum over the full (+/- kx) plane of 1/k^2 for ring modes
        inv_sum = float(np.sum(sg.weights * ring * sg.inv_k2))
        self.amplitude = math.sqrt(2 * eps * grid.n_grid**2 / inv_sum)
        self.sg = sg

    def sample(self, dt: float, rng: np.random.Generator) -> np.ndarray:
        n = self.sg.n
        w = sfft.rfft2(rng.standard_normal((n, n)))
        out = np.where(self.ring, w, 0.0) * (self.amplitude * math.sqrt(dt))
        out[0, 0] = 0.0
        return out


def ring_forcing_sample(grid: GridSpec, k_f, dk, eps, dt, rng) -> np.ndarray:
    """One forcing increment (``rfft2`` layout) for a step of length ``dt``."""
    return RingForcing(grid, k_f, dk, eps).sample(dt, rng)


@dataclass(frozen=True, eq=False)
class SimState:
    zeta_hat: np.ndarray
    q: np.ndarray
    t_sim: float = 0.0


class FluidModel:
    """Precomputed operators for one :class:`SimParams`."""

    def __init__(self, params: SimParams):
        self.params = params
        sg = self.sg = SpectralGrid(params.grid)
        dt = params.dt
        hyper = params.hyperdiffusivity * sg.k2**8
        self.half_z = np.exp(-(params.drag + hyper) * dt / 2)
        self.half_q = np.exp(-hyper * dt / 2)
        self.mask = sg.dealias
        _, y = params.grid.mesh()
        self.background = params.gamma * y
        self.modulation = _modulation(params)
        self.forcing = None
        if params.energy_input > 0:
            self.forcing = RingForcing(
                params.grid, params.forcing_wavenumber, params.forcing_bandwidth, params.energy_input
            )

    def initial_state(self) -> SimState:
        n = self.sg.n
        zeta_hat = np.zeros((n, n // 2 + 1), dtype=complex)
        return SimState(zeta_hat, self.background + self.modulation, 0.0)

    def _rhs(self, z, p):
        sg, prm = self.sg, self.params
        psi = -z * sg.inv_k2
        psi_x = sg.to_grid(1j * sg.kx * psi)
        psi_y = sg.to_grid(1j * sg.ky * psi)
        z_x = sg.to_grid(1j * sg.kx * z)
        z_y = sg.to_grid(1j * sg.ky * z)
        p_x = sg.to_grid(1j * sg.kx * p)
        p_y = sg.to_grid(1j * sg.ky * p)
        p_grid = sg.to_grid(p)
        jac_z = psi_y * z_x - psi_x * z_y
        jac_q = psi_y * p_x - psi_x * p_y - prm.gamma * psi_x
        cond = condensation_rate(p_grid, self.modulation, prm.tau)
        nz = -sg.to_spectral(jac_z) * self.mask
        nz[0, 0] = 0.0
        nq = sg.to_spectral(prm.evaporation - cond - jac_q) * self.mask
        return nz, nq

    def step(self, state: SimState, rng: np.random.Generator) -> SimState:
        dt = self.params.dt
        ez, eq = self.half_z, self.half_q
        z = state.zeta_hat
        p = self.sg.to_spectral(state.q - self.background) * self.mask
        k1z, k1q = self._rhs(z, p)
        k2z, k2q = self._rhs(ez * (z + 0.5 * dt * k1z), eq * (p + 0.5 * dt * k1q))
        k3z, k3q = self._rhs(ez * z + 0.5 * dt * k2z, eq * p + 0.5 * dt * k2q)
        k4z, k4q = self._rhs(ez * ez * z + dt * ez * k3z, eq * eq * p + dt * eq * k3q)
        z = ez * ez * z + dt / 6 * (ez * ez * k1z + 2 * ez * (k2z + k3z) + k4z)
        p = eq * eq * p + dt / 6 * (eq * eq * k1q + 2 * eq * (k2q + k3q) + k4q)
        if self.forcing is not None:
            z = z + self.forcing.sample(dt, rng)
        z = z * self.mask
        z[0, 0] = 0.0
        p = p * self.mask
        return SimState(z, self.sg.to_grid(p) + self.background, state.t_sim + dt)

    def snapshot(self, state: SimState) -> np.ndarray:
        """``(N, N, 3)`` array: vorticity, supersaturation, context."""
        zeta = self.sg.to_grid(state.zeta_hat)
        q_s = self.background + self.modulation
        return np.stack([zeta, state.q - q_s, self.modulation], axis=-1)


@functools.lru_cache(maxsize=8)
def _model(params: SimParams) -> FluidModel:
    return FluidModel(params)


def step(state: SimState, params: SimParams, rng: np.random.Generator, index: int = 0) -> SimState:
    """Advance one time step; raises :class:`SimulationBlowUp` on NaN/Inf."""
    with np.errstate(over="ignore", invalid="ignore"):
        new = _model(params).step(state, rng)
    if not (np.all(np.isfinite(new.zeta_hat)) and np.all(np.isfinite(new.q))):
        raise SimulationBlowUp(index)
    return new


def run_simulation(
    params: SimParams, snapshot_stride: int = 100, subset_name: str = "", progress_every: int = 0
) -> SnapshotSet:
    """Integrate from rest, drop spin-up, and keep every ``snapshot_stride``-th state.

    Snapshots are the states after steps ``n_spinup + snapshot_stride``,
    ``n_spinup + 2 * snapshot_stride``, ... up to ``n_steps``.
    """
    if snapshot_stride < 1:
        raise ValueError("snapshot_stride must be >= 1")
    model = FluidModel(params)
    rng = np.random.default_rng(params.rng_seed)
    state = model.initial_state()
    frames = []
    for i in range(1, params.n_steps + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            state = model.step(state, rng)
        if not (np.all(np.isfinite(state.zeta_hat)) and np.all(np.isfinite(state.q))):
            raise SimulationBlowUp(i)
        if i > params.n_spinup and (i - params.n_spinup) % snapshot_stride == 0:
            frames.append(model.snapshot(state))
        if progress_every and i % progress_every == 0:
            log.info("step %d/%d  E=%.4g", i, params.n_steps, model.sg.energy(state.zeta_hat))
    if not frames:
        raise ValueError("no snapshots after spin-up; reduce snapshot_stride")
    return SnapshotSet(
        Field(np.stack(frames), CHANNELS),
        subset_name=subset_name,
        sim_params_digest=params.digest(),
        spinup_discarded=params.n_spinup,
        extra={"snapshot_stride": snapshot_stride, "sim_params": params.as_dict()},
    )
