"""Acceptance suite: one test per criterion, each recording a pass/fail line.

Criteria 9 to 11 run desk-scale training and fluid simulations and take
several minutes each on a single core.
"""

import math

import numpy as np
import pytest
import torch
from scipy.integrate import quad

from bridgecast.cli import main
from bridgecast.evaluation import kde_pdf, l2_report, set_condensation_rates
from bridgecast.fields import Field, GridSpec, read_snapshot_set
from bridgecast.fluid_sim import FluidModel, SimParams, SimState, kinetic_energy, step
from bridgecast.score import GaussianFieldScore, UNet, UNetConfig, UNetScore, power_law_spectrum, unet_gradient
from bridgecast.sde import T_END, BridgeConfig, NoiseSchedule, downscale, reverse_em, t_star_from_psd
from bridgecast.spectral import azimuthal_psd, find_k_star
from bridgecast.training import TrainConfig, train

from test_cli import run_pipeline, ARTIFACTS

SCHED = NoiseSchedule()


def chunks(total, size):
    while total > 0:
        yield min(size, total)
        total -= size


# 1. white-noise PSD


def test_white_noise_psd_flat(report):
    n, total = 64, 10_000
    rng = np.random.default_rng(0)
    acc = 0.0
    for b in chunks(total, 500):
        f = Field(rng.standard_normal((b, n, n, 1)), ("x",))
        acc = acc + b * azimuthal_psd(f, subtract_mean=False).resolved()[:, 0]
    psd = acc / total
    dev = np.max(np.abs(psd / (1.0 / n**2) - 1))
    ok = report(1, dev < 0.05, f"max band deviation from 1/N^2 = {dev:.4f} (tol 0.05)")
    assert ok


# 2. Parseval


def test_parseval(report):
    rng = np.random.default_rng(1)
    worst = 0.0
    for i in range(100):
        n = (16, 32, 64)[i % 3]
        x = rng.standard_normal((1, n, n, 1)) * rng.uniform(0.1, 10) + rng.uniform(-5, 5)
        c = azimuthal_psd(Field(x, ("x",)), subtract_mean=False)
        total = np.sum(c.psd[:, 0] * c.modes())
        worst = max(worst, abs(total / np.mean(x**2) - 1))
    ok = report(2, worst < 1e-10, f"max relative Parseval error = {worst:.2e} (tol 1e-10)")
    assert ok


# 3. schedule identity


def test_schedule_identity(report):
    rng = np.random.default_rng(2)
    worst = 0.0
    for t in rng.uniform(0, 1, 20):
        integral, _ = quad(SCHED.g2, 0.0, t, epsabs=0, epsrel=1e-12)
        worst = max(worst, abs(SCHED.sigma2(t) / integral - 1))
    ok = report(3, worst < 1e-6, f"max relative error sigma^2 vs integral of g^2 = {worst:.2e} (tol 1e-6)")
    assert ok


# 4. reverse SDE with the analytic score


def test_reverse_sde_reproduces_power_law(report):
    n = 32
    oracle = GaussianFieldScore(power_law_spectrum(n, 3.0, 1.0), SCHED)
    rng = np.random.default_rng(3)
    prior = Field(SCHED.sigma(1.0) * rng.standard_normal((256, n, n, 1)), ("x",))
    out = reverse_em(prior, oracle, SCHED, 1.0, T_END, 500, rng)
    got = azimuthal_psd(out).resolved()[1:11, 0]
    expect = oracle.expected_psd()[1:11, 0]
    dev = np.max(np.abs(got / expect - 1))
    ok = report(4, dev < 0.10, f"max band deviation over k=1..10 = {dev:.4f} (tol 0.10)")
    assert ok


# 5 and 6. bridge behavior and limits


@pytest.fixture(scope="module")
def gaussian_domains():
    n = 32
    source = GaussianFieldScore(power_law_spectrum(n, 3.0, 1.0, k_cut=9), SCHED)
    target = GaussianFieldScore(power_law_spectrum(n, 3.0, 1.0), SCHED)
    return source, target


def test_bridge_behavior(report, gaussian_domains):
    source, target = gaussian_domains
    rng = np.random.default_rng(4)
    ps = azimuthal_psd(source.sample(2000, rng))
    pt = azimuthal_psd(target.sample(2000, rng))
    ks = find_k_star(ps, pt, rtol=0.1)
    t_star = t_star_from_psd(SCHED, ks.psd_star, 32)
    src = source.sample(128, rng)
    out = downscale(src, None, target, BridgeConfig(SCHED, t_star, k_star=ks.k_star), rng)
    got = azimuthal_psd(out).resolved()[9:, 0]
    expect = target.expected_psd()[9:16, 0]
    ratio = got / expect
    dev = np.abs(ratio - 1)
    conf = l2_report(out, src, ks.k_star, seed=5).median_gap_confidence("x")
    ok_k = ks.k_star == 8
    ok_a = bool(np.all(dev < 0.15))
    ok_b = conf >= 0.95
    bad = [k for k, d in zip(range(9, 16), dev) if d >= 0.15]
    detail = (
        f"k*={ks.k_star}, t*={t_star:.4f}; (a) PSD ratio bands 9..15 = {np.round(ratio, 3).tolist()}"
        f" (tol 0.15, failing bands {bad}); (b) median-gap confidence = {conf:.4f} (need >= 0.95)"
    )
    ok = report(5, ok_k and ok_a and ok_b, detail)
    assert ok


def test_bridge_limits(report, gaussian_domains):
    _, target = gaussian_domains
    rng = np.random.default_rng(6)
    src = target.sample(128, rng)
    near = downscale(src, None, target, BridgeConfig(SCHED, 2 * T_END), rng)
    q = float(np.quantile(np.abs(near.data - src.data), 0.999))
    full = downscale(src, None, target, BridgeConfig(SCHED, 1.0), rng)
    p = l2_report(full, src, 8, seed=7).two_sample_p("x")
    ok = report(6, q <= 5 * SCHED.sigma_min and p > 0.01, f"99.9% |out-in| = {q:.4f} (tol {5 * SCHED.sigma_min}); t*=1 KS p = {p:.3f} (need > 0.01)")
    assert ok


# 7. mean bypass structure


def test_mean_bypass_structure(report):
    torch.manual_seed(0)
    net = UNet(UNetConfig())
    g = torch.Generator().manual_seed(1)
    with torch.no_grad():
        net.project.weight.copy_(0.1 * torch.randn(net.project.weight.shape, generator=g))
        net.project.bias.copy_(0.1 * torch.randn(net.project.bias.shape, generator=g))
    net.eval()
    worst_mean, worst_out = 0.0, 0.0
    with torch.no_grad():
        for _ in range(100):
            x = torch.randn(1, 3, 32, 32, generator=g) + torch.randn(1, 3, 1, 1, generator=g)
            t = torch.rand(1, generator=g)
            y_prime, y_bar = net.branches(x, t)
            worst_mean = max(worst_mean, y_prime.mean(dim=(-2, -1)).abs().max().item())
            worst_out = max(worst_out, (net(x, t).mean(dim=(-2, -1)) - y_bar).abs().max().item())
    ok = report(7, worst_mean < 1e-6 and worst_out < 1e-6, f"max |mean Y'| = {worst_mean:.2e}, max |mean out - M| = {worst_out:.2e} (tol 1e-6)")
    assert ok


# 8. gradient check


def mse_loss(net, x, t, eps):
    return torch.mean((net(x, t) - eps) ** 2)


def test_gradient_check(report):
    torch.manual_seed(2)
    cfg = UNetConfig(base_width=8, n_res_blocks=1, embed_dim=16, bypass_width=16, dropout=0.0)
    net = UNet(cfg).double()
    g = torch.Generator().manual_seed(3)
    with torch.no_grad():
        net.project.weight.copy_(0.1 * torch.randn(net.project.weight.shape, generator=g, dtype=torch.float64))
    net.eval()
    x = torch.randn(2, 3, 16, 16, generator=g, dtype=torch.float64)
    t = torch.tensor([0.3, 0.7], dtype=torch.float64)
    eps = torch.randn(2, 2, 16, 16, generator=g, dtype=torch.float64)
    grads = unet_gradient(net, mse_loss, x, t, eps)
    params = dict(net.named_parameters())
    names = list(params)
    rng = np.random.default_rng(4)
    h, worst = 1e-4, 0.0
    for _ in range(50):
        name = names[rng.integers(len(names))]
        p = params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = mse_loss(net, x, t, eps).item()
            p[idx] = orig - h
            down = mse_loss(net, x, t, eps).item()
            p[idx] = orig
        fd = (up - down) / (2 * h)
        an = grads[name][idx].item()
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-7))
    ok = report(8, worst < 1e-3, f"max relative gradient error over 50 parameters = {worst:.2e} (tol 1e-3)")
    assert ok


# 9. learned score vs analytic score

TOY_TIMES = (0.2, 0.35, 0.5, 0.65, 0.8)


def test_learned_score_matches_oracle(report):
    torch.set_num_threads(1)
    oracle = GaussianFieldScore(power_law_spectrum(32, 3.0, 10.0), SCHED)
    data = oracle.sample(2400, np.random.default_rng(0))
    held_out = oracle.sample(64, np.random.default_rng(1))
    torch.manual_seed(0)
    net = UNet(UNetConfig(channels=("x",), context_channels=(), base_width=16, n_res_blocks=2, dropout=0.0, padding_mode="circular"))
    cfg = TrainConfig(learning_rate=3e-4, warmup_steps=500, batch_size=16, epochs=10_000, dropout=0.0, max_steps=12_000, val_fraction=0.1)
    train(net, data, cfg, SCHED)
    score = UNetScore(net, SCHED)
    errs = []
    for t in TOY_TIMES:
        rng = np.random.default_rng(2)
        xt = held_out.data + SCHED.sigma(t) * rng.standard_normal(held_out.data.shape)
        tt = np.full(len(xt), t)
        a, b = score.score(xt, tt), oracle.score(xt, tt)
        errs.append(float(np.linalg.norm(a - b) / np.linalg.norm(b)))
    worst = max(errs)
    detail = ", ".join(f"t={t}: {e:.4f}" for t, e in zip(TOY_TIMES, errs))
    ok = report(9, worst < 0.1, f"relative L2 score error {detail} (tol 0.1)")
    assert ok


# 10 and 11. fluid runs


@pytest.fixture(scope="module")
def fluid_runs(tmp_path_factory):
    d = tmp_path_factory.mktemp("fluid")
    (d / "sim.cfg").write_text("[sim]\nscale = desk\n")
    (d / "model.cfg").write_text(CONDENSATION_TRAIN)
    for subset, seed in (("low-res", "11"), ("high-res-4", "12")):
        argv = ["simulate", "--config", str(d / "sim.cfg"), "--subset", subset, "--out", str(d / f"{subset}.bcst"), "--seed", seed]
        assert main(argv) == 0
    return d


def linear_decay_error():
    p = SimParams(grid=GridSpec(32), dt=1e-2, n_steps=10, n_spinup=0, energy_input=0.0, evaporation=0.0, drag=0.5, hyperdiffusivity=0.0)
    m = FluidModel(p)
    x, y = p.grid.mesh()
    z0 = np.sin(2 * x + 3 * y)
    state = SimState(m.sg.to_spectral(z0), m.initial_state().q, 0.0)
    rng = np.random.default_rng(0)
    for i in range(100):
        state = step(state, p, rng, i)
    expect = z0 * math.exp(-0.5 * 100 * p.dt)
    return float(np.max(np.abs(m.sg.to_grid(state.zeta_hat) - expect)) / np.max(np.abs(expect)))


def relaxation_error():
    # dt = tau / 100 keeps the RK4 truncation error (about n z^5 / 120) well below the tolerance
    p = SimParams(grid=GridSpec(32), dt=1e-4, n_steps=10, n_spinup=0, energy_input=0.0, evaporation=0.0, tau=1e-2, hyperdiffusivity=0.0)
    m = FluidModel(p)
    qs = m.initial_state().q
    state = SimState(m.initial_state().zeta_hat, qs + 0.1, 0.0)
    rng = np.random.default_rng(0)
    for i in range(500):
        state = step(state, p, rng, i)
    expect = 0.1 * math.exp(-500 * p.dt / p.tau)
    return float(np.max(np.abs((state.q - qs) / expect - 1)))


def test_fluid_invariants(report, fluid_runs):
    s = read_snapshot_set(fluid_runs / "low-res.bcst")
    params = SimParams.from_dict(s.extra["sim_params"])
    zeta = s.field.channel("vorticity")
    mean_z = float(np.max(np.abs(zeta.mean(axis=(1, 2)))))
    finite = bool(np.all(np.isfinite(s.field.data)))
    energy = kinetic_energy(zeta, params.grid)
    times = np.arange(len(energy)) * s.extra["snapshot_stride"] * params.dt
    slope = np.polyfit(times, energy, 1)[0]
    trend = abs(slope * (times[-1] - times[0])) / np.mean(energy)
    lin, rel = linear_decay_error(), relaxation_error()
    checks = [mean_z < 1e-8, finite, trend < 0.05, lin < 1e-6, rel < 1e-6]
    detail = (
        f"{params.n_steps} steps at {params.grid.n_grid}^2: max |mean zeta| = {mean_z:.1e}, finite = {finite},"
        f" energy trend = {trend:.3f} of mean (tol 0.05); linear decay err = {lin:.1e}, relaxation err = {rel:.1e} (tol 1e-6)"
    )
    ok = report(10, all(checks), detail)
    assert ok


CONDENSATION_TRAIN = """
[train]
base_width = 16
n_res_blocks = 2
embed_dim = 32
bypass_width = 32
dropout = 0.0
padding_mode = circular
learning_rate = 1e-3
warmup_steps = 100
batch_size = 4
epochs = 1000
max_steps = 400
val_fraction = 0.1

[bridge]
n_samples = 32
"""


def test_condensation_ordering(report, fluid_runs):
    d = fluid_runs
    cfg = str(d / "model.cfg")
    steps = [
        ["prepare", "--config", cfg, "--in", str(d / "low-res.bcst"), "--target", str(d / "high-res-4.bcst"), "--out", str(d / "up.bcst")],
        ["train", "--config", cfg, "--in", str(d / "high-res-4.bcst"), "--out", str(d / "model.bckp"), "--seed", "13"],
        ["downscale", "--config", cfg, "--in", str(d / "up.bcst"), "--target", str(d / "high-res-4.bcst"), "--model", str(d / "model.bckp"), "--out", str(d / "down.bcst"), "--seed", "14"],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    rates = {name: set_condensation_rates(read_snapshot_set(d / f"{name}.bcst")) for name in ("low-res", "high-res-4", "down")}
    marker = float(np.quantile(rates["high-res-4"], 0.9))
    dens = {k: kde_pdf(np.log(v), n_boot=0).at(math.log(marker)) for k, v in rates.items()}
    ok_high = dens["high-res-4"] > dens["low-res"]
    ok_down = dens["down"] > dens["low-res"]
    detail = (
        f"log-rate KDE at high-res p90 = {marker:.3g}: high {dens['high-res-4']:.4f}, low {dens['low-res']:.4f},"
        f" downscaled {dens['down']:.4f} (need high > low and downscaled > low)"
    )
    ok = report(11, ok_high and ok_down, detail)
    assert ok


# 12. reproducibility


def test_cli_reproducible(report, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    run_pipeline(a)
    run_pipeline(b)
    diff = [name for name in ARTIFACTS if (a / name).read_bytes() != (b / name).read_bytes()]
    ok = report(12, not diff, f"{len(ARTIFACTS)} artifacts from simulate/prepare/train/downscale/evaluate compared, differing: {diff or 'none'}")
    assert ok
