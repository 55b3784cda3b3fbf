"""``bridgecast`` command line: simulate, prepare, train, downscale, evaluate.

Exit codes: 0 ok, 1 runtime failure, 2 usage or config error,
3 missing input file or checkpoint, 4 shape or channel mismatch.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, PipelineConfig, load_config
from .fields import Field, SnapshotFormatError, SnapshotSet, read_snapshot_set, write_snapshot_set

log = logging.getLogger("bridgecast")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_MISSING, EXIT_MISMATCH = 0, 1, 2, 3, 4
NOISED = ("vorticity", "supersaturation")
CACHE_NAME = "bridge.cache"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _threads():
    n = os.environ.get("BRIDGECAST_THREADS")
    if not n:
        return
    try:
        n = int(n)
    except ValueError:
        raise CliError(f"BRIDGECAST_THREADS must be an integer, got {n!r}", EXIT_USAGE) from None
    import torch

    torch.set_num_threads(max(1, n))


def file_digest(path) -> str:
    h = hashlib.blake2b(digest_size=8)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read(path) -> SnapshotSet:
    if not Path(path).exists():
        raise CliError(f"missing input {path}", EXIT_MISSING)
    try:
        return read_snapshot_set(path)
    except SnapshotFormatError as e:
        raise CliError(f"{path}: {e}", EXIT_RUNTIME) from None


def _check_out(path, force: bool):
    if Path(path).exists() and not force:
        raise CliError(f"{path} exists (use --force)", EXIT_USAGE)


def _write_manifest(out: Path, command: str, cfg: PipelineConfig, seed: int, inputs: dict, extra: dict | None = None):
    import scipy
    import torch

    manifest = {
        "command": command,
        "config_digest": cfg.digest(),
        "config": cfg.to_text(),
        "seed": seed,
        "inputs": inputs,
        "versions": {
            "bridgecast": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "torch": torch.__version__,
        },
    }
    if extra:
        manifest.update(extra)
    Path(str(out) + ".manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def cmd_simulate(args, cfg: PipelineConfig) -> int:
    from .fluid_sim import SUBSETS, SimulationBlowUp, run_simulation, subset_params

    if args.subset not in SUBSETS:
        raise CliError(f"unknown subset {args.subset!r}; choose from {', '.join(SUBSETS)}", EXIT_USAGE)
    _check_out(args.out, args.force)
    try:
        params = subset_params(args.subset, cfg.sim.scale, rng_seed=args.seed, **cfg.sim.overrides())
    except (ValueError, TypeError) as e:
        raise CliError(f"bad simulation parameters: {e}", EXIT_USAGE) from None
    try:
        s = run_simulation(params, cfg.sim.snapshot_stride, subset_name=args.subset, progress_every=1000)
    except SimulationBlowUp as e:
        raise CliError(str(e), EXIT_RUNTIME) from None
    write_snapshot_set(s, args.out, force=args.force)
    _write_manifest(Path(args.out), "simulate", cfg, args.seed, {}, {"subset": args.subset, "sim_params_digest": params.digest()})
    print(f"wrote {len(s)} snapshots ({s.n_grid}x{s.n_grid}) to {args.out}")
    return EXIT_OK


def cmd_prepare(args, cfg: PipelineConfig) -> int:
    from .spectral import upsample_lowres

    src = _read(args.input)
    factor = args.factor
    if args.target:
        tgt = _read(args.target)
        if tgt.n_grid % src.n_grid:
            raise CliError("target grid is not a multiple of the source grid", EXIT_MISMATCH)
        factor = tgt.n_grid // src.n_grid
    if factor is None:
        raise CliError("pass --factor or --target", EXIT_USAGE)
    _check_out(args.out, args.force)
    try:
        up = upsample_lowres(src.field, factor)
    except ValueError as e:
        raise CliError(str(e), EXIT_USAGE) from None
    extra = dict(src.extra)
    extra["upsample_factor"] = factor
    out = src.with_field(up, extra=extra)
    write_snapshot_set(out, args.out, force=args.force)
    _write_manifest(Path(args.out), "prepare", cfg, args.seed, {"in": file_digest(args.input)}, {"factor": factor})
    print(f"wrote {len(out)} upsampled snapshots ({out.n_grid}x{out.n_grid}) to {args.out}")
    return EXIT_OK


def _model_channels(f: Field) -> tuple[tuple[str, ...], tuple[str, ...]]:
    noised = tuple(c for c in NOISED if c in f.channels)
    if not noised:
        noised = tuple(c for c in f.channels if c != "context")
    ctx = ("context",) if "context" in f.channels else ()
    return noised + ctx, ctx


def cmd_train(args, cfg: PipelineConfig) -> int:
    import torch

    from .score import UNet, UNetConfig, save_checkpoint
    from .sde import NoiseSchedule
    from .training import ConstantComponentError, Preprocessor, TrainingDiverged, train, write_loss_csv

    s = _read(args.input)
    _check_out(args.out, args.force)
    torch.manual_seed(args.seed)
    torch.use_deterministic_algorithms(True)
    channels, ctx = _model_channels(s.field)
    t = cfg.train
    try:
        ucfg = UNetConfig(
            channels=channels,
            context_channels=ctx,
            base_width=t.base_width,
            n_res_blocks=t.n_res_blocks,
            embed_dim=t.embed_dim,
            fourier_scale=t.fourier_scale,
            bypass_width=t.bypass_width,
            dropout=t.dropout,
            padding_mode=t.padding_mode,
        )
        tcfg = t.train_config(args.seed)
        sched = NoiseSchedule(cfg.schedule.sigma_min, cfg.schedule.sigma_max)
    except ValueError as e:
        raise CliError(f"bad training config: {e}", EXIT_USAGE) from None
    net = UNet(ucfg)
    try:
        net.check_grid(s.n_grid)
    except ValueError as e:
        raise CliError(str(e), EXIT_MISMATCH) from None
    prep = Preprocessor(ctx)
    try:
        data = prep.fit(s.field.select(channels)).transform(s.field.select(channels))
    except ConstantComponentError as e:
        raise CliError(str(e), EXIT_RUNTIME) from None
    extra = {"preprocessor": prep.to_dict(), "source_digest": file_digest(args.input), "subset": s.subset_name}
    extra["sim_params"] = s.extra.get("sim_params", {})

    def on_epoch(epoch, net_, result):
        # keep the best-so-far weights on disk after every epoch
        live = {k: v.clone() for k, v in net_.state_dict().items()}
        net_.load_state_dict(result.best_state)
        save_checkpoint(net_, sched, args.out, {**extra, "epoch": epoch, "best_val": result.best_val})
        net_.load_state_dict(live)

    try:
        result = train(net, data, tcfg, sched, on_epoch=on_epoch)
    except TrainingDiverged as e:
        write_loss_csv(e.history, str(args.out) + ".loss.csv")
        raise CliError(str(e), EXIT_RUNTIME) from None
    net.load_state_dict(result.best_state)
    save_checkpoint(net, sched, args.out, {**extra, "epoch": len(result.val_history), "best_val": result.best_val})
    write_loss_csv(result.history, str(args.out) + ".loss.csv")
    _write_manifest(Path(args.out), "train", cfg, args.seed, {"in": extra["source_digest"]}, {"steps": result.steps})
    print(f"trained {result.steps} steps, best validation loss {result.best_val:.5f}; wrote {args.out}")
    return EXIT_OK


def _load_model(path):
    from .score import load_score
    from .training import Preprocessor

    if not Path(path).exists():
        raise CliError(f"missing checkpoint {path}", EXIT_MISSING)
    try:
        score, extra = load_score(path)
    except (SnapshotFormatError, KeyError, ValueError) as e:
        raise CliError(f"{path}: {e}", EXIT_RUNTIME) from None
    return score, Preprocessor.from_dict(extra["preprocessor"]), extra


def _read_cache(path: Path) -> dict:
    if path.exists():
        return json.loads(path.read_text())
    return {}


def bridge_parameters(src: Field, tgt: Field, noised, sched, n_grid: int, rtol: float) -> dict:
    """k*, PSD* per channel and the shared t* (mean of per-channel values)."""
    from .sde import t_star_from_psd
    from .spectral import azimuthal_psd, find_k_star

    ps, pt = azimuthal_psd(src, noised), azimuthal_psd(tgt, noised)
    per = {}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        for c in noised:
            ks = find_k_star(ps, pt, c, rtol=rtol)
            per[c] = {
                "k_star": ks.k_star,
                "psd_star": ks.psd_star,
                "crossed": ks.crossed,
                "t_star": t_star_from_psd(sched, ks.psd_star, n_grid),
            }
    for w in caught:
        log.warning("%s", w.message)
    t_star = float(np.mean([v["t_star"] for v in per.values()]))
    k_star = int(min(v["k_star"] for v in per.values()))
    return {"channels": per, "t_star": t_star, "k_star": k_star}


def cmd_downscale(args, cfg: PipelineConfig) -> int:
    from .sde import BridgeConfig, downscale

    score, prep, extra = _load_model(args.model)
    src = _read(args.input)
    tgt = _read(args.target)
    _check_out(args.out, args.force)
    if src.n_grid != tgt.n_grid:
        raise CliError(f"source grid {src.n_grid} != target grid {tgt.n_grid}; run prepare first", EXIT_MISMATCH)
    noised = score.noised_channels
    missing = [c for c in noised if c not in src.channels]
    if missing:
        raise CliError(f"source lacks channels {missing}", EXIT_MISMATCH)
    try:
        score.net.check_grid(src.n_grid)
    except ValueError as e:
        raise CliError(str(e), EXIT_MISMATCH) from None
    sched = score.schedule
    src_n = prep.transform(src.field.select(score.channels) if set(score.channels) <= set(src.channels) else src.field.select(noised))
    tgt_n = prep.transform(tgt.field.select(score.channels))

    cache_path = Path(args.out).parent / CACHE_NAME
    cache = _read_cache(cache_path)
    key = f"{file_digest(args.input)}:{file_digest(args.target)}:{sched.sigma_min}:{sched.sigma_max}"
    if key not in cache:
        cache[key] = bridge_parameters(src_n, tgt_n, noised, sched, src.n_grid, cfg.bridge.k_star_rtol)
        cache_path.write_text(json.dumps(cache, sort_keys=True, indent=1) + "\n")
    params = dict(cache[key])
    t_star = params["t_star"]
    if cfg.bridge.t_star > 0:
        t_star = cfg.bridge.t_star
    if args.t_star is not None:
        t_star = args.t_star
    try:
        bcfg = BridgeConfig(sched, t_star, params["k_star"], cfg.bridge.n_steps or None, cfg.bridge.t_end)
    except ValueError as e:
        raise CliError(str(e), EXIT_USAGE) from None

    n = src.field.n_samples if not cfg.bridge.n_samples else min(cfg.bridge.n_samples, src.field.n_samples)
    if args.n_samples:
        n = min(args.n_samples, src.field.n_samples)
    ctx = tgt_n.samples(slice(0, 1)).select(score.context_channels) if score.context_channels else None
    rng = np.random.default_rng(args.seed)
    outs = []
    for i in range(0, n, cfg.bridge.batch_size):
        batch = src_n.samples(slice(i, min(n, i + cfg.bridge.batch_size)))
        outs.append(downscale(batch, ctx, score, bcfg, rng).data)
    out_n = Field(np.concatenate(outs), score.channels)
    out = prep.inverse(out_n)
    out_extra = {
        "bridge": {"t_star": t_star, "k_star": params["k_star"], "n_steps": bcfg.steps},
        "sim_params": tgt.extra.get("sim_params", {}),
        "source_sim_params": src.extra.get("sim_params", {}),
    }
    result = SnapshotSet(out, subset_name=f"downscaled:{src.subset_name}", sim_params_digest=tgt.sim_params_digest, extra=out_extra)
    write_snapshot_set(result, args.out, force=args.force)
    _write_manifest(
        Path(args.out),
        "downscale",
        cfg,
        args.seed,
        {"in": file_digest(args.input), "target": file_digest(args.target), "model": file_digest(args.model)},
        {"bridge": out_extra["bridge"]},
    )
    print(f"downscaled {n} samples with t*={t_star:.4f} (k*={params['k_star']}, {bcfg.steps} steps) to {args.out}")
    return EXIT_OK


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    from . import evaluation as ev

    sets = {"in": _read(args.input)}
    if args.ref:
        sets["ref"] = _read(args.ref)
    if args.source:
        sets["source"] = _read(args.source)
    sizes = {s.n_grid for s in sets.values()}
    if len(sizes) != 1:
        raise CliError(f"grid sizes differ: {sorted(sizes)}", EXIT_MISMATCH)
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise CliError(f"{out} exists and is not a directory", EXIT_USAGE)
    out.mkdir(parents=True, exist_ok=True)
    metrics = ["psd", "kde", "condensation", "l2"] if args.metric == "all" else [args.metric]
    e = cfg.eval
    summary: dict = {}
    for metric in metrics:
        if metric == "psd":
            bands = ev.compare_psd({k: v.field for k, v in sets.items()}, out, n_boot=e.psd_boot, seed=args.seed)
            summary["psd"] = {k: f"psd_{k}.csv" for k in bands}
        elif metric == "kde":
            for c in [c for c in sets["in"].channels if c != "context"]:
                curves = {}
                for k, s in sets.items():
                    if c not in s.channels:
                        continue
                    curves[k] = ev.kde_pdf(s.field.channel(c), n_boot=e.n_boot, ci=e.ci, seed=args.seed)
                    ev.write_kde_csv(curves[k], out / f"kde_{c}_{k}.csv")
                    m = ev.kde_pdf(s.field.channel(c).mean(axis=(1, 2)), n_boot=e.n_boot, ci=e.ci, seed=args.seed) if len(s) >= 30 else None
                    if m is not None:
                        ev.write_kde_csv(m, out / f"kde_mean_{c}_{k}.csv")
                ev.plot_kde(curves, out / f"kde_{c}.png", xlabel=c, log=True)
            summary["kde"] = True
        elif metric == "condensation":
            rates = {k: ev.set_condensation_rates(s) for k, s in sets.items() if "supersaturation" in s.channels}
            marker_key = "ref" if "ref" in rates else "in"
            marker = float(np.percentile(rates[marker_key], 90))
            lo = min(float(r.min()) for r in rates.values())
            hi = max(float(r.max()) for r in rates.values())
            grid = np.linspace(lo, hi, 512)
            curves = {}
            for k, r in rates.items():
                curves[k] = ev.kde_pdf(r, n_boot=e.n_boot, ci=e.ci, grid=grid, seed=args.seed)
                ev.write_kde_csv(curves[k], out / f"condensation_{k}.csv")
            ev.plot_kde(curves, out / "condensation.png", xlabel="condensation rate", log=True, marker=marker)
            summary["condensation"] = {
                "p90_marker": marker,
                "density_at_marker": {k: float(c.at(marker)) for k, c in curves.items()},
            }
        elif metric == "l2":
            if "source" not in sets:
                raise CliError("--metric l2 needs --source", EXIT_USAGE)
            k_star = e.k_star or sets["in"].extra.get("bridge", {}).get("k_star", 0)
            if not k_star:
                raise CliError("no k* available; set [eval] k_star", EXIT_USAGE)
            shared = [c for c in sets["in"].channels if c in sets["source"].channels and c != "context"]
            stats_ref = ev.domain_stats(sets["ref"].field.select(shared)) if "ref" in sets else None
            n = len(sets["in"])
            if len(sets["source"]) < n:
                raise CliError("source has fewer samples than the outputs", EXIT_MISMATCH)
            # downscale keeps source order, so output i pairs with source i
            src = sets["source"].field.samples(slice(0, n)).select(shared)
            stats_src = ev.domain_stats(sets["source"].field.select(shared))
            rep = ev.l2_report(sets["in"].field.select(shared), src, k_star, stats_ref, stats_src, seed=args.seed)
            ev.write_l2_csv(rep, out / "l2.csv")
            summary["l2"] = {
                c: {
                    "median_paired": float(np.median(rep.paired[:, i])),
                    "median_random": float(np.median(rep.random[:, i])),
                }
                for i, c in enumerate(rep.channels)
            }
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    _write_manifest(out / "evaluate", "evaluate", cfg, args.seed, {k: file_digest(getattr(args, "input" if k == "in" else k)) for k in sets})
    print(f"wrote {', '.join(metrics)} results to {out}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message, EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, default=None, help="RNG seed (u64); overrides [run] seed")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="bridgecast", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="run the fluid model for one subset")
    s.add_argument("--subset", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("prepare", parents=[common], help="upsample and filter a low-res set")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--factor", type=int)
    g.add_argument("--target", help="infer the factor from this set's grid")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", parents=[common], help="train the target-domain score model")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("downscale", parents=[common], help="bridge upsampled sources into the target domain")
    s.add_argument("--in", dest="input", required=True, help="prepared (upsampled) source set")
    s.add_argument("--target", required=True, help="target-domain set (spectra and context)")
    s.add_argument("--model", required=True, help="checkpoint from train")
    s.add_argument("--out", required=True)
    s.add_argument("--t-star", type=float, default=None, help="override the spectral t*")
    s.add_argument("--n-samples", type=int, default=0)
    s.set_defaults(func=cmd_downscale)

    s = sub.add_parser("evaluate", parents=[common], help="compute metrics and plots")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--ref", help="reference (e.g. high-res) set")
    s.add_argument("--source", help="source set for the paired L2 check")
    s.add_argument("--metric", choices=["psd", "kde", "condensation", "l2", "all"], default="psd")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        cfg = load_config(args.config)
        if args.seed is None:
            args.seed = cfg.run.seed
        if args.seed < 0 or args.seed >= 2**64:
            raise CliError("--seed must be an unsigned 64-bit integer", EXIT_USAGE)
        cfg.run.seed = args.seed
        _threads()
        return args.func(args, cfg)
    except CliError as e:
        print(f"bridgecast: error: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"bridgecast: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeError, ValueError, OSError) as e:
        print(f"bridgecast: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
