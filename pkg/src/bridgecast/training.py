"""Preprocessing, denoising score-matching loss and the training loop."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .fields import Field
from .sde import T_END, NoiseSchedule


class ConstantComponentError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, history):
        super().__init__(f"training diverged after {len(history)} steps")
        self.history = history


def _to_unit(v, lo, hi):
    return 2.0 * (v - lo) / (hi - lo) - 1.0


def _from_unit(u, lo, hi):
    return (u + 1.0) * (hi - lo) / 2.0 + lo


@dataclass
class Preprocessor:
    """Per-channel affine scaling of spatial means and deviations into [-1, 1].

    Noised channels are split into the per-sample spatial mean and the
    deviation from it; each component gets its own min/max map and the two
    results are summed. Context channels get a plain pixel min/max map.
    """

    context_channels: tuple[str, ...] = ("context",)
    mean_range: dict = field(default_factory=dict)
    dev_range: dict = field(default_factory=dict)
    plain_range: dict = field(default_factory=dict)

    @property
    def fitted(self) -> bool:
        return bool(self.mean_range or self.plain_range)

    def fit(self, f: Field) -> Preprocessor:
        self.mean_range, self.dev_range, self.plain_range = {}, {}, {}
        for c in f.channels:
            x = f.channel(c)
            if c in self.context_channels:
                lo, hi = float(x.min()), float(x.max())
                if not hi > lo:
                    raise ConstantComponentError(f"channel {c!r} is constant")
                self.plain_range[c] = (lo, hi)
                continue
            m = x.mean(axis=(1, 2))
            d = x - m[:, None, None]
            for name, v, store in (("mean", m, self.mean_range), ("deviation", d, self.dev_range)):
                lo, hi = float(v.min()), float(v.max())
                if not hi > lo:
                    raise ConstantComponentError(f"{name} component of channel {c!r} is constant")
                store[c] = (lo, hi)
        return self

    def _check(self, f: Field):
        if not self.fitted:
            raise RuntimeError("preprocessor is not fitted")
        known = set(self.mean_range) | set(self.plain_range)
        missing = [c for c in f.channels if c not in known]
        if missing:
            raise KeyError(f"preprocessor has no ranges for {missing}")

    def transform(self, f: Field) -> Field:
        self._check(f)
        out = np.empty_like(f.data)
        for i, c in enumerate(f.channels):
            x = f.data[..., i]
            if c in self.plain_range:
                out[..., i] = _to_unit(x, *self.plain_range[c])
                continue
            m = x.mean(axis=(1, 2))[:, None, None]
            out[..., i] = _to_unit(x - m, *self.dev_range[c]) + _to_unit(m, *self.mean_range[c])
        return Field(out, f.channels)

    def inverse(self, f: Field) -> Field:
        self._check(f)
        out = np.empty_like(f.data)
        for i, c in enumerate(f.channels):
            y = f.data[..., i]
            if c in self.plain_range:
                out[..., i] = _from_unit(y, *self.plain_range[c])
                continue
            lo, hi = self.dev_range[c]
            ym = y.mean(axis=(1, 2))[:, None, None]
            d = (y - ym) * (hi - lo) / 2.0
            # the deviation map contributes a constant offset to the mean
            m = _from_unit(ym - _to_unit(0.0, lo, hi), *self.mean_range[c])
            out[..., i] = d + m
        return Field(out, f.channels)

    def to_dict(self) -> dict:
        return {
            "context_channels": list(self.context_channels),
            "mean_range": {k: list(v) for k, v in self.mean_range.items()},
            "dev_range": {k: list(v) for k, v in self.dev_range.items()},
            "plain_range": {k: list(v) for k, v in self.plain_range.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> Preprocessor:
        return cls(
            tuple(d["context_channels"]),
            {k: tuple(v) for k, v in d["mean_range"].items()},
            {k: tuple(v) for k, v in d["dev_range"].items()},
            {k: tuple(v) for k, v in d["plain_range"].items()},
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))

    @classmethod
    def load(cls, path) -> Preprocessor:
        return cls.from_dict(json.loads(Path(path).read_text()))


def preprocess(f: Field, prep: Preprocessor, fit: bool = False) -> Field:
    if fit:
        prep.fit(f)
    return prep.transform(f)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 1.0
    warmup_steps: int = 5000
    batch_size: int = 4
    epochs: int = 125
    dropout: float = 0.5
    rng_seed: int = 0
    val_fraction: float = 0.1
    max_steps: int = 0
    t_end: float = T_END
    divergence_loss: float = 1e4
    divergence_patience: int = 100

    def __post_init__(self):
        for name in ("learning_rate", "adam_eps", "grad_clip_norm", "batch_size", "epochs"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ValueError("Adam betas must be in (0, 1)")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if not 0 <= self.dropout < 1 or not 0 <= self.val_fraction < 1:
            raise ValueError("dropout and val_fraction must be in [0, 1)")

    def lr_at(self, step: int) -> float:
        """Learning rate for 1-based ``step``: linear warmup then constant."""
        if step >= self.warmup_steps:
            return self.learning_rate
        return self.learning_rate * step / self.warmup_steps


@dataclass(frozen=True)
class LossReport:
    total: float
    mean_component: float
    fluctuation_component: float


def _loss_terms(f: torch.Tensor, eps: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    err = f - eps
    total = (err**2).mean()
    err_bar = err.mean(dim=(-2, -1), keepdim=True)
    mean_part = (err_bar**2).mean()
    fluct_part = ((err - err_bar) ** 2).mean()
    return total, mean_part, fluct_part


def dsm_terms(
    model: Callable,
    x0: torch.Tensor,
    noised: list[int],
    sched: NoiseSchedule,
    gen: torch.Generator,
    t_end: float = T_END,
    t: torch.Tensor | None = None,
):
    """Differentiable DSM loss and its mean/fluctuation split.

    ``x0`` is ``(B, C, N, N)`` with noised channel indices ``noised``;
    ``model(x_t, t)`` returns ``f_theta`` for those channels. With the
    ``sigma(t)`` weighting the loss reduces to ``mean (f_theta - eps)^2``.
    """
    b = x0.shape[0]
    if t is None:
        # t ~ U(t_end, 1]
        t = 1.0 - (1.0 - t_end) * torch.rand(b, generator=gen, dtype=x0.dtype)
    sigma = torch.as_tensor(sched.sigma(t.detach().cpu().numpy()), dtype=x0.dtype).reshape(b, 1, 1, 1)
    eps = torch.randn(x0[:, noised].shape, generator=gen, dtype=x0.dtype)
    xt = x0.clone()
    xt[:, noised] = x0[:, noised] + sigma * eps
    return _loss_terms(model(xt, t), eps)


def dsm_loss(model: Callable, batch: Field, noised_channels, sched: NoiseSchedule, seed: int = 0, t_end: float = T_END) -> LossReport:
    """Evaluate the DSM loss on a numpy :class:`Field` batch (no gradients)."""
    noised = [batch.channel_index(c) for c in noised_channels]
    dtype = next(model.parameters()).dtype if isinstance(model, torch.nn.Module) else torch.float64
    x0 = torch.as_tensor(np.moveaxis(batch.data, -1, 1).copy(), dtype=dtype)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        total, m, fl = dsm_terms(model, x0, noised, sched, gen, t_end)
    if not torch.isfinite(total):
        raise FloatingPointError("non-finite loss")
    return LossReport(float(total), float(m), float(fl))


@dataclass
class TrainResult:
    history: list[dict]
    val_history: list[dict]
    best_state: dict
    best_val: float
    steps: int


def _net_model(net):
    def model(x, t):
        return net(x, t)

    return model


def split_train_val(f: Field, val_fraction: float, seed: int) -> tuple[Field, Field | None]:
    n_val = int(round(val_fraction * f.n_samples))
    if n_val == 0:
        return f, None
    perm = np.random.default_rng(seed).permutation(f.n_samples)
    return f.samples(np.sort(perm[n_val:])), f.samples(np.sort(perm[:n_val]))


def evaluate_loss(net, f: Field, noised: list[int], sched: NoiseSchedule, seed: int, batch_size: int = 64, t_end: float = T_END) -> float:
    """Validation loss with a fixed noise stream, dropout off."""
    was_training = net.training
    net.eval()
    gen = torch.Generator().manual_seed(seed)
    dtype = next(net.parameters()).dtype
    x = torch.as_tensor(np.moveaxis(f.data, -1, 1).copy(), dtype=dtype)
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            xb = x[i : i + batch_size]
            loss, _, _ = dsm_terms(_net_model(net), xb, noised, sched, gen, t_end)
            total += float(loss) * xb.shape[0]
            count += xb.shape[0]
    net.train(was_training)
    return total / count


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.lr_at(1), betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)


def apply_update(opt: torch.optim.Adam, cfg: TrainConfig, step: int) -> tuple[float, float]:
    """Set the warmup rate, clip the gradients in place, and take one Adam step.

    Returns the global gradient norm before and after clipping.
    """
    params = [p for g in opt.param_groups for p in g["params"] if p.grad is not None]
    for group in opt.param_groups:
        group["lr"] = cfg.lr_at(step)
    grad_norm = float(torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip_norm))
    clipped = float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(p.grad) for p in params])))
    opt.step()
    return grad_norm, clipped


def train(
    net,
    dataset: Field,
    cfg: TrainConfig,
    sched: NoiseSchedule,
    on_epoch: Callable | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Adam with linear warmup and global-norm clipping.

    ``dataset`` must already be preprocessed and laid out as
    ``net.cfg.channels``. A ``val_fraction`` share is held out; the state
    with the lowest validation loss (checked every epoch) is kept.
    ``on_epoch(epoch, net, result)`` runs after every epoch, e.g. to write a
    checkpoint.
    """
    torch.manual_seed(cfg.rng_seed)
    gen = torch.Generator().manual_seed(cfg.rng_seed)
    channels = net.cfg.channels
    dataset = dataset.select(channels)
    noised = [channels.index(c) for c in channels if c not in net.cfg.context_channels]
    train_set, val_set = split_train_val(dataset, cfg.val_fraction, cfg.rng_seed)
    dtype = next(net.parameters()).dtype
    x_all = torch.as_tensor(np.moveaxis(train_set.data, -1, 1).copy(), dtype=dtype)
    for m in net.modules():
        if isinstance(m, torch.nn.Dropout):
            m.p = cfg.dropout
    opt = make_optimizer(net.parameters(), cfg)
    history: list[dict] = []
    val_history: list[dict] = []
    best_val, best_state = math.inf, {k: v.clone() for k, v in net.state_dict().items()}
    step, bad = 0, 0
    model = _net_model(net)
    n = x_all.shape[0]
    done = False
    for epoch in range(cfg.epochs):
        net.train()
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            step += 1
            xb = x_all[perm[i : i + cfg.batch_size]]
            total, mean_part, fluct_part = dsm_terms(model, xb, noised, sched, gen, cfg.t_end)
            opt.zero_grad(set_to_none=True)
            total.backward()
            grad_norm, clipped_norm = apply_update(opt, cfg, step)
            row = {
                "step": step,
                "lr": cfg.lr_at(step),
                "total": float(total.detach()),
                "mean_component": float(mean_part.detach()),
                "fluct_component": float(fluct_part.detach()),
                "grad_norm": grad_norm,
                "clipped_norm": clipped_norm,
            }
            history.append(row)
            if log_every and step % log_every == 0:
                print(f"step {step} lr {lr:.2e} loss {row['total']:.4f}", flush=True)
            if not math.isfinite(row["total"]) or row["total"] > cfg.divergence_loss:
                bad += 1
                if bad >= cfg.divergence_patience or not math.isfinite(row["total"]):
                    raise TrainingDiverged(history)
            else:
                bad = 0
            if cfg.max_steps and step >= cfg.max_steps:
                done = True
                break
        if val_set is not None:
            val = evaluate_loss(net, val_set, noised, sched, cfg.rng_seed + 1, t_end=cfg.t_end)
        else:
            val = history[-1]["total"] if history else math.inf
        val_history.append({"epoch": epoch + 1, "step": step, "val_loss": val})
        if val < best_val:
            best_val = val
            best_state = {k: v.clone() for k, v in net.state_dict().items()}
        result = TrainResult(history, val_history, best_state, best_val, step)
        if on_epoch is not None:
            on_epoch(epoch + 1, net, result)
        if done:
            break
    net.eval()
    return TrainResult(history, val_history, best_state, best_val, step)


def write_loss_csv(history: list[dict], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr", "total", "mean_component", "fluct_component"])
        for r in history:
            w.writerow([r["step"], repr(r["lr"]), repr(r["total"]), repr(r["mean_component"]), repr(r["fluct_component"])])


def adam_reference(grad_fn: Callable[[float], float], x0: float, cfg: TrainConfig, n_steps: int) -> list[float]:
    """Scalar Adam with the same warmup and clipping, for cross-checking."""
    x, m, v = x0, 0.0, 0.0
    out = []
    for s in range(1, n_steps + 1):
        gr = grad_fn(x)
        # same clip coefficient as torch's clip_grad_norm_
        gr = gr * min(1.0, cfg.grad_clip_norm / (abs(gr) + 1e-6))
        m = cfg.beta1 * m + (1 - cfg.beta1) * gr
        v = cfg.beta2 * v + (1 - cfg.beta2) * gr * gr
        mh = m / (1 - cfg.beta1**s)
        vh = v / (1 - cfg.beta2**s)
        x = x - cfg.lr_at(s) * mh / (math.sqrt(vh) + cfg.adam_eps)
        out.append(x)
    return out
