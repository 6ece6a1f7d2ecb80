"""Training and evaluation: MSE loss on normalized targets, Adam updates,
deterministic seeded epochs, RMSE/MAPE/APE on denormalized predictions, the
historical-average baseline, and the multi-seed replica protocol.

Metric definitions (flows denormalized first):
  RMSE  = sqrt( mean over (sample, region) of [(di)^2 + (do)^2] )
  ratio = |di + do| / max(true_in + true_out, 1)    per (sample, region)
  MAPE  = 100 * mean over (sample, region) of ratio
  APE   = 100 * (sum over all (sample, region) of ratio) / n_samples
where di/do are inflow/outflow errors. APE therefore equals
MAPE * N*M / 100, the per-slice region sum averaged over the test set.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import FlowDataset, Normalizer, stack_batch
from .model import Model, ModelConfig, build
from .tensor import Rng, Tensor, tape


class NumericalError(ArithmeticError):
    """Loss became NaN/inf during training."""


@dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-4
    epochs: int = 150
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    seeds: tuple = tuple(range(10))

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs "
                             "batch statistics)")
        if self.epochs < 1 or self.learning_rate < 0:
            raise ValueError("epochs must be >= 1 and learning_rate >= 0")


class Adam:
    """Adaptive-moment updates over a model's trainable tensors."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = [t for _, t in params] if params and isinstance(
            params[0], tuple) else list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            p.data = p.data - (self.lr * mhat
                               / (np.sqrt(vhat) + self.eps)).astype(p.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = T.sub(pred, np.asarray(target, dtype=pred.dtype))
    return T.tmean(T.mul(diff, diff))


def train(model: Model, samples, cfg: TrainConfig, log=None) -> list:
    """Minimize MSE between predictions and normalized targets.

    Epoch shuffling comes from the replica seed, so two runs with the same
    seed and config produce identical loss curves. Returns the per-epoch mean
    training loss. NaN loss aborts with epoch/batch diagnostics.
    """
    order_rng = Rng(cfg.seed).child(1000)
    opt = Adam(model.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2,
               cfg.epsilon)
    losses = []
    last_max_grad = 0.0
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(len(samples))
        epoch_loss = 0.0
        batches = 0
        for start in range(0, len(samples), cfg.batch_size):
            batch = [samples[i] for i in perm[start:start + cfg.batch_size]]
            if len(batch) < 2:
                continue    # batch norm needs at least two samples
            x, e, y = stack_batch(batch)
            opt.zero_grad()
            with tape() as tp:
                pred = model.forward(x, e, train=True)
                loss = mse_loss(pred, y)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError(
                        f"non-finite loss {value} at epoch {epoch}, batch "
                        f"{batches}; max |grad| of previous step "
                        f"{last_max_grad:.3e}")
                tp.backward(loss)
            last_max_grad = max(
                (float(np.abs(p.grad).max()) for p in opt.params
                 if p.grad is not None), default=0.0)
            opt.step()
            epoch_loss += value
            batches += 1
        if batches == 0:
            raise ValueError("no trainable batches (need >= 2 samples)")
        losses.append(epoch_loss / batches)
        if log is not None:
            log(epoch, losses[-1])
    return losses


# ---------------------------------------------------------------------------
# metrics

def rmse(pred: np.ndarray, true: np.ndarray) -> float:
    """Root of the mean (over samples and regions) of the summed squared
    inflow and outflow errors."""
    pred, true = np.asarray(pred, np.float64), np.asarray(true, np.float64)
    if pred.shape != true.shape:
        raise ValueError(f"rmse: shapes differ {pred.shape} vs {true.shape}")
    sq = (pred[..., 0] - true[..., 0]) ** 2 + (pred[..., 1] - true[..., 1]) ** 2
    return float(np.sqrt(sq.mean()))


def _ratios(pred, true):
    pred, true = np.asarray(pred, np.float64), np.asarray(true, np.float64)
    if pred.shape != true.shape:
        raise ValueError(f"shapes differ {pred.shape} vs {true.shape}")
    num = np.abs((pred[..., 0] - true[..., 0]) + (pred[..., 1] - true[..., 1]))
    den = np.maximum(true[..., 0] + true[..., 1], 1.0)
    return num / den


def mape(pred, true) -> float:
    """100 x mean absolute total-flow error over clamped true total flow."""
    return float(100.0 * _ratios(pred, true).mean())


def ape(pred, true) -> float:
    """100 x per-slice region sum of the MAPE ratios, averaged over slices
    when given a batch (equals MAPE * n_regions / 100)."""
    r = _ratios(pred, true)
    n_samples = r.shape[0] if r.ndim == 3 else 1
    return float(100.0 * r.sum() / n_samples)


def predict_batches(model: Model, samples, batch_size: int = 64) -> np.ndarray:
    """Eval-mode forward over a sample list -> (S, N, M, 2) normalized."""
    outs = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        x, e, _ = stack_batch(chunk)
        outs.append(model.forward(x, e, train=False).data)
    return np.concatenate(outs, axis=0)


def evaluate(model: Model, samples, nrm: Normalizer,
             batch_size: int = 64) -> dict:
    """RMSE/MAPE/APE of denormalized predictions against denormalized
    targets. Side-effect free: repeated calls return identical numbers."""
    if not samples:
        raise ValueError("evaluate: empty sample list")
    pred = nrm.denormalize(predict_batches(model, samples, batch_size))
    true = nrm.denormalize(np.stack([s.target for s in samples]))
    return {"rmse": rmse(pred, true), "mape": mape(pred, true),
            "ape": ape(pred, true)}


# ---------------------------------------------------------------------------
# historical average baseline

def ha_predictions(ds: FlowDataset, boundary: int,
                   indices) -> np.ndarray:
    """Mean of training frames sharing (weekday, time-of-day); regions with
    an unseen key fall back to the global training mean."""
    keys = {}
    for t in range(boundary):
        ts = ds.timestamp(t)
        keys.setdefault((ts.weekday(), ts.hour, ts.minute), []).append(t)
    global_mean = ds.flows[:boundary].mean(axis=0)
    means = {k: ds.flows[v].mean(axis=0) for k, v in keys.items()}
    out = np.empty((len(indices), *ds.flows.shape[1:]), dtype=np.float64)
    for i, t in enumerate(indices):
        ts = ds.timestamp(int(t))
        out[i] = means.get((ts.weekday(), ts.hour, ts.minute), global_mean)
    return out


def ha_baseline(ds: FlowDataset, split) -> dict:
    """Historical-average metrics on the chronological test split."""
    from .data import resolve_boundary
    boundary = resolve_boundary(ds, split)
    test_idx = list(range(boundary, ds.T))
    if not test_idx:
        raise ValueError("ha_baseline: empty test split")
    pred = ha_predictions(ds, boundary, test_idx)       # (S, 2, N, M)
    true = ds.flows[boundary:].astype(np.float64)
    pred_nhwc = pred.transpose(0, 2, 3, 1)
    true_nhwc = true.transpose(0, 2, 3, 1)
    return {"rmse": rmse(pred_nhwc, true_nhwc),
            "mape": mape(pred_nhwc, true_nhwc),
            "ape": ape(pred_nhwc, true_nhwc)}


# ---------------------------------------------------------------------------
# replica protocol

@dataclass
class MetricsReport:
    """Per-replica metric rows plus mean and (sample) standard deviation."""

    rows: list = field(default_factory=list)   # (seed, {"rmse":..,..})

    def _column(self, key):
        return np.array([row[1][key] for row in self.rows], dtype=np.float64)

    def mean(self, key) -> float:
        return float(self._column(key).mean())

    def std(self, key) -> float:
        col = self._column(key)
        return float(col.std(ddof=1)) if len(col) > 1 else 0.0

    def summary(self) -> dict:
        return {k: (self.mean(k), self.std(k)) for k in ("rmse", "mape", "ape")}

    def to_csv(self) -> str:
        lines = ["seed,rmse,mape,ape"]
        for seed, m in self.rows:
            lines.append(f"{seed},{m['rmse']:.6f},{m['mape']:.6f},"
                         f"{m['ape']:.6f}")
        lines.append(f"mean,{self.mean('rmse'):.6f},{self.mean('mape'):.6f},"
                     f"{self.mean('ape'):.6f}")
        lines.append(f"std,{self.std('rmse'):.6f},{self.std('mape'):.6f},"
                     f"{self.std('ape'):.6f}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        parts = [f"{k.upper()} {format_pm(self.mean(k), self.std(k))}"
                 for k in ("rmse", "mape", "ape")]
        return "  ".join(parts)


def format_pm(mean: float, std: float) -> str:
    """Paper-style mean±std: two decimals, scientific beyond 1e4."""
    if abs(mean) >= 1e4:
        return f"{mean:.2E}±{std:.2E}"
    return f"{mean:.2f}±{std:.2f}"


_GRADCHECK_STEPS = (1e-3, 3e-4, 1e-4, 3e-5, 1e-5, 3e-6)


def gradcheck_model(model: Model, n_coords: int = 200, seed: int = 0,
                    details: dict | None = None) -> float:
    """Central-difference check of the assembled network's gradients.

    Builds a fixed random batch, computes analytic gradients of the MSE loss
    once, then checks ``n_coords`` parameter coordinates sampled across all
    trainable tensors. Returns the max relative error
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).

    The numeric side uses central differences with stepsize control: the
    step shrinks until two successive estimates agree to 1e-6 (a too-large
    step can cross a ReLU kink, a too-small one leaves the loss difference at
    float64 resolution for ~1e-8 gradients). A coordinate whose differences
    never self-converge cannot serve as a 1e-5 oracle (the loss is locally
    non-smooth there at machine scale); it is skipped and a replacement
    coordinate drawn, with the count reported via ``details``. Step selection
    and skipping never look at the analytic value. The model must be built in
    float64.
    """
    if model.dtype != np.float64:
        raise ValueError("gradcheck_model requires a float64 model")
    cfg = model.cfg
    rng = Rng(seed).child(77)
    x = rng.uniform(-1.0, 1.0, (2, cfg.p, *cfg.grid, 2), np.float64)
    e = rng.uniform(0.0, 1.0, (2, 14), np.float64)
    y = rng.uniform(-1.0, 1.0, (2, *cfg.grid, 2), np.float64)

    def loss_value() -> float:
        pred = model.forward(x, e, train=True)
        return float(mse_loss(pred, y).item())

    model.set_trainable_grads_to_none()
    with tape() as tp:
        pred = model.forward(x, e, train=True)
        tp.backward(mse_loss(pred, y))

    params = model.parameters()
    sizes = np.array([t.size for _, t in params])
    total = int(sizes.sum())
    bounds = np.cumsum(sizes)

    def coordinate(flat):
        pi = int(np.searchsorted(bounds, flat, side="right"))
        local = flat - (bounds[pi - 1] if pi else 0)
        name, tensor_ = params[pi]
        return name, tensor_, int(local)

    worst = 0.0
    checked = skipped = 0
    seen = set()
    budget = n_coords * 8
    while checked < n_coords and budget > 0:
        budget -= 1
        flat = int(rng.integers(0, total))
        if flat in seen:
            continue
        seen.add(flat)
        name, tensor_, local = coordinate(flat)
        view = tensor_.data.reshape(-1)
        analytic = (0.0 if tensor_.grad is None
                    else float(tensor_.grad.reshape(-1)[local]))
        orig = view[local]

        def central(h):
            view[local] = orig + h
            fp = loss_value()
            view[local] = orig - h
            fm = loss_value()
            view[local] = orig
            return (fp - fm) / (2 * h)

        # scan step pairs from the largest down: for flat coordinates the
        # large steps are the accurate ones (noise grows as h shrinks), for
        # kink-adjacent ones the gap stays large until the step clears the
        # kink. Accept the first self-consistent pair, averaged.
        numeric = None
        prev = central(_GRADCHECK_STEPS[0])
        for h in _GRADCHECK_STEPS[1:]:
            cur = central(h)
            gap = abs(cur - prev) / max(abs(cur), abs(prev), 1e-8)
            if gap < 3e-6:
                numeric = 0.5 * (cur + prev)
                break
            prev = cur
        if numeric is None:
            skipped += 1
            continue
        if not (math.isfinite(numeric) and math.isfinite(analytic)):
            raise T.GradcheckNaNError(
                f"non-finite gradient at {name}[{local}]: "
                f"analytic={analytic}, numeric={numeric}")
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
        checked += 1
    if checked < n_coords:
        raise RuntimeError(
            f"gradcheck could not certify {n_coords} coordinates "
            f"({checked} checked, {skipped} locally non-smooth)")
    if details is not None:
        details.update(checked=checked, skipped=skipped)
    return worst


def run_replicas(model_cfg: ModelConfig, train_samples, test_samples,
                 nrm: Normalizer, train_cfg: TrainConfig,
                 seeds=None) -> MetricsReport:
    """Train+evaluate once per seed; aggregate mean and std over replicas.

    Each replica rebuilds the model with its own seed (initialization and
    batch order both derive from it). Any replica failure aborts with the
    offending seed named.
    """
    seeds = list(train_cfg.seeds if seeds is None else seeds)
    if len(seeds) < 2:
        raise ValueError("run_replicas: need at least 2 seeds")
    report = MetricsReport()
    for seed in seeds:
        try:
            cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "seed": seed})
            rcfg = TrainConfig(**{**train_cfg.__dict__, "seed": seed})
            model = build(cfg)
            train(model, train_samples, rcfg)
            report.rows.append((seed, evaluate(model, test_samples, nrm)))
        except Exception as exc:
            raise RuntimeError(f"replica with seed {seed} failed: {exc}") \
                from exc
    return report
