"""SGD training on the combined density + count-group loss, evaluation, and
the experiment harnesses (loss-weight sweep, standalone-vs-joint ablation,
k-fold cross-validation)."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import model as mdl
from . import nn
from .errors import MTCError, NaNLossError, ShapeError
from .groundtruth import CountRange, KernelConfig, count_group_label
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (1.0, 1e-1, 1e-2, 1e-3, 1e-4)

# Published full-scale benchmark results, kept as reference
# metadata. Desk-scale runs are not expected to reproduce them.
REFERENCE_LAMBDA_TABLE = {
    1.0: (68.4, 109.0),
    1e-1: (68.0, 108.4),
    1e-2: (65.5, 105.8),
    1e-3: (63.7, 103.7),
    1e-4: (66.5, 104.7),
}
REFERENCE_ABLATION = {
    "aux_accuracy": {"standalone": 0.566, "mtl": 0.797},
    "main_mae": {"standalone": 68.2, "mtl": 63.7},
}

PAPER_LEARNING_RATE = 1e-7


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    lam: float = 1e-3
    epochs: int = 50
    batch_size: int = 1
    seed: int = 0
    preset: str = "desk"
    init: str = None
    ce_reduction: str = "sum"
    kernel_mode: str = "adaptive"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"lambda must be a finite non-negative number, got {self.lam}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.ce_reduction not in ("sum", "mean"):
            raise ValueError("ce_reduction must be 'sum' or 'mean'")
        mdl.get_preset(self.preset)

    @classmethod
    def from_dict(cls, obj):
        obj = dict(obj)
        if "lambda" in obj:
            obj["lam"] = obj.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**obj)

    def to_dict(self):
        out = asdict(self)
        out["lambda"] = out.pop("lam")
        return out

    @property
    def kernel(self):
        return KernelConfig(mode=self.kernel_mode)


@dataclass
class EvalReport:
    mae: float
    mse: float
    pairs: list
    accuracy: float = None

    def to_dict(self):
        return {"mae": self.mae, "mse": self.mse, "accuracy": self.accuracy,
                "pairs": [{"estimate": e, "ground_truth": g} for e, g in self.pairs]}


@dataclass
class TrainResult:
    params: mdl.ModelParams
    history: list  # (step, L1, L2, L_total)
    report: EvalReport
    count_range: CountRange

    def write_history_csv(self, path):
        write_history_csv(self.history, path)


def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "L1", "L2", "L_total"])
        for step, l1, l2, total in history:
            writer.writerow([step, repr(l1), repr(l2), repr(total)])


def count_from_density(density) -> float:
    grid = getattr(density, "grid", density)
    return float(np.sum(grid))


def _abs_errors(pairs):
    if len(pairs) == 0:
        raise ValueError("metrics need at least one (estimate, ground truth) pair")
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    return np.abs(arr[:, 0] - arr[:, 1])


def mae(pairs) -> float:
    return float(np.mean(_abs_errors(pairs)))


def mse_metric(pairs) -> float:
    """Root of the mean squared count error."""
    err = _abs_errors(pairs)
    return float(np.sqrt(np.mean(err * err)))


def sgd_step(params, lr, frozen=()):
    """In-place ``theta -= lr * grad`` for every non-frozen tensor, then zero all grads."""
    frozen = set(frozen)
    for name, t in params.items():
        if name in frozen:
            continue
        if t.grad is None:
            raise MTCError(f"trainable parameter {name!r} has no gradient")
    for name, t in params.items():
        if name not in frozen:
            t.data -= lr * t.grad
    for t in params.values():
        t.grad = None


def count_range_of(samples) -> CountRange:
    counts = [s.count for s in samples]
    if not counts:
        raise MTCError("dataset is empty")
    return CountRange(min(counts), max(counts))


def _batches(samples, batch_size, rng):
    order = rng.permutation(len(samples))
    for start in range(0, len(order), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        shapes = {s.image.shape for s in chunk}
        if len(shapes) > 1:
            raise ShapeError(f"batch mixes image sizes {sorted(shapes)}; use batch_size=1")
        yield chunk


def compute_losses(params, chunk, count_range, lam, mode="joint", ce_reduction="sum"):
    """Forward one batch; returns ``(L1, L2, L_total)`` tensors."""
    images = np.stack([s.image for s in chunk])
    target = np.stack([s.density for s in chunk])[:, None]
    labels = [count_group_label(s.count, count_range) for s in chunk]
    density, logits = mdl.forward(params, images)
    l1 = nn.mse_density_loss(density, target)
    l2 = nn.softmax_cross_entropy(logits, labels, reduction=ce_reduction)
    if mode == "joint":
        total = nn.combined_loss(l1, l2, lam)
    elif mode == "main":
        total = nn.combined_loss(l1, l2, 0.0)
    elif mode == "aux":
        total = l2
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    return l1, l2, total


FROZEN_GROUPS = {"joint": (), "main": ("classifier",), "aux": ("x1", "backend")}


def train(samples, cfg: TrainConfig, params=None, count_range=None, mode="joint",
          eval_samples=None) -> TrainResult:
    """Run ``cfg.epochs`` passes of plain SGD.

    ``mode`` selects the objective: ``joint`` (L1 + lam * L2), ``main``
    (lam forced to 0, classifier frozen) or ``aux`` (L2 only, density-only
    layers frozen).  Count groups use ``count_range`` or, by default, the
    extremes of ``samples``.
    """
    if not samples:
        raise MTCError("cannot train on an empty dataset")
    count_range = count_range or count_range_of(samples)
    params = params if params is not None else mdl.build(cfg.preset, cfg.seed, init=cfg.init)
    frozen = params.names_in(*FROZEN_GROUPS[mode])
    rng = np.random.default_rng([cfg.seed, 1])
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        for chunk in _batches(samples, cfg.batch_size, rng):
            step += 1
            l1, l2, total = compute_losses(params, chunk, count_range, cfg.lam, mode, cfg.ce_reduction)
            value = total.item()
            if not math.isfinite(value):
                raise NaNLossError(step, value)
            backward(total)
            sgd_step(params, cfg.learning_rate, frozen)
            history.append((step, l1.item(), l2.item(), value))
        log.debug("epoch %d: L_total %.6g", epoch + 1, history[-1][3] if history else float("nan"))
    report = evaluate(params, eval_samples if eval_samples is not None else samples, count_range)
    return TrainResult(params, history, report, count_range)


def predict(params, images):
    """Density maps ``(N, H/8, W/8)`` and class probabilities ``(N, 10)``."""
    with no_grad():
        density, logits = mdl.forward(params, np.asarray(images, dtype=np.float64))
        probs = nn.softmax(logits)
    return density.data[:, 0], probs.data


def evaluate(params, samples, count_range=None) -> EvalReport:
    pairs, hits = [], 0
    for s in samples:
        density, probs = predict(params, s.image[None])
        pairs.append((count_from_density(density[0]), s.count))
        if count_range is not None:
            hits += int(np.argmax(probs[0]) == count_group_label(s.count, count_range))
    accuracy = hits / len(samples) if count_range is not None else None
    return EvalReport(mae(pairs), mse_metric(pairs), pairs, accuracy)


# -- harnesses --------------------------------------------------------------

@dataclass
class SweepTable:
    rows: list  # (lambda, mae, mse)
    reference: dict = field(default_factory=lambda: dict(REFERENCE_LAMBDA_TABLE))

    def to_dict(self):
        return {
            "rows": [{"lambda": lam, "mae": m, "mse": s} for lam, m, s in self.rows],
            "reference": [{"lambda": lam, "mae": m, "mse": s} for lam, (m, s) in self.reference.items()],
        }

    def to_text(self):
        head = ["", *(f"lambda={lam:g}" for lam, _, _ in self.rows)]
        mae_row = ["MAE", *(f"{m:.4f}" for _, m, _ in self.rows)]
        mse_row = ["MSE", *(f"{s:.4f}" for _, _, s in self.rows)]
        return _format_table([head, mae_row, mse_row])


def lambda_sweep(samples, cfg: TrainConfig, lambdas=DEFAULT_LAMBDAS, eval_samples=None,
                 count_range=None) -> SweepTable:
    if len(lambdas) < 2:
        raise ValueError("a sweep needs at least two lambda values")
    rows = []
    for lam in lambdas:
        run_cfg = TrainConfig.from_dict(dict(cfg.to_dict(), **{"lambda": lam}))
        result = train(samples, run_cfg, count_range=count_range, eval_samples=eval_samples)
        rows.append((float(lam), result.report.mae, result.report.mse))
        log.info("lambda=%g MAE=%.4f MSE=%.4f", lam, result.report.mae, result.report.mse)
    return SweepTable(rows)


@dataclass
class AblationReport:
    arms: dict  # arm -> {"mae", "mse", "accuracy"}
    reference: dict = field(default_factory=lambda: json.loads(json.dumps(REFERENCE_ABLATION)))

    def to_dict(self):
        return {"arms": self.arms, "reference": self.reference}

    def to_text(self):
        rows = [["arm", "MAE", "MSE", "aux accuracy"]]
        for arm, m in self.arms.items():
            rows.append([arm, f"{m['mae']:.4f}", f"{m['mse']:.4f}", f"{m['accuracy']:.4f}"])
        ref = self.reference
        footer = (
            f"reference (full scale): aux accuracy {ref['aux_accuracy']['standalone']:.1%} -> "
            f"{ref['aux_accuracy']['mtl']:.1%}, main MAE {ref['main_mae']['standalone']} -> "
            f"{ref['main_mae']['mtl']}"
        )
        return _format_table(rows) + "\n" + footer


ABLATION_ARMS = (("main_standalone", "main"), ("aux_standalone", "aux"), ("mtl", "joint"))


def ablation(samples, cfg: TrainConfig, eval_samples=None, count_range=None) -> AblationReport:
    count_range = count_range or count_range_of(samples)
    arms = {}
    for arm, mode in ABLATION_ARMS:
        result = train(samples, cfg, count_range=count_range, mode=mode, eval_samples=eval_samples)
        arms[arm] = {"mae": result.report.mae, "mse": result.report.mse,
                     "accuracy": result.report.accuracy}
    return AblationReport(arms)


def kfold_indices(n, folds=5, seed=0):
    if not 2 <= folds <= n:
        raise ValueError(f"need 2 <= folds <= {n}, got {folds}")
    order = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(order, folds)]


def cross_validate(samples, cfg: TrainConfig, folds=5):
    """Train on k-1 folds, evaluate on the held-out one; count range from the train folds."""
    reports = []
    for held in kfold_indices(len(samples), folds, cfg.seed):
        held_set = set(held.tolist())
        train_part = [s for i, s in enumerate(samples) if i not in held_set]
        test_part = [samples[i] for i in held]
        reports.append(train(train_part, cfg, eval_samples=test_part).report)
    return {
        "folds": [r.to_dict() for r in reports],
        "mae": float(np.mean([r.mae for r in reports])),
        "mse": float(np.mean([r.mse for r in reports])),
    }


def _format_table(rows):
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(str(c).rjust(w) for c, w in zip(r, widths)) for r in rows)
