"""Clean and mixed-adversarial training with AdamW and plateau scheduling.

Adversarial training is a saddle-point problem: every minibatch is partly
replaced by attacks generated against the *current* parameters (inner
maximization) before the AdamW update (outer minimization).
"""
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from hive3d import attacks
from hive3d import model as cnn
from hive3d.errors import ConfigError, NumericError
from hive3d.tensor import Tape, Tensor, bce_with_logits

log = logging.getLogger(__name__)

CLEAN, ADVERSARIAL = "clean", "adversarial"
CATEGORIES = ("clean", "augmented", "pgd", "fgsm")
DEFAULT_COMPOSITION = {"clean": 0.08, "augmented": 0.12, "pgd": 0.23, "fgsm": 0.57}
LOG_COLUMNS = ("epoch", "train_loss", "val_acc", "val_prec", "val_rec", "lr", "regime")


@dataclass
class TrainConfig:
    regime: str = CLEAN
    batch_size: int = 16
    lr: float = 5e-5
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    max_lr_reductions: int = 3
    max_epochs: int = 50
    composition: dict = field(default_factory=lambda: dict(DEFAULT_COMPOSITION))
    fgsm: attacks.AttackConfig = attacks.SCALED_FGSM
    pgd: attacks.AttackConfig = attacks.SCALED_PGD
    augment: attacks.AugmentConfig = attacks.AugmentConfig()
    seed: int = 0

    def validate(self):
        if self.regime not in (CLEAN, ADVERSARIAL):
            raise ConfigError(f"regime must be {CLEAN!r} or {ADVERSARIAL!r}")
        if set(self.composition) - set(CATEGORIES):
            raise ConfigError(f"unknown composition keys {sorted(set(self.composition) - set(CATEGORIES))}")
        if any(v < 0 for v in self.composition.values()):
            raise ConfigError("composition fractions must be non-negative")
        if abs(sum(self.composition.values()) - 1.0) > 1e-9:
            raise ConfigError(f"composition fractions sum to {sum(self.composition.values())}, not 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be positive")
        if not self.lr > 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError("plateau_factor must lie in (0, 1)")

    def echo(self):
        d = asdict(self)
        for k in ("fgsm", "pgd"):
            d[k]["clamp_range"] = list(d[k]["clamp_range"])
        d["augment"]["zoom_range"] = list(d["augment"]["zoom_range"])
        d["betas"] = list(self.betas)
        return d


def composition_counts(n, fractions):
    """Largest-remainder apportionment of ``n`` slots over CATEGORIES.

    Remainder ties go to the category listed first.
    """
    fr = [float(fractions.get(c, 0.0)) for c in CATEGORIES]
    quotas = [f * n for f in fr]
    counts = [int(np.floor(q + 1e-9)) for q in quotas]
    rem = n - sum(counts)
    order = sorted(range(len(CATEGORIES)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:rem]:
        counts[i] += 1
    return dict(zip(CATEGORIES, counts))


def compose_batch(x, y, cfg, params, rng):
    """Replace parts of a clean batch by augmented and adversarial variants.

    Returns the mixed batch and the category assigned to each sample.
    """
    counts = composition_counts(len(x), cfg.composition)
    order = rng.permutation(len(x))
    kinds = np.empty(len(x), dtype=object)
    start = 0
    for cat in CATEGORIES:
        kinds[order[start : start + counts[cat]]] = cat
        start += counts[cat]
    out = np.array(x, dtype=np.float32, copy=True)
    idx = np.flatnonzero(kinds == "augmented")
    if idx.size:
        out[idx] = attacks.augment(out[idx], cfg.augment, rng)
    idx = np.flatnonzero(kinds == "pgd")
    if idx.size:
        out[idx] = attacks.pgd_attack(params, out[idx], y[idx], cfg.pgd)
    idx = np.flatnonzero(kinds == "fgsm")
    if idx.size:
        out[idx] = attacks.fgsm_attack(params, out[idx], y[idx], cfg.fgsm)
    return out, list(kinds)


@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, arrays):
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adamw_step(params, grads, state, lr, wd, betas=(0.9, 0.999), eps=1e-8):
    """In-place AdamW update with bias-corrected moments and decoupled decay."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient in optimizer step")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        p *= 1.0 - lr * wd
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


class PlateauScheduler:
    """Reduce-on-plateau for a maximized metric, with early stopping.

    The rate is multiplied by ``factor`` once the metric has failed to improve
    for more than ``patience`` consecutive epochs. Training should stop once
    ``max_reductions`` reductions have happened since the last improvement.
    """

    def __init__(self, lr, factor=0.5, patience=3, max_reductions=3):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.max_reductions = max_reductions
        self.best = -np.inf
        self.bad_epochs = 0
        self.reductions = 0
        self.stalled_reductions = 0

    def step(self, metric):
        if metric > self.best:
            self.best = metric
            self.bad_epochs = 0
            self.stalled_reductions = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            self.lr *= self.factor
            self.bad_epochs = 0
            self.reductions += 1
            self.stalled_reductions += 1

    @property
    def should_stop(self):
        return self.stalled_reductions >= self.max_reductions


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_acc: float
    val_prec: float
    val_rec: float
    val_loss: float
    lr: float
    regime: str

    def line(self):
        return (
            f"{self.epoch}, {self.train_loss:.6f}, {self.val_acc:.4f}, {self.val_prec:.4f}, "
            f"{self.val_rec:.4f}, {self.lr:.6e}, {self.regime}"
        )


@dataclass
class TrainResult:
    params: cnn.ModelParams
    final_params: cnn.ModelParams
    epochs: list
    best_epoch: int
    config: TrainConfig

    def log_text(self):
        return format_log(self.config, self.epochs)


def format_log(cfg, epochs):
    lines = [f"# {k} = {v}" for k, v in sorted(cfg.echo().items())]
    lines.append("# " + ", ".join(LOG_COLUMNS))
    lines.extend(e.line() for e in epochs)
    return "\n".join(lines) + "\n"


def clean_metrics(params, x, y, batch_size=32):
    """(acc, prec, rec, mean BCE) of a model on clean samples."""
    from hive3d.evaluator import ConfusionCounts, metrics

    p = cnn.probabilities(params, x, batch_size)
    pred = (p >= 0.5).astype(int)
    counts = ConfusionCounts.from_predictions(pred, y)
    acc, prec, rec = metrics(counts)
    pc = np.clip(p, 1e-12, 1 - 1e-12)
    loss = float(-np.mean(y * np.log(pc) + (1 - y) * np.log(1 - pc)))
    return acc, prec, rec, loss


def train(train_set, val_set, cfg, arch=None, init_params=None, on_epoch=None):
    """Fit a model; returns the best-validation checkpoint and the per-epoch log.

    ``train_set``/``val_set`` are ``(x, y)`` with x of shape (N, 1, D, H, W).
    Plateau decisions use clean validation accuracy; among epochs with equal
    accuracy the one with the lower validation loss is kept as best.
    """
    cfg.validate()
    x_tr, y_tr = np.asarray(train_set[0], np.float32), np.asarray(train_set[1])
    x_va, y_va = np.asarray(val_set[0], np.float32), np.asarray(val_set[1])
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ConfigError("train and validation splits must be non-empty")

    rng = np.random.default_rng(cfg.seed)
    params = init_params.copy() if init_params is not None else cnn.init(int(rng.integers(2**63)), arch)
    params.requires_grad_(True)
    tensors = [t for _, t in params.tensors()]
    state = OptimizerState.zeros_like([t.data for t in tensors])
    sched = PlateauScheduler(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.max_lr_reductions)

    epochs = []
    best_key, best_params, best_epoch = None, params.copy(), 0
    for epoch in range(1, cfg.max_epochs + 1):
        lr = sched.lr
        order = rng.permutation(len(x_tr))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = x_tr[idx], y_tr[idx]
            if cfg.regime == ADVERSARIAL:
                xb, _ = compose_batch(xb, yb, cfg, params, rng)
            for t in tensors:
                t.grad = None
            with Tape() as tape:
                loss = bce_with_logits(cnn.logits(params, Tensor(xb)), yb)
            tape.backward(loss)
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
            adamw_step([t.data for t in tensors], grads, state, lr, cfg.weight_decay, cfg.betas, cfg.adam_eps)
            losses.append(loss.item() * len(idx))

        acc, prec, rec, vloss = clean_metrics(params, x_va, y_va)
        entry = EpochLog(epoch, float(np.sum(losses) / len(x_tr)), acc, prec, rec, vloss, lr, cfg.regime)
        epochs.append(entry)
        log.info(entry.line())
        if on_epoch is not None:
            on_epoch(entry)

        key = (acc, -vloss)
        if best_key is None or key > best_key:
            best_key, best_params, best_epoch = key, params.copy(), epoch
        sched.step(acc)
        if sched.should_stop:
            log.info("early stop after %d stalled lr reductions", sched.stalled_reductions)
            break

    best_params.requires_grad_(False)
    best_params.meta = {"best_epoch": best_epoch, "train_config": cfg.echo()}
    final = params.copy()
    final.requires_grad_(False)
    return TrainResult(best_params, final, epochs, best_epoch, cfg)
