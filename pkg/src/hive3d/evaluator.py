"""Metrics, robustness conditions, frame-wise and early-exit evaluation, cost model.

DDoS (label 1) is the positive class throughout.
"""
from dataclasses import dataclass, field

import numpy as np

from hive3d import attacks
from hive3d import model as cnn
from hive3d.errors import ConfigError, EmptyEvaluationError

CONDITIONS = ("Clean", "Augmented", "PGD", "FGSM")
C_FP, C_FN = 0.08, 12.70


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, pred, y):
        pred = np.asarray(pred).astype(bool).ravel()
        y = np.asarray(y).astype(bool).ravel()
        if pred.shape != y.shape:
            raise ValueError(f"{pred.shape} predictions for {y.shape} labels")
        return cls(
            int(np.sum(pred & y)), int(np.sum(pred & ~y)), int(np.sum(~pred & ~y)), int(np.sum(~pred & y))
        )

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


def metrics(counts):
    """(accuracy, precision, recall); precision/recall are 0 when undefined."""
    if counts.total == 0:
        raise EmptyEvaluationError("no samples evaluated")
    acc = (counts.tp + counts.tn) / counts.total
    prec = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    rec = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    return acc, prec, rec


def _split_scores(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    lab = np.asarray(labels).astype(bool).ravel()
    if s.shape != lab.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(lab.sum())
    n_neg = lab.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EmptyEvaluationError("AUC needs both classes present")
    return s, lab, n_pos, n_neg


def auc(scores, labels):
    """Mann-Whitney AUC: P(pos > neg) + P(tie) / 2, via tie-averaged ranks.

    Ranks are kept doubled so every intermediate is an exact integer.
    """
    s, lab, n_pos, n_neg = _split_scores(scores, labels)
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], s.size]
    # doubled average rank of a tie group spanning 1-based ranks start+1..end
    doubled = np.repeat(starts + 1 + ends, ends - starts)
    ranks2 = np.empty(s.size, dtype=np.int64)
    ranks2[order] = doubled
    u2 = int(ranks2[lab].sum()) - n_pos * (n_pos + 1)
    return (u2 / 2) / (n_pos * n_neg)


def roc_points(scores, labels):
    """(fpr, tpr) at every distinct threshold, from (0, 0) to (1, 1)."""
    s, lab, n_pos, n_neg = _split_scores(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, lab = s[order], lab[order]
    last = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(lab)[last]
    fp = np.cumsum(~lab)[last]
    return np.r_[0.0, fp / n_neg], np.r_[0.0, tp / n_pos]


def cost(counts, c_fp=C_FP, c_fn=C_FN):
    """Operational cost in dollars per day: c_fp * FP + c_fn * FN."""
    if c_fp < 0 or c_fn < 0:
        raise ConfigError("cost coefficients must be non-negative")
    return c_fp * counts.fp + c_fn * counts.fn


@dataclass
class ConditionResult:
    condition: str
    counts: ConfusionCounts
    scores: np.ndarray

    @property
    def accuracy(self):
        return metrics(self.counts)[0]

    @property
    def precision(self):
        return metrics(self.counts)[1]

    @property
    def recall(self):
        return metrics(self.counts)[2]

    def auc(self, labels):
        try:
            return auc(self.scores, labels)
        except EmptyEvaluationError:
            return float("nan")


@dataclass(frozen=True)
class EvalSettings:
    fgsm: attacks.AttackConfig = attacks.SCALED_FGSM
    pgd: attacks.AttackConfig = attacks.SCALED_PGD
    augment: attacks.AugmentConfig = attacks.AugmentConfig()
    seed: int = 0
    batch_size: int = 16


def perturb(params, x, y, condition, settings, rng, tied_depth=False):
    """Inputs of one test condition, built batch by batch against ``params``."""
    if condition == "Clean":
        return np.asarray(x, np.float32)
    out = np.empty_like(np.asarray(x, np.float32))
    bs = settings.batch_size
    for i in range(0, len(x), bs):
        xb, yb = x[i : i + bs], y[i : i + bs]
        if condition == "Augmented":
            if tied_depth:
                frame = attacks.augment(xb[:, :, :1], settings.augment, rng)
                out[i : i + bs] = np.broadcast_to(frame, xb.shape)
            else:
                out[i : i + bs] = attacks.augment(xb, settings.augment, rng)
        elif condition == "PGD":
            out[i : i + bs] = attacks.pgd_attack(params, xb, yb, settings.pgd, tied_depth=tied_depth)
        elif condition == "FGSM":
            out[i : i + bs] = attacks.fgsm_attack(params, xb, yb, settings.fgsm, tied_depth=tied_depth)
        else:
            raise ConfigError(f"unknown condition {condition!r}")
    return out


def evaluate_conditions(params, x, y, settings=EvalSettings(), conditions=CONDITIONS):
    """White-box evaluation of the same sequences under each condition."""
    y = np.asarray(y)
    results = {}
    for k, cond in enumerate(conditions):
        rng = np.random.default_rng([settings.seed, k])
        xc = perturb(params, x, y, cond, settings, rng)
        p = cnn.probabilities(params, xc, settings.batch_size)
        results[cond] = ConditionResult(cond, ConfusionCounts.from_predictions(p >= 0.5, y), p)
    return results


def replicate_frame(x, t):
    """Frame ``t`` of each sequence repeated along depth: (N, C, D, H, W)."""
    x = np.asarray(x)
    return np.ascontiguousarray(np.broadcast_to(x[:, :, t : t + 1], x.shape))


def framewise(params, x, y, settings=EvalSettings(), conditions=CONDITIONS):
    """Accuracy per condition and frame index for single-frame (no-context) inputs.

    Each frame is perturbed on its own and then replicated, so every depth
    slice of a model input is identical.
    """
    y = np.asarray(y)
    depth = np.asarray(x).shape[2]
    table = {}
    for k, cond in enumerate(conditions):
        row = []
        for t in range(depth):
            rng = np.random.default_rng([settings.seed, k, t])
            xt = perturb(params, replicate_frame(x, t), y, cond, settings, rng, tied_depth=True)
            p = cnn.probabilities(params, xt, settings.batch_size)
            row.append(metrics(ConfusionCounts.from_predictions(p >= 0.5, y))[0])
        table[cond] = row
    return table


def prefix_input(seq, t):
    """Frames 0..t of a (C, D, H, W) sequence, the last one repeated to full depth."""
    seq = np.asarray(seq)
    idx = np.minimum(np.arange(seq.shape[1]), t)
    return seq[:, idx]


@dataclass(frozen=True)
class ExitDecision:
    label: int
    exit_frame: int
    confidence: float


def early_exit(params, sequence, threshold=0.9):
    """Classify growing prefixes t = 1..D-1 and stop at the first confident one."""
    last = np.asarray(sequence).shape[1] - 1
    for t in range(1, last + 1):
        p = float(cnn.probabilities(params, prefix_input(sequence, t)[None])[0])
        label, conf = cnn.decide(p)
        if conf > threshold or t == last:
            return ExitDecision(label, t, conf)


@dataclass
class EarlyExitStats:
    threshold: float
    decisions: list
    accuracy: float
    detection_rate: float
    mean_exit_frame: float
    full_accuracy: float


def early_exit_batch(params, x, y, threshold=0.9, batch_size=16):
    """Early exit over a set of sequences, compared with full-sequence accuracy.

    Probabilities of every prefix are computed once; per-sample decisions are
    identical to calling ``early_exit`` on each sequence.
    """
    x = np.asarray(x, np.float32)
    y = np.asarray(y).astype(int)
    last = x.shape[2] - 1
    probs = np.stack([cnn.probabilities(params, np.stack([prefix_input(s, t) for s in x]), batch_size)
                      for t in range(1, last + 1)], axis=1)
    decisions = []
    for row in probs:
        for t, p in enumerate(row, start=1):
            label, conf = cnn.decide(float(p))
            if conf > threshold or t == last:
                decisions.append(ExitDecision(label, t, conf))
                break
    labels = np.array([d.label for d in decisions])
    full = (probs[:, -1] >= 0.5).astype(int)
    pos = y == 1
    return EarlyExitStats(
        threshold,
        decisions,
        float(np.mean(labels == y)),
        float(np.mean(labels[pos] == 1)) if pos.any() else 0.0,
        float(np.mean([d.exit_frame for d in decisions])),
        float(np.mean(full == y)),
    )


@dataclass
class EvalReport:
    model_name: str
    labels: np.ndarray
    conditions: dict
    framewise: dict = None
    early: EarlyExitStats = None
    c_fp: float = C_FP
    c_fn: float = C_FN
    extra: dict = field(default_factory=dict)

    def pooled_counts(self):
        total = ConfusionCounts()
        for r in self.conditions.values():
            total = total + r.counts
        return total

    def cost(self):
        return cost(self.pooled_counts(), self.c_fp, self.c_fn)


def evaluate(params, x, y, settings=EvalSettings(), name="model", with_framewise=True, threshold=0.9):
    y = np.asarray(y)
    report = EvalReport(name, y, evaluate_conditions(params, x, y, settings))
    if with_framewise:
        report.framewise = framewise(params, x, y, settings)
    if threshold is not None:
        report.early = early_exit_batch(params, x, y, threshold, settings.batch_size)
    return report


def _f4(v):
    return f"{v:.4f}"


def format_tables(report):
    """Human-readable tables: conditions (acc/prec/rec/auc), frame-wise accuracy, early exit, cost."""
    lines = [f"== {report.model_name} ==", "", "Condition   Accuracy  Precision  Recall    AUC"]
    for cond, r in report.conditions.items():
        lines.append(
            f"{cond:<11} {_f4(r.accuracy):<9} {_f4(r.precision):<10} {_f4(r.recall):<9} {_f4(r.auc(report.labels))}"
        )
    if report.framewise:
        depth = len(next(iter(report.framewise.values())))
        lines += ["", "Frame-wise accuracy", "Condition   " + "  ".join(f"t{t:<5}" for t in range(depth))]
        for cond, row in report.framewise.items():
            lines.append(f"{cond:<11} " + "  ".join(_f4(a) for a in row))
    if report.early is not None:
        e = report.early
        lines += [
            "",
            f"Early exit (threshold {e.threshold:g}): accuracy {_f4(e.accuracy)}, detection rate "
            f"{_f4(e.detection_rate)}, mean exit frame {e.mean_exit_frame:.3f}, full-sequence accuracy "
            f"{_f4(e.full_accuracy)}",
        ]
    c = report.pooled_counts()
    lines += [
        "",
        f"Cost (c_fp={report.c_fp:g}, c_fn={report.c_fn:g}) over all conditions: FP={c.fp} FN={c.fn} "
        f"${report.cost():.2f}",
    ]
    return "\n".join(lines) + "\n"


def format_records(report):
    """Line-oriented ``key=value`` records, one per measurement."""
    name = report.model_name
    out = []
    for cond, r in report.conditions.items():
        c = r.counts
        out.append(
            f"record=condition model={name} condition={cond} tp={c.tp} fp={c.fp} tn={c.tn} fn={c.fn} "
            f"acc={r.accuracy!r} prec={r.precision!r} rec={r.recall!r} auc={r.auc(report.labels)!r}"
        )
    for cond, row in (report.framewise or {}).items():
        for t, a in enumerate(row):
            out.append(f"record=framewise model={name} condition={cond} frame={t} acc={a!r}")
    if report.early is not None:
        e = report.early
        out.append(
            f"record=early_exit model={name} threshold={e.threshold!r} acc={e.accuracy!r} "
            f"detection_rate={e.detection_rate!r} mean_exit_frame={e.mean_exit_frame!r} "
            f"full_acc={e.full_accuracy!r}"
        )
    c = report.pooled_counts()
    out.append(f"record=cost model={name} fp={c.fp} fn={c.fn} c_fp={report.c_fp!r} c_fn={report.c_fn!r} "
               f"cost={report.cost()!r}")
    return "\n".join(out) + "\n"


def format_roc(report):
    """Tab-separated ROC points per condition for external plotting."""
    out = ["condition\tfpr\ttpr"]
    for cond, r in report.conditions.items():
        try:
            fpr, tpr = roc_points(r.scores, report.labels)
        except EmptyEvaluationError:
            continue
        out.extend(f"{cond}\t{a!r}\t{b!r}" for a, b in zip(fpr, tpr))
    return "\n".join(out) + "\n"
