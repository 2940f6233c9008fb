"""Confusion matrices, F1, and the repeated-trial few-shot protocols."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metasgd
from .episodes import ClassSplit, LabeledDataset, make_adaptation_task
from .errors import PreconditionError

PRE_TRAINING = "pre_training"
FINE_TUNING = "fine_tuning"
FROM_SCRATCH = "from_scratch"
DEFAULT_TRIALS = 100


def confusion(preds, truth, n_slots: int) -> np.ndarray:
    """counts[t, p] = number of samples with true slot t predicted as p."""
    preds = np.asarray(preds, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if preds.size != truth.size:
        raise PreconditionError(f"{preds.size} predictions for {truth.size} labels")
    if preds.size and (min(preds.min(), truth.min()) < 0 or max(preds.max(), truth.max()) >= n_slots):
        raise PreconditionError(f"slot labels must lie in [0, {n_slots})")
    cm = np.zeros((n_slots, n_slots), dtype=np.int64)
    np.add.at(cm, (truth, preds), 1)
    return cm


def precision_recall_f1(cm: np.ndarray, slot: int) -> tuple:
    tp = int(cm[slot, slot])
    fp = int(cm[:, slot].sum()) - tp
    fn = int(cm[slot, :].sum()) - tp
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def f1(cm: np.ndarray, slot: int) -> float:
    return precision_recall_f1(cm, slot)[2]


@dataclass
class EvalReport:
    variant: str
    M: int
    per_class: list  # of {"slot", "precision", "recall", "f1"} on the pooled confusion matrix
    macro_f1: float
    novel_f1: float  # mean novel-slot F1 over trials
    trials: list = field(default_factory=list)
    trial_classes: list = field(default_factory=list)
    mean: float = 0.0
    std: float = 0.0
    confusion: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _report(variant, M, K, cms, trial_f1, trial_classes) -> EvalReport:
    pooled = np.sum(cms, axis=0) if cms else np.zeros((K + 2, K + 2), dtype=np.int64)
    per_class = []
    for s in range(K + 2):
        p, r, f = precision_recall_f1(pooled, s)
        per_class.append({"slot": s, "precision": p, "recall": r, "f1": f})
    trials = [float(x) for x in trial_f1]
    mean = float(np.mean(trials)) if trials else 0.0
    return EvalReport(
        variant=variant,
        M=M,
        per_class=per_class,
        macro_f1=float(np.mean([c["f1"] for c in per_class])),
        novel_f1=mean,
        trials=trials,
        trial_classes=list(trial_classes),
        mean=mean,
        std=float(np.std(trials)) if trials else 0.0,
        confusion=pooled.tolist(),
    )


def trial_seed(seed: int, index: int) -> int:
    return int(seed) ^ int(index)


def run_trials(meta: metasgd.MetaParameters, dataset: LabeledDataset, test_classes, M: int,
               trials=DEFAULT_TRIALS, seed=0, adapt_steps=10, trial_offset=0,
               baseline: metasgd.MetaParameters | None = None) -> dict:
    """Core loop shared by the M-shot and cross-dataset protocols.

    Each trial draws a test class and an adaptation task from seed ^ trial
    index, then scores the novel slot on the task's validation rows for
    the unadapted model (pre_training) and the adapted one (fine_tuning).
    With `baseline` given (for instance a random network with uniform
    step sizes), a third variant ``from_scratch`` adapts it on the same
    support sets.
    """
    if trials < 1:
        raise PreconditionError(f"trials must be >= 1, got {trials}")
    test_classes = sorted(int(c) for c in test_classes)
    if not test_classes:
        raise PreconditionError("no test classes to evaluate on")
    if dataset.X.shape[1] != meta.shape.input_dim:
        raise PreconditionError(
            f"dataset has {dataset.X.shape[1]} features, checkpoint expects {meta.shape.input_dim}"
        )
    K = meta.K
    novel = K + 1
    variants = [PRE_TRAINING, FINE_TUNING] + ([FROM_SCRATCH] if baseline is not None else [])
    cms = {v: [] for v in variants}
    scores = {v: [] for v in variants}
    classes = []
    for t in range(trial_offset, trial_offset + trials):
        rng = np.random.default_rng(trial_seed(seed, t))
        cls = int(rng.choice(test_classes))
        task = make_adaptation_task(dataset, cls, M, rng, K=K)
        classes.append(dataset.class_names[cls])
        models = {
            PRE_TRAINING: meta.theta,
            FINE_TUNING: metasgd.adapt(meta, task.support_X, task.support_y, adapt_steps),
        }
        if baseline is not None:
            models[FROM_SCRATCH] = metasgd.adapt(baseline, task.support_X, task.support_y, adapt_steps)
        for v in variants:
            pred, _ = metasgd.predict(models[v], task.val_X)
            cm = confusion(pred, task.val_y, K + 2)
            cms[v].append(cm)
            scores[v].append(f1(cm, novel))
    return {v: _report(v, M, K, cms[v], scores[v], classes) for v in variants}


def run_mshot_protocol(meta, dataset: LabeledDataset, split: ClassSplit, M: int,
                       trials=DEFAULT_TRIALS, seed=0, adapt_steps=10, trial_offset=0,
                       baseline=None) -> dict:
    """Pre-training vs fine-tuning novel-class F1 over test classes of `split`."""
    return run_trials(meta, dataset, split.test_classes, M, trials, seed, adapt_steps,
                      trial_offset, baseline)


def run_cross_dataset(meta, dataset_b: LabeledDataset, M: int = 20, trials=DEFAULT_TRIALS,
                      seed=0, adapt_steps=10, trial_offset=0, baseline=None) -> dict:
    """Same protocol, adapting to every anomaly class of a second dataset.

    `dataset_b` must have been preprocessed with the first dataset's manifest.
    """
    return run_trials(meta, dataset_b, dataset_b.anomaly_classes, M, trials, seed, adapt_steps,
                      trial_offset, baseline)


def dataset_summary(dataset: LabeledDataset) -> list:
    """Per anomaly class: (name, rows, normal rows / class rows rounded to 0.1)."""
    n_normal = len(dataset.rows_of(dataset.normal_class))
    out = []
    for c in dataset.anomaly_classes:
        n = len(dataset.rows_of(c))
        out.append((dataset.class_names[c], n, round(n_normal / n, 1)))
    return out


def label_summary(labels, normal_label) -> list:
    """`dataset_summary` straight from raw labels (no manifest needed)."""
    names, counts = np.unique(np.asarray(labels, dtype=object).astype(str), return_counts=True)
    table = dict(zip(names.tolist(), counts.tolist()))
    n_normal = table.get(normal_label, 0)
    return [(name, n, round(n_normal / n, 1)) for name, n in table.items() if name != normal_label]


def reports_to_json(reports: dict, extra: dict | None = None) -> str:
    doc = dict(extra or {})
    doc["variants"] = {k: r.to_dict() for k, r in reports.items()}
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def write_trials_csv(reports: dict, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "M", "trial", "class", "novel_f1"])
        for name, rep in reports.items():
            for i, (score, cls) in enumerate(zip(rep.trials, rep.trial_classes)):
                w.writerow([name, rep.M, i, cls, "%.9g" % score])
