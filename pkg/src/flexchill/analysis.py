"""Measurements: accuracy/loss, convergence speed, entropy, CKA, calibration,
input-gradient norms and distance to the decision boundary."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .models import Model
from .nn import Tape, Tensor, ce_loss_t, log_softmax_t, softmax_t


class UndefinedSimilarityError(ValueError):
    """CKA is undefined when a feature matrix has no variance."""


def _nonempty(ds: Dataset | None) -> Dataset:
    if ds is None or len(ds) == 0:
        raise ValueError("evaluation dataset is empty")
    return ds


def evaluate(model: Model, ds: Dataset, T_eval: float = 1.0) -> tuple[float, float]:
    """Return ``(accuracy, mean temperature-scaled cross-entropy)``."""
    ds = _nonempty(ds)
    z = model.logits(ds.features)
    acc = float(np.mean(z.argmax(axis=1) == ds.labels))
    loss = float(ce_loss_t(z, ds.labels, T_eval).data)
    return acc, loss


def accuracy(model: Model, ds: Dataset) -> float:
    ds = _nonempty(ds)
    return float(np.mean(model.logits(ds.features).argmax(axis=1) == ds.labels))


def rounds_to_target(records, target: float) -> int | None:
    """First round whose global accuracy reaches ``target`` (first touch)."""
    if not 0 < target <= 1:
        raise ValueError("target must lie in (0, 1]")
    for rec in records:
        if rec.global_test_accuracy >= target:
            return rec.round
    return None


def speedup(rounds_baseline: int | None, rounds: int | None) -> float | None:
    """Convergence speed relative to a baseline, ``baseline / rounds``."""
    if rounds_baseline is None or rounds is None:
        return None
    return rounds_baseline / rounds


def entropy_from_logits(z: np.ndarray, T: float) -> np.ndarray:
    """Per-row Shannon entropy (nats) of ``softmax(z / T)``."""
    logp = log_softmax_t(z, T)
    p = np.exp(logp)
    return -(p * logp).sum(axis=1)


def output_entropy(model: Model, ds: Dataset, T_eval: float = 1.0) -> float:
    ds = _nonempty(ds)
    return float(entropy_from_logits(model.logits(ds.features), T_eval).mean())


# ---------------------------------------------------------------- CKA


def linear_cka(X: np.ndarray, Y: np.ndarray) -> float:
    """Linear CKA on column-centered features.

    ``||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F)``.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    X = X.reshape(len(X), -1)
    Y = Y.reshape(len(Y), -1)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"CKA needs the same examples: {X.shape[0]} vs {Y.shape[0]} rows")
    if X.shape[0] < 2:
        raise ValueError("CKA needs at least two examples")
    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    nx = np.linalg.norm(X.T @ X)
    ny = np.linalg.norm(Y.T @ Y)
    if nx == 0 or ny == 0:
        raise UndefinedSimilarityError("feature matrix has zero variance")
    return float(np.linalg.norm(Y.T @ X) ** 2 / (nx * ny))


def cka_report(models, reference: Model, probe: Dataset, layers) -> dict[int, np.ndarray]:
    """Pairwise CKA per layer between ``[reference, *models]``.

    Returns ``{layer: matrix}`` where row/column 0 is the reference.
    """
    probe = _nonempty(probe)
    layers = tuple(layers)
    everyone = [reference, *models]
    for m in everyone:
        if not m.params.congruent(reference.params):
            raise ValueError("cka_report needs congruent models")
    feats = [m.features(probe.features, layers) for m in everyone]
    out = {}
    n = len(everyone)
    for layer in layers:
        mat = np.eye(n)
        for i in range(n):
            for j in range(i + 1, n):
                mat[i, j] = mat[j, i] = linear_cka(feats[i][layer], feats[j][layer])
        out[layer] = mat
    return out


# ---------------------------------------------------------------- calibration


@dataclass
class CalibrationReport:
    edges: np.ndarray
    counts: np.ndarray
    confidence: np.ndarray
    accuracy: np.ndarray
    ece: float

    def recompute_ece(self) -> float:
        n = self.counts.sum()
        mask = self.counts > 0
        return float(np.sum(self.counts[mask] / n * np.abs(self.accuracy[mask] - self.confidence[mask])))


def calibration_from_confidences(conf, correct, bins: int = 10) -> CalibrationReport:
    """ECE with ``bins`` equal-width, right-closed bins on (0, 1]."""
    if bins < 1:
        raise ValueError("need at least one bin")
    conf = np.asarray(conf, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    edges = np.linspace(0.0, 1.0, bins + 1)
    # right-closed: conf == edge m+1 falls in bin m
    which = np.clip(np.searchsorted(edges[1:], conf, side="left"), 0, bins - 1)
    counts = np.bincount(which, minlength=bins)
    conf_sum = np.bincount(which, weights=conf, minlength=bins)
    acc_sum = np.bincount(which, weights=correct, minlength=bins)
    safe = np.maximum(counts, 1)
    mean_conf = np.where(counts > 0, conf_sum / safe, 0.0)
    mean_acc = np.where(counts > 0, acc_sum / safe, 0.0)
    report = CalibrationReport(edges, counts, mean_conf, mean_acc, 0.0)
    report.ece = report.recompute_ece()
    return report


def calibration(model: Model, ds: Dataset, T_eval: float = 1.0, bins: int = 10) -> CalibrationReport:
    ds = _nonempty(ds)
    z = model.logits(ds.features)
    p = softmax_t(z, T_eval).data
    return calibration_from_confidences(p.max(axis=1), p.argmax(axis=1) == ds.labels, bins)


# ---------------------------------------------------------------- gradients / boundary


def input_gradients(model: Model, x: np.ndarray, labels: np.ndarray, T: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample ``d ce_loss_t / d input`` (eval mode) and the logits."""
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        z = model.forward(xt)
        loss = ce_loss_t(z, labels, T, reduction="sum")
    tape.backward(loss)
    return xt.grad, z.data


def input_gradient_norms(model: Model, ds: Dataset, T: float, batch_size: int = 512):
    """L2 norms of per-sample input gradients, split into (correct, incorrect)."""
    ds = _nonempty(ds)
    correct, wrong = [], []
    for i in range(0, len(ds), batch_size):
        x = ds.features[i : i + batch_size]
        y = ds.labels[i : i + batch_size]
        g, z = input_gradients(model, x, y, T)
        norms = np.linalg.norm(g.reshape(len(g), -1), axis=1)
        ok = z.argmax(axis=1) == y
        correct.append(norms[ok])
        wrong.append(norms[~ok])
    return np.concatenate(correct), np.concatenate(wrong)


def boundary_distance(model: Model, x, label: int, eps_max: float, steps: int, T: float = 1.0) -> float | None:
    """Smallest grid epsilon in (0, eps_max] whose FGSM step flips the prediction.

    The perturbation direction ``sign(d loss / d x)`` is computed once at
    ``x``; the grid is ``eps_max * j / steps`` for ``j = 1..steps``.
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    x = np.asarray(x, dtype=np.float64)[None]
    g, z = input_gradients(model, x, np.array([label]), T)
    pred = int(z.argmax(axis=1)[0])
    direction = np.sign(g)
    eps = eps_max * np.arange(1, steps + 1) / steps
    batch = x + eps.reshape((-1,) + (1,) * (x.ndim - 1)) * direction
    flipped = np.flatnonzero(model.logits(batch).argmax(axis=1) != pred)
    return float(eps[flipped[0]]) if flipped.size else None


def pre_post_aggregation_delta(clients, pre_models, post_models, eval_sets, participants) -> dict:
    """Accuracy change per client when its current model is replaced.

    For participants the "pre" model is their freshly trained local model;
    for everyone else it is the previous global model. Returns
    ``{"participants": {k: delta}, "nonparticipants": {k: delta}}``.
    """
    out = {"participants": {}, "nonparticipants": {}}
    participants = set(participants)
    for k, pre, post, ds in zip(clients, pre_models, post_models, eval_sets):
        ds = _nonempty(ds)
        delta = accuracy(post, ds) - accuracy(pre, ds)
        out["participants" if k in participants else "nonparticipants"][k] = delta
    return out
