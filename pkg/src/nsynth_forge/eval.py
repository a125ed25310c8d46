"""Evaluation instruments: a pitch/quality classifier, a linear pitch probe
on embeddings, pitch-to-pitch embedding correlation and octave confusion."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import log_softmax

from .autodiff import (Adam, Tensor, dense, no_grad, read_checkpoint, sigmoid_ce, softmax_ce,
                       write_checkpoint)
from .baseline import BaselineConfig, ConvEncoderStack, to_grid
from .dsp import MAX_PITCH, MIN_PITCH
from .spectral import StftConfig, log_power_magnitude, stft

N_PITCHES = MAX_PITCH - MIN_PITCH + 1
N_QUALITIES = 10
QUALITY_DEFINITION = "per-tag mean binary accuracy at threshold 0.5"


@dataclass
class ClassifierConfig:
    backbone: BaselineConfig = field(default_factory=BaselineConfig)
    pitch_classes: int = N_PITCHES
    n_qualities: int = N_QUALITIES

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BaselineConfig(**self.backbone)
        if self.backbone.representation != "magnitude":
            raise ValueError("the classifier reads log-magnitude grids only")


class PitchQualityClassifier:
    """Baseline encoder stack (no bottleneck) with an 88-way pitch head and
    10 independent quality logits. Heads start at zero so the initial loss is
    ln(88) + 10 ln(2)."""

    def __init__(self, cfg: ClassifierConfig | None = None, seed: int = 0, dtype=np.float32):
        self.cfg = cfg or ClassifierConfig()
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.bn = {}
        rng = np.random.default_rng(seed)
        b = self.cfg.backbone
        self.backbone = ConvEncoderStack(b, self.params, self.bn, rng, "cls", self.dtype)
        for head, n in (("pitch", self.cfg.pitch_classes), ("quality", self.cfg.n_qualities)):
            self.params[f"head.{head}.w"] = Tensor(np.zeros((b.flat_dim, n), self.dtype), requires_grad=True)
            self.params[f"head.{head}.b"] = Tensor(np.zeros(n, self.dtype), requires_grad=True)

    def features(self, audio) -> np.ndarray:
        """Log-magnitude input grid (1, H, W) for one waveform."""
        b = self.cfg.backbone
        M = log_power_magnitude(stft(audio, StftConfig(b.fft_size, b.hop_size)))
        return to_grid(M.values, b.input_hw)[None].astype(self.dtype)

    def logits(self, grids, training: bool = False) -> tuple[Tensor, Tensor]:
        h = self.backbone(Tensor(np.asarray(grids, dtype=self.dtype)), training)
        p = self.params
        return dense(h, p["head.pitch.w"], p["head.pitch.b"]), dense(h, p["head.quality.w"], p["head.quality.b"])

    def loss(self, grids, pitches, qualities, training: bool = True) -> Tensor:
        lp, lq = self.logits(grids, training)
        labels = np.asarray(pitches) - MIN_PITCH
        return softmax_ce(lp, labels) + sigmoid_ce(lq, np.asarray(qualities, dtype=self.dtype)) * self.cfg.n_qualities

    def predict(self, grids, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
        """MIDI pitch predictions and binary quality decisions."""
        grids = np.asarray(grids, dtype=self.dtype)
        pitches, quals = [], []
        with no_grad():
            for i in range(0, len(grids), batch_size):
                lp, lq = self.logits(grids[i: i + batch_size], training=False)
                pitches.append(np.argmax(lp.data, axis=1) + MIN_PITCH)
                quals.append((lq.data > 0).astype(np.int64))
        return np.concatenate(pitches), np.concatenate(quals)

    def config_dict(self) -> dict:
        return {"kind": "classifier", "config": asdict(self.cfg), "seed": self.seed}

    def save(self, path) -> None:
        arrays = {k: v.data for k, v in self.params.items()}
        for k, s in self.bn.items():
            arrays[f"bn.{k}.mean"] = s.mean
            arrays[f"bn.{k}.var"] = s.var
        write_checkpoint(path, arrays, self.config_dict())

    @classmethod
    def load(cls, path, dtype=np.float32) -> "PitchQualityClassifier":
        tensors, cfg = read_checkpoint(path)
        if not cfg or cfg.get("kind") != "classifier":
            raise ValueError(f"{path} is not a classifier checkpoint")
        model = cls(ClassifierConfig(**cfg["config"]), seed=cfg.get("seed", 0), dtype=dtype)
        for k, v in tensors.items():
            if k.startswith("bn."):
                name, stat = k[3:].rsplit(".", 1)
                getattr(model.bn[name], stat)[...] = v
            else:
                model.params[k].data = v.astype(model.dtype)
        return model


def train_classifier(grids, pitches, qualities, cfg: ClassifierConfig | None = None, steps: int = 200,
                     batch_size: int = 16, lr: float = 1e-3, seed: int = 0, log=None,
                     log_every: int = 50) -> tuple[PitchQualityClassifier, list[float]]:
    """Joint softmax-CE (pitch) + summed sigmoid-CE (qualities) with Adam on
    shuffled minibatches. ``grids`` are classifier input grids (N, 1, H, W)."""
    grids = np.asarray(grids)
    pitches = np.asarray(pitches)
    qualities = np.asarray(qualities)
    if len(grids) == 0:
        raise ValueError("empty training set")
    if not (len(grids) == len(pitches) == len(qualities)):
        raise ValueError("grids, pitches and qualities differ in length")
    model = PitchQualityClassifier(cfg, seed=seed)
    opt = Adam(model.params, lr=lr)
    rng = np.random.default_rng(seed)
    bs = max(2, min(batch_size, len(grids)))
    order, cursor, history = rng.permutation(len(grids)), 0, []
    for step in range(steps):
        if cursor + bs > len(order):
            order, cursor = rng.permutation(len(grids)), 0
        idx = order[cursor: cursor + bs]
        cursor += bs
        opt.zero_grad()
        loss = model.loss(grids[idx], pitches[idx], qualities[idx], training=True)
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite classifier loss at step {step}")
        loss.backward()
        opt.step()
        history.append(value)
        if log is not None and (step + 1) % log_every == 0:
            log(f"classifier step {step + 1}/{steps} loss {value:.4f}")
    return model, history


# reports
@dataclass
class EvalReport:
    pitch_accuracy: float
    quality_accuracy: float
    n_examples: int
    confusion: np.ndarray
    quality_definition: str = QUALITY_DEFINITION

    def __eq__(self, other):
        return (self.pitch_accuracy == other.pitch_accuracy and self.quality_accuracy == other.quality_accuracy
                and self.n_examples == other.n_examples and np.array_equal(self.confusion, other.confusion))

    def lines(self, prefix: str = "") -> list[str]:
        return [f"{prefix}pitch_accuracy={self.pitch_accuracy:.4f}",
                f"{prefix}quality_accuracy={self.quality_accuracy:.4f}",
                f"{prefix}n_examples={self.n_examples}",
                f"{prefix}quality_definition={self.quality_definition}"]


class EvalAccumulator:
    """Integer counts, so streaming and one-shot evaluation agree exactly."""

    def __init__(self):
        self.n = 0
        self.pitch_correct = 0
        self.tag_correct = 0
        self.confusion = np.zeros((N_PITCHES, N_PITCHES), dtype=np.int64)

    def update(self, pred_pitch, true_pitch, pred_q, true_q) -> None:
        pred_pitch, true_pitch = np.atleast_1d(pred_pitch), np.atleast_1d(true_pitch)
        pred_q, true_q = np.atleast_2d(pred_q), np.atleast_2d(true_q)
        if not (len(pred_pitch) == len(true_pitch) == len(pred_q) == len(true_q)):
            raise ValueError("prediction and label batches differ in length")
        self.n += len(true_pitch)
        self.pitch_correct += int(np.sum(pred_pitch == true_pitch))
        self.tag_correct += int(np.sum(pred_q == true_q))
        np.add.at(self.confusion, (true_pitch - MIN_PITCH, pred_pitch - MIN_PITCH), 1)

    def report(self) -> EvalReport:
        if self.n == 0:
            raise ValueError("no examples evaluated")
        return EvalReport(100.0 * self.pitch_correct / self.n, 100.0 * self.tag_correct / (self.n * N_QUALITIES),
                          self.n, self.confusion.copy())


def evaluate(classifier: PitchQualityClassifier, grids, pitches, qualities, batch_size: int = 32) -> EvalReport:
    acc = EvalAccumulator()
    grids = np.asarray(grids)
    for i in range(0, len(grids), batch_size):
        pp, pq = classifier.predict(grids[i: i + batch_size], batch_size)
        acc.update(pp, np.asarray(pitches)[i: i + batch_size], pq, np.asarray(qualities)[i: i + batch_size])
    return acc.report()


def evaluate_reconstructions(classifier: PitchQualityClassifier, original: Sequence[np.ndarray],
                             reconstructed: Sequence[np.ndarray], pitches, qualities) -> tuple[EvalReport, EvalReport]:
    """Score originals and their reconstructions against the same labels."""
    if len(original) != len(reconstructed) or len(original) != len(pitches) or len(pitches) != len(qualities):
        raise ValueError("original, reconstructed and labels must pair one to one")
    g_orig = np.stack([classifier.features(x) for x in original])
    g_rec = np.stack([classifier.features(x) for x in reconstructed])
    return evaluate(classifier, g_orig, pitches, qualities), evaluate(classifier, g_rec, pitches, qualities)


# linear probe
@dataclass
class ProbeResult:
    accuracy: float  # percent
    predictions: np.ndarray
    labels: np.ndarray
    n_train: int
    n_test: int
    converged: bool
    grad_norm: float
    tolerance: float


def _probe_objective(theta, X, Y, l2, n_cls):
    d = X.shape[1]
    W = theta[: d * n_cls].reshape(d, n_cls)
    b = theta[d * n_cls:]
    logp = log_softmax(X @ W + b, axis=1)
    n = len(X)
    loss = -np.sum(logp * Y) / n + 0.5 * l2 * np.sum(W * W)
    g = (np.exp(logp) - Y) / n
    return loss, np.concatenate([(X.T @ g + l2 * W).ravel(), g.sum(axis=0)])


def linear_pitch_probe(embeddings, pitches, held_out_n: int = 4096, seed: int = 0, l2: float = 1e-4,
                       tol: float = 1e-6, max_iter: int = 5000, n_train: int | None = None) -> ProbeResult:
    """Multinomial logistic regression on frozen embeddings.

    A random ``held_out_n`` examples (at most a quarter of the data) are held
    out; features are standardized on the training split. The convex objective
    (mean cross-entropy + l2/2 |W|^2) is minimized with L-BFGS until the
    gradient norm falls below ``tol``.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(pitches)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("embeddings must be (N, D) with one pitch per row")
    if len(np.unique(y)) < 2:
        raise ValueError("probe needs at least two pitch classes")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(y))
    n_test = min(held_out_n, len(y) // 4) if len(y) <= 4 * held_out_n else held_out_n
    n_test = max(n_test, 1)
    test, train = perm[:n_test], perm[n_test:]
    if n_train is not None:
        train = train[:n_train]
    classes = np.unique(y[train])
    if len(classes) < 2:
        raise ValueError("training split holds a single pitch class")
    mu, sd = X[train].mean(axis=0), X[train].std(axis=0)
    sd[sd == 0] = 1.0
    Xtr, Xte = (X[train] - mu) / sd, (X[test] - mu) / sd
    Y = (y[train][:, None] == classes[None]).astype(np.float64)
    d, k = X.shape[1], len(classes)
    res = minimize(_probe_objective, np.zeros(d * k + k), args=(Xtr, Y, l2, k), jac=True, method="L-BFGS-B",
                   options={"gtol": tol, "ftol": 0.0, "maxiter": max_iter, "maxcor": 20})
    W, b = res.x[: d * k].reshape(d, k), res.x[d * k:]
    pred = classes[np.argmax(Xte @ W + b, axis=1)]
    _, grad = _probe_objective(res.x, Xtr, Y, l2, k)
    gnorm = float(np.max(np.abs(grad)))
    return ProbeResult(100.0 * float(np.mean(pred == y[test])), pred, y[test], len(train), len(test),
                       gnorm <= tol, gnorm, tol)


# embedding correlation
def embedding_correlation(embeddings: Mapping[int, np.ndarray]) -> np.ndarray:
    """88x88 Pearson correlation between flattened embeddings of each pitch pair.

    Rows and columns for pitches without an embedding are NaN.
    """
    if not embeddings:
        raise ValueError("no embeddings")
    pitches = sorted(embeddings)
    for p in pitches:
        if not MIN_PITCH <= p <= MAX_PITCH:
            raise ValueError(f"pitch {p} outside [{MIN_PITCH}, {MAX_PITCH}]")
    flat = np.stack([np.asarray(embeddings[p], dtype=np.float64).ravel() for p in pitches])
    centered = flat - flat.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.sum(centered ** 2, axis=1))
    if np.any(norms == 0):
        bad = [pitches[i] for i in np.flatnonzero(norms == 0)]
        raise ValueError(f"constant embedding for pitch(es) {bad}")
    unit = centered / norms[:, None]
    corr = unit @ unit.T
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    out = np.full((N_PITCHES, N_PITCHES), np.nan)
    idx = np.asarray(pitches) - MIN_PITCH
    out[np.ix_(idx, idx)] = corr
    return out


# confusion
@dataclass
class ConfusionResult:
    matrix: np.ndarray  # rows true pitch, columns predicted
    octave_error_rate: float  # fraction of errors off by exactly 12
    n_errors: int


def confusion_matrix(predictions, labels) -> ConfusionResult:
    pred, lab = np.asarray(predictions, dtype=np.int64), np.asarray(labels, dtype=np.int64)
    if pred.shape != lab.shape:
        raise ValueError(f"{pred.size} predictions for {lab.size} labels")
    for name, v in (("prediction", pred), ("label", lab)):
        if v.size and (v.min() < MIN_PITCH or v.max() > MAX_PITCH):
            raise ValueError(f"{name} pitch outside [{MIN_PITCH}, {MAX_PITCH}]")
    m = np.zeros((N_PITCHES, N_PITCHES), dtype=np.int64)
    np.add.at(m, (lab - MIN_PITCH, pred - MIN_PITCH), 1)
    wrong = pred != lab
    n_err = int(wrong.sum())
    rate = float(np.mean(np.abs(pred[wrong] - lab[wrong]) == 12)) if n_err else 0.0
    return ConfusionResult(m, rate, n_err)


def chance_octave_rate(labels) -> float:
    """Octave share among errors if predictions were drawn independently from
    the label distribution: P(|a - b| = 12) / P(a != b)."""
    lab = np.asarray(labels, dtype=np.int64)
    p = np.bincount(lab - MIN_PITCH, minlength=N_PITCHES) / lab.size
    octave = 2.0 * float(np.sum(p[12:] * p[:-12]))
    differ = 1.0 - float(np.sum(p * p))
    return octave / differ if differ > 0 else 0.0


# writers
def write_report_text(path, sections: Mapping[str, EvalReport | Mapping]) -> None:
    lines = []
    for name, rep in sections.items():
        lines.append(f"[{name}]")
        if isinstance(rep, EvalReport):
            lines += [f"  pitch accuracy   {rep.pitch_accuracy:7.3f} %",
                      f"  quality accuracy {rep.quality_accuracy:7.3f} %  ({rep.quality_definition})",
                      f"  examples         {rep.n_examples}"]
        else:
            lines += [f"  {k} {v}" for k, v in rep.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def write_key_values(path, items: Iterable[tuple[str, object]]) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in items))


def write_confusion_csv(path, matrix: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["true\\pred"] + [str(p) for p in range(MIN_PITCH, MAX_PITCH + 1)])
        for i, row in enumerate(matrix):
            w.writerow([str(MIN_PITCH + i)] + [str(int(v)) for v in row])
