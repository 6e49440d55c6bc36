"""Born-machine likelihood, gradient-descent training and the GTN classifier.

The model probability of a sample is ``P(x) = <x|psi>^2 / <psi|psi>`` and
the loss is the negative mean log-likelihood over a sample set.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ParameterError, TrainingError
from .mps import Mps, States, _left_qr, _right_qr, canonicalize, log_amplitudes, log_overlap, right_canonicalize, stack_states


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 1e-2
    epochs: int = 500
    batch_size: int | str = "full"
    seed: int = 0
    renormalize_every_step: bool = True
    early_stop_delta: float = 1e-6

    def __post_init__(self):
        if not self.eta >= 0:
            raise ParameterError(f"eta must be non-negative, got {self.eta}")
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        b = self.batch_size
        if b != "full" and (isinstance(b, (str, bool)) or not isinstance(b, (int, np.integer)) or b < 1):
            raise ParameterError(f"batch_size must be 'full' or a positive integer, got {self.batch_size!r}")
        if self.early_stop_delta < 0:
            raise ParameterError("early_stop_delta must be non-negative")


@dataclass
class LossTrace:
    """Per-epoch NLL on the training set, and on the test set when one is given."""

    train: list[float] = field(default_factory=list)
    test: list[float] | None = None
    initial_train: float = math.nan
    initial_test: float | None = None

    def __len__(self) -> int:
        return len(self.train)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_nll", "test_nll"])
        for i, tr in enumerate(self.train):
            te = "" if self.test is None else repr(float(self.test[i]))
            w.writerow([i + 1, repr(float(tr)), te])
        return buf.getvalue()

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write(self.to_csv())


def _check_dims(psi: Mps, x: np.ndarray) -> None:
    if x.shape[0] == 0:
        raise ParameterError("empty sample set")
    if x.shape[1:] != (psi.M, psi.d):
        raise ParameterError(f"samples are (M={x.shape[1]}, d={x.shape[2]}), Mps is (M={psi.M}, d={psi.d})")


def log_probabilities(psi: Mps, states: States) -> np.ndarray:
    """``ln P(x_n)`` per sample; ``-inf`` where the amplitude vanishes."""
    x = stack_states(states)
    _check_dims(psi, x)
    _, logs = log_amplitudes(psi, x)
    return 2.0 * logs - log_overlap(psi, psi).log_mag


def nll(psi: Mps, states: States) -> float:
    """Negative mean log-likelihood; ``inf`` if any sample has zero amplitude."""
    lp = log_probabilities(psi, states)
    if np.any(np.isneginf(lp)):
        return math.inf
    return float(-np.mean(lp))


def mean_probability(psi: Mps, states: States) -> float:
    """Geometric mean of the sample probabilities, ``exp(-nll)``."""
    return math.exp(-nll(psi, states))


def _sample_envs(psi: Mps, x: np.ndarray, upto: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalized left env before site ``upto`` and right env after it."""
    n = x.shape[0]
    left = np.ones((n, 1))
    for m in range(upto):
        left = _push_left(left, x[:, m], psi.sites[m])
    right = np.ones((n, 1))
    for m in range(psi.M - 1, upto, -1):
        right = _push_right(right, x[:, m], psi.sites[m])
    return left, right


def _normalize_rows(v: np.ndarray) -> np.ndarray:
    z = np.linalg.norm(v, axis=1, keepdims=True)
    return np.divide(v, z, out=np.zeros_like(v), where=z > 0)


def _push_left(left: np.ndarray, phi: np.ndarray, a: np.ndarray) -> np.ndarray:
    d, l, r = a.shape
    t = (phi[:, :, None] * left[:, None, :]).reshape(-1, d * l)
    return _normalize_rows(t @ a.reshape(d * l, r))


def _push_right(right: np.ndarray, phi: np.ndarray, a: np.ndarray) -> np.ndarray:
    d, l, r = a.shape
    t = (phi[:, :, None] * right[:, None, :]).reshape(-1, d * r)
    return _normalize_rows(t @ a.transpose(0, 2, 1).reshape(d * r, l))


def _norm_envs(psi: Mps, upto: int) -> tuple[np.ndarray, np.ndarray]:
    left = np.ones((1, 1))
    for a in psi.sites[:upto]:
        left = np.tensordot(np.tensordot(left, a, axes=([0], [1])), a, axes=([1, 0], [0, 1]))
        left /= np.linalg.norm(left)
    right = np.ones((1, 1))
    for a in psi.sites[:upto:-1]:
        right = np.tensordot(np.tensordot(a, right, axes=([2], [0])), a, axes=([0, 2], [0, 2]))
        right /= np.linalg.norm(right)
    return left, right


def nll_gradient(psi: Mps, states: States, m: int) -> np.ndarray:
    """Gradient of the NLL with respect to site tensor ``m``.

    Works in any gauge. Both terms are ratios of an environment to the
    quantity it builds, so the normalized environments used here give the
    exact gradient with no exponential scale factors.
    """
    x = stack_states(states)
    _check_dims(psi, x)
    if not 0 <= m < psi.M:
        raise ParameterError(f"site index {m} out of range for M={psi.M}")
    a = psi.sites[m]
    d, l, r = a.shape
    left, right = _sample_envs(psi, x, m)
    t = (x[:, m, :, None] * left[:, None, :]).reshape(-1, d * l)
    proj = np.sum((t @ a.reshape(d * l, r)) * right, axis=1)
    zero = np.flatnonzero(proj == 0)
    if zero.size:
        raise NumericError(f"sample {zero[0]} has zero amplitude", sample=int(zero[0]))
    data = ((t / proj[:, None]).T @ right).reshape(d, l, r)

    lz, rz = _norm_envs(psi, m)
    ez = np.einsum("ac,scd,bd->sab", lz, a, rz)
    return 2.0 * ez / np.sum(a * ez) - (2.0 / x.shape[0]) * data


def _site_step(a: np.ndarray, t: np.ndarray, right: np.ndarray, eta: float, renorm: bool) -> np.ndarray:
    """One gradient step on the orthogonality center, where ``<psi|psi> = ||a||^2``."""
    d, l, r = a.shape
    proj = np.sum((t @ a.reshape(d * l, r)) * right, axis=1)
    zero = np.flatnonzero(proj == 0)
    if zero.size:
        raise NumericError(f"training sample has zero amplitude", sample=int(zero[0]))
    data = ((t / proj[:, None]).T @ right).reshape(d, l, r)
    grad = 2.0 * a / np.sum(a * a) - (2.0 / t.shape[0]) * data
    a = a - eta * grad
    if renorm:
        a = a / np.linalg.norm(a)
    return a


def train(
    initial: Mps,
    train_states: States,
    test_states: States | None = None,
    cfg: TrainConfig = TrainConfig(),
) -> tuple[Mps, LossTrace]:
    """Site-sweep gradient descent on the NLL.

    One epoch sweeps sites ``0..M-1`` and then ``M-1..0``, moving the
    orthogonality center with each update so the norm is always the
    center's norm. Stops early once the epoch-to-epoch change in training
    NLL falls below ``cfg.early_stop_delta``. The returned state is
    canonical with its center on the last site.

    Raises:
        TrainingError: a training sample has zero amplitude, or the NLL
            diverges (non-finite, or risen by more than ten times the
            magnitude of its starting value).
    """
    x = stack_states(train_states)
    _check_dims(initial, x)
    xt = None
    if test_states is not None:
        xt = stack_states(test_states)
        _check_dims(initial, xt)
    n, M = x.shape[0], initial.M
    rng = np.random.default_rng(cfg.seed)
    batch = n if cfg.batch_size == "full" else min(int(cfg.batch_size), n)

    # losses are measured on the state as given: regauging can turn exact zeros into round-off
    trace = LossTrace(test=None if xt is None else [])
    trace.initial_train = nll(initial, x)
    if xt is not None:
        trace.initial_test = nll(initial, xt)
    if not math.isfinite(trace.initial_train):
        raise TrainingError("initial state gives a training sample zero amplitude", trace)

    sites = list(right_canonicalize(initial).sites)
    lefts = [np.ones((n, 1))] + [None] * M
    rights = [None] * M + [np.ones((n, 1))]
    for m in range(M - 1, -1, -1):
        rights[m] = _push_right(rights[m + 1], x[:, m], sites[m])

    order = np.arange(n)
    cursor = n

    def next_batch():
        nonlocal order, cursor
        if batch == n:
            return slice(None)
        if cursor + batch > n:
            order, cursor = rng.permutation(n), 0
        cursor += batch
        return order[cursor - batch : cursor]

    def step(m):
        idx = next_batch()
        d, l, _ = sites[m].shape
        t = (x[idx, m, :, None] * lefts[m][idx, None, :]).reshape(-1, d * l)
        try:
            sites[m] = _site_step(sites[m], t, rights[m + 1][idx], cfg.eta, cfg.renormalize_every_step)
        except NumericError as exc:
            raise TrainingError(f"site {m}: {exc}", trace) from exc

    prev = trace.initial_train
    limit = prev + 10.0 * max(abs(prev), 1.0)
    for _ in range(cfg.epochs):
        for m in range(M):
            step(m)
            if m < M - 1:
                q, carry = _left_qr(sites[m])
                sites[m] = q
                sites[m + 1] = np.tensordot(carry, sites[m + 1], axes=([1], [1])).transpose(1, 0, 2)
                lefts[m + 1] = _push_left(lefts[m], x[:, m], q)
        for m in range(M - 1, -1, -1):
            step(m)
            if m > 0:
                carry, q = _right_qr(sites[m])
                sites[m] = q
                sites[m - 1] = np.tensordot(sites[m - 1], carry, axes=([2], [0]))
                rights[m] = _push_right(rights[m + 1], x[:, m], q)
        current = Mps(sites, canonical_center=0)
        loss = nll(current, x)
        trace.train.append(loss)
        if xt is not None:
            trace.test.append(nll(current, xt))
        if not math.isfinite(loss) or loss > limit:
            raise TrainingError(f"training diverged at epoch {len(trace)}: NLL {loss}", trace)
        if abs(prev - loss) < cfg.early_stop_delta:
            break
        prev = loss
    return canonicalize(Mps(sites)), trace


@dataclass(frozen=True, eq=False)
class GtncModel:
    """One generative model per class; class ``g`` is ``models[g]``."""

    models: tuple

    def __post_init__(self):
        models = tuple(self.models)
        if not models:
            raise ParameterError("a classifier needs at least one class model")
        shapes = {(p.M, p.d) for p in models}
        if len(shapes) != 1:
            raise ParameterError(f"class models disagree in (M, d): {sorted(shapes)}")
        object.__setattr__(self, "models", models)

    @property
    def G(self) -> int:
        return len(self.models)


def class_log_scores(model: GtncModel, states: States) -> np.ndarray:
    """``ln |<y|psi_g>| - ln ||psi_g||`` with shape ``(N, G)``."""
    x = stack_states(states)
    cols = []
    for psi in model.models:
        _check_dims(psi, x)
        _, logs = log_amplitudes(psi, x)
        cols.append(logs - 0.5 * log_overlap(psi, psi).log_mag)
    return np.stack(cols, axis=1)


def classify_batch(model: GtncModel, states: States) -> np.ndarray:
    # argmax takes the first maximum, so ties go to the smaller label
    return np.argmax(class_log_scores(model, states), axis=1)


def classify(model: GtncModel, y) -> int:
    return int(classify_batch(model, y)[0])


def accuracy(model: GtncModel, states: States, labels) -> float:
    labels = np.asarray(labels)
    pred = classify_batch(model, states)
    if pred.size == 0:
        raise ParameterError("empty sample set")
    if labels.shape != pred.shape:
        raise ParameterError(f"{pred.size} samples but {labels.size} labels")
    return float(np.mean(pred == labels))
