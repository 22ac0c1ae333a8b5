"""Synthetic lifelong-learning streams and the four verifiable
measurements: dynamic regret, forgetting, knowledge stability, and
sample-complexity scaling.

Streams are Gaussian-cluster classification problems with a task
schedule and optional per-step mean drift. The harness knows the true
class means at every step, so the per-step comparator is the exact
Bayes posterior; the learner never sees them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import prag
from .errors import InvalidParameter
from .numerics import make_rng


@dataclass
class StreamSpec:
    input_dim: int = 8
    classes: int = 2
    num_tasks: int = 1
    steps_per_task: int = 1000
    drift: float = 0.0
    separation: float = 6.0
    class_offset: float = 1.5
    noise_var: float = 1.0
    heldout_per_task: int = 200
    embed_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.num_tasks < 1 or self.steps_per_task < 1:
            raise InvalidParameter("tasks and steps_per_task must be >= 1")
        if self.drift < 0:
            raise InvalidParameter("drift must be >= 0")
        if self.num_tasks > self.input_dim:
            raise InvalidParameter("need input_dim >= num_tasks for "
                                   "distinct task centers")


@dataclass
class TaskStream:
    spec: StreamSpec
    xs: np.ndarray            # (T, d)
    labels: np.ndarray        # (T,)
    task_ids: np.ndarray      # (T,)
    means: np.ndarray         # (T, C, d) true class means per step
    path_length: float
    heldout_x: list[np.ndarray]
    heldout_y: list[np.ndarray]
    corpus: prag.Corpus
    schedule: list[tuple[int, int]]
    encoder_proj: np.ndarray | None = None  # projection the corpus lives in

    def __len__(self) -> int:
        return self.xs.shape[0]


def _task_class_means(spec: StreamSpec, task: int) -> np.ndarray:
    """Class means for one task: a task center on its own axis, classes
    offset along the next axis."""
    center = np.zeros(spec.input_dim)
    center[task % spec.input_dim] = spec.separation
    offset_axis = (task + 1) % spec.input_dim
    means = np.tile(center, (spec.classes, 1))
    for c in range(spec.classes):
        means[c, offset_axis] += spec.class_offset * (2 * c - (spec.classes - 1))
    return means


def gen_stream(spec: StreamSpec) -> TaskStream:
    """Reproducible stream with a per-step analytic comparator.

    Drift moves every class-mean coordinate by +-drift per step (random
    signs), so the comparator path length accumulates exactly
    drift * sqrt(classes * dim) per step.
    """
    rng = make_rng(spec.seed)
    total = spec.num_tasks * spec.steps_per_task
    d, c = spec.input_dim, spec.classes
    xs = np.zeros((total, d))
    labels = np.zeros(total, dtype=np.int64)
    task_ids = np.zeros(total, dtype=np.int64)
    means = np.zeros((total, c, d))
    sigma = float(np.sqrt(spec.noise_var))
    path_length = 0.0
    t = 0
    schedule = []
    for task in range(spec.num_tasks):
        schedule.append((task, spec.steps_per_task))
        current = _task_class_means(spec, task)
        for _ in range(spec.steps_per_task):
            label = int(rng.integers(c))
            xs[t] = current[label] + rng.normal(0.0, sigma, d)
            labels[t] = label
            task_ids[t] = task
            means[t] = current
            if spec.drift > 0:
                signs = rng.choice([-1.0, 1.0], size=(c, d))
                nxt = current + spec.drift * signs
                path_length += float(np.linalg.norm(nxt - current))
                current = nxt
            t += 1
    heldout_x, heldout_y = [], []
    for task in range(spec.num_tasks):
        base = _task_class_means(spec, task)
        hy = rng.integers(c, size=spec.heldout_per_task)
        hx = base[hy] + rng.normal(0.0, sigma, (spec.heldout_per_task, d))
        heldout_x.append(hx)
        heldout_y.append(hy.astype(np.int64))
    corpus, proj = _task_corpus(spec)
    return TaskStream(spec, xs, labels, task_ids, means, path_length,
                      heldout_x, heldout_y, corpus, schedule,
                      encoder_proj=proj)


def _task_corpus(spec: StreamSpec) -> tuple[prag.Corpus, np.ndarray]:
    """One orthonormal document per task, plus the matched query encoder.

    Documents are basis vectors of the embedding space (task descriptors
    with zero cross-task overlap); the encoder row for task i maps that
    task's input region onto its document's axis, so queries from a task
    retrieve that task's document under the size penalty."""
    enc_rng = make_rng(spec.seed ^ 0x00C0FFEE)
    proj = enc_rng.normal(0.0, 0.05, (spec.embed_dim, spec.input_dim))
    docs = []
    for task in range(spec.num_tasks):
        centroid = _task_class_means(spec, task).mean(axis=0)
        scale = float(centroid @ centroid)
        if scale > 0.25:
            proj[task] = centroid / scale
        emb = np.zeros(spec.embed_dim)
        emb[task] = 1.0
        docs.append(prag.Document(id=f"task-{task}", embedding=emb))
    return prag.Corpus(docs), proj


def shift_stream(seed: int, shift_at: int = 500, total: int = 600,
                 shift_to: float = 5.0, input_dim: int = 8,
                 class_offset: float = 1.5) -> TaskStream:
    """Stream with one abrupt input-distribution shift.

    Class means sit around the origin until ``shift_at``, then every
    coordinate of the center jumps to ``shift_to``. Used to probe how
    quickly the expansion signal reacts.
    """
    spec = StreamSpec(input_dim=input_dim, classes=2, num_tasks=1,
                      steps_per_task=total, seed=seed,
                      class_offset=class_offset)
    rng = make_rng(seed)
    xs = np.zeros((total, input_dim))
    labels = np.zeros(total, dtype=np.int64)
    means = np.zeros((total, 2, input_dim))
    for t in range(total):
        center = np.zeros(input_dim)
        if t >= shift_at:
            center += shift_to
        current = np.tile(center, (2, 1))
        current[0, 1] -= class_offset
        current[1, 1] += class_offset
        label = int(rng.integers(2))
        xs[t] = current[label] + rng.normal(0.0, 1.0, input_dim)
        labels[t] = label
        means[t] = current
    hy = rng.integers(2, size=spec.heldout_per_task)
    hx = means[-1][hy] + rng.normal(0.0, 1.0,
                                    (spec.heldout_per_task, input_dim))
    corpus, proj = _task_corpus(spec)
    return TaskStream(spec, xs, labels, np.zeros(total, dtype=np.int64),
                      means, 0.0, [hx], [hy.astype(np.int64)],
                      corpus, [(0, total)], encoder_proj=proj)


def bayes_proba(x: np.ndarray, class_means: np.ndarray,
                noise_var: float) -> np.ndarray:
    """Exact posterior for equal-prior Gaussian class conditionals."""
    d2 = ((class_means - x) ** 2).sum(axis=1)
    logp = -d2 / (2.0 * noise_var)
    p = np.exp(logp - logp.max())
    return p / p.sum()


@dataclass
class RegretLedger:
    per_step_loss: np.ndarray
    comparator_loss: np.ndarray
    cumulative_regret: np.ndarray
    path_length: float
    slope: float


def fit_loglog_slope(series: np.ndarray, tail_fraction: float = 0.8) -> float:
    """Least-squares slope of log(series) vs log(t) over the final
    ``tail_fraction`` of steps."""
    t = np.arange(1, series.size + 1, dtype=np.float64)
    start = int(series.size * (1.0 - tail_fraction))
    y = np.maximum(series[start:], 1e-12)
    lx = np.log(t[start:])
    ly = np.log(y)
    a = np.vstack([lx, np.ones_like(lx)]).T
    slope, _ = np.linalg.lstsq(a, ly, rcond=None)[0]
    return float(slope)


def measure_regret(system, stream: TaskStream, learn: bool = True) -> RegretLedger:
    """Prequential per-step loss against the exact Bayes comparator.

    ``system`` needs predict_proba(x) and, when learning, train_step.
    Passing the comparator itself (an object whose predict_proba returns
    the Bayes posterior) yields identically zero regret.
    """
    if len(stream) < 100:
        raise InvalidParameter("stream must have >= 100 steps")
    spec = stream.spec
    t_total = len(stream)
    losses = np.zeros(t_total)
    comp = np.zeros(t_total)
    for t in range(t_total):
        x, y = stream.xs[t], int(stream.labels[t])
        if learn and hasattr(system, "train_step"):
            rec = system.train_step(x, y)
            losses[t] = rec.loss_pred
        else:
            p = system.predict_proba(x)
            losses[t] = -np.log(max(float(p[y]), 1e-300))
        bp = bayes_proba(x, stream.means[t], spec.noise_var)
        comp[t] = -np.log(max(float(bp[y]), 1e-300))
    cumulative = np.cumsum(losses - comp)
    return RegretLedger(
        per_step_loss=losses,
        comparator_loss=comp,
        cumulative_regret=cumulative,
        path_length=stream.path_length,
        slope=fit_loglog_slope(np.maximum(cumulative, 1e-12)),
    )


class BayesComparator:
    """Oracle predictor wrapping the stream's true means; stateful over
    steps so it can be plugged in wherever a system is expected."""

    def __init__(self, stream: TaskStream):
        self.stream = stream
        self.t = 0

    def predict_proba(self, x) -> np.ndarray:
        p = bayes_proba(np.asarray(x), self.stream.means[self.t],
                        self.stream.spec.noise_var)
        self.t = min(self.t + 1, len(self.stream) - 1)
        return p


@dataclass
class ForgettingReport:
    accuracy_matrix: np.ndarray  # A[i][j]: accuracy on task i after task j
    forgetting: float


def forgetting_from_matrix(matrix: np.ndarray) -> float:
    """Average positive drop from each earlier task's best historical
    accuracy to its final accuracy."""
    s = matrix.shape[0]
    if s < 2:
        return 0.0
    drops = []
    for i in range(s - 1):
        best = matrix[i, i:].max()
        drops.append(max(0.0, float(best - matrix[i, s - 1])))
    return float(np.mean(drops))


def measure_forgetting(system, stream: TaskStream) -> ForgettingReport:
    """Train through the schedule, evaluating every task's held-out set
    after each task finishes."""
    spec = stream.spec
    s = spec.num_tasks
    if s < 2:
        raise InvalidParameter("need >= 2 tasks to measure forgetting")
    matrix = np.zeros((s, s))
    t = 0
    for j, (task, duration) in enumerate(stream.schedule):
        for _ in range(duration):
            system.train_step(stream.xs[t], int(stream.labels[t]))
            t += 1
        for i in range(s):
            matrix[i, j] = system.accuracy(stream.heldout_x[i],
                                           stream.heldout_y[i])
    return ForgettingReport(matrix, forgetting_from_matrix(matrix))


def task_dataset(seed: int, n_train: int, n_test: int, input_dim: int = 8,
                 classes: int = 2, class_offset: float = 1.0,
                 noise_var: float = 1.0):
    """I.i.d. train/test draws from one fixed Gaussian classification
    task, for offline fitting experiments. Class means sit at
    +-class_offset along the first axis; remaining axes are noise."""
    rng = make_rng(seed)
    means = np.zeros((classes, input_dim))
    for c in range(classes):
        means[c, 0] = class_offset * (2 * c - (classes - 1))
    sigma = float(np.sqrt(noise_var))

    def draw(n):
        ys = rng.integers(classes, size=n)
        xs = means[ys] + rng.normal(0.0, sigma, (n, input_dim))
        return xs, ys.astype(np.int64)

    train_x, train_y = draw(n_train)
    test_x, test_y = draw(n_test)
    return train_x, train_y, test_x, test_y


@dataclass
class SweepTask:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    class_means: np.ndarray
    noise_var: float = 1.0


def default_sweep_task(seed: int, n: int, input_dim: int = 48,
                       classes: int = 3, class_offset: float = 1.0,
                       n_test: int = 2500) -> SweepTask:
    """The calibrated sample-complexity task: enough nuisance dimensions
    that the excess error sits in its 1/sqrt(n) regime across the
    measured epsilon range."""
    train_x, train_y, test_x, test_y = task_dataset(
        seed, n, n_test, input_dim=input_dim, classes=classes,
        class_offset=class_offset)
    means = np.zeros((classes, input_dim))
    for c in range(classes):
        means[c, 0] = class_offset * (2 * c - (classes - 1))
    return SweepTask(train_x, train_y, test_x, test_y, means)


def _bayes_error(task: SweepTask) -> float:
    d2 = ((task.test_x[:, None, :] - task.class_means[None, :, :]) ** 2
          ).sum(axis=2)
    pred = d2.argmin(axis=1)
    return float((pred != task.test_y).mean())


def excess_error_trial(system, task: SweepTask, lr0: float = 0.4) -> float:
    """Single-pass online SGD with step lr0/sqrt(t+1), then the excess
    test error of the learner over the exact Bayes rule on the same
    test set."""
    n = task.train_x.shape[0]
    for t in range(n):
        system.fit_batch(task.train_x[t:t + 1], task.train_y[t:t + 1],
                         epochs=1, lr=lr0 / np.sqrt(t + 1.0))
    model_err = 1.0 - system.accuracy(task.test_x, task.test_y)
    return model_err - _bayes_error(task)


@dataclass
class SweepRow:
    epsilon: float
    n: int


@dataclass
class SweepResult:
    rows: list[SweepRow]
    slope: float


def _meets_epsilon(system_factory, stream_factory, n: int, seeds: int,
                   epsilon: float, delta: float, lr0: float) -> bool:
    """Success iff the excess error is <= epsilon in >= (1-delta) of the
    seeded trials."""
    need = int(np.ceil((1.0 - delta) * seeds))
    successes = 0
    for s in range(seeds):
        task = stream_factory(s, n)
        system = system_factory(s)
        if excess_error_trial(system, task, lr0=lr0) <= epsilon:
            successes += 1
        if successes >= need:
            return True
        if successes + (seeds - s - 1) < need:
            return False
    return successes >= need


def sample_complexity_sweep(system_factory, stream_factory, epsilons,
                            delta: float = 0.1, seeds: int = 10,
                            n_low: int = 16, n_high: int = 8192,
                            lr0: float = 0.4) -> SweepResult:
    """Binary-search the smallest training-set size meeting each epsilon.

    system_factory(seed) builds a fresh learner; stream_factory(seed, n)
    returns a SweepTask. Reports the fitted slope of log n(eps) vs
    log(1/eps); a 1/eps^2 dependence shows up as slope 2.
    """
    for eps in epsilons:
        if not 0.0 < eps < 0.5:
            raise InvalidParameter("epsilon values must lie in (0, 0.5)")
    rows = []
    for eps in sorted(epsilons, reverse=True):
        lo, hi = n_low, n_high
        if not _meets_epsilon(system_factory, stream_factory, hi, seeds,
                              eps, delta, lr0):
            rows.append(SweepRow(eps, hi))
            continue
        while lo < hi:
            mid = (lo + hi) // 2
            if _meets_epsilon(system_factory, stream_factory, mid, seeds,
                              eps, delta, lr0):
                hi = mid
            else:
                lo = mid + 1
        rows.append(SweepRow(eps, lo))
    log_inv_eps = np.log([1.0 / r.epsilon for r in rows])
    log_n = np.log([float(r.n) for r in rows])
    a = np.vstack([log_inv_eps, np.ones_like(log_inv_eps)]).T
    slope, _ = np.linalg.lstsq(a, log_n, rcond=None)[0]
    return SweepResult(rows, float(slope))


def run_stream(system, stream: TaskStream, log_writer=None) -> dict:
    """Full training pass used by the CLI: prequential records, regret
    vs the comparator, stability, and a forgetting matrix when the
    schedule has several tasks."""
    spec = stream.spec
    losses = np.zeros(len(stream))
    comp = np.zeros(len(stream))
    stabilities = []
    s = spec.num_tasks
    matrix = np.zeros((s, s)) if s >= 2 else None
    t = 0
    for j, (task, duration) in enumerate(stream.schedule):
        for _ in range(duration):
            rec = system.train_step(stream.xs[t], int(stream.labels[t]))
            losses[t] = rec.loss_pred
            bp = bayes_proba(stream.xs[t], stream.means[t], spec.noise_var)
            comp[t] = -np.log(max(float(bp[int(stream.labels[t])]), 1e-300))
            if rec.stability is not None:
                stabilities.append(rec.stability)
            if log_writer is not None:
                log_writer(rec)
            t += 1
        if matrix is not None:
            for i in range(s):
                matrix[i, j] = system.accuracy(stream.heldout_x[i],
                                               stream.heldout_y[i])
    cumulative = np.cumsum(losses - comp)
    final_acc = float(np.mean([
        system.accuracy(stream.heldout_x[i], stream.heldout_y[i])
        for i in range(s)
    ]))
    return {
        "per_step_loss": losses,
        "comparator_loss": comp,
        "cumulative_regret": cumulative,
        "slope": fit_loglog_slope(np.maximum(cumulative, 1e-12)),
        "forgetting_matrix": matrix,
        "forgetting": forgetting_from_matrix(matrix) if matrix is not None else 0.0,
        "stability_mean": float(np.mean(stabilities)) if stabilities else 0.0,
        "path_length": stream.path_length,
        "final_accuracy": final_acc,
    }
