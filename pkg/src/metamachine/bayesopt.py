"""Asynchronous Bayesian optimization over a latent box.

A Matern-5/2 ARD Gaussian process is the surrogate and expected improvement
the acquisition. Points still under evaluation suppress the acquisition
around them through hard local penalizers whose radius comes from an
estimated Lipschitz constant of the posterior mean.

Workers are simulated on a virtual clock by default, which keeps runs
bit-reproducible: every evaluation gets a seeded duration and results are
reported in completion order.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.special import ndtr

log = logging.getLogger(__name__)

PENDING = "pending"
DONE = "done"
INVALID = "invalid"

SQRT5 = math.sqrt(5.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Gaussian process
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GPHyper:
    """Kernel hyperparameters; variances are in units of the standardized targets."""

    lengthscales: np.ndarray
    signal_var: float = 1.0
    noise_var: float = 1e-4

    def to_vector(self) -> np.ndarray:
        return np.concatenate([np.log(self.lengthscales), [math.log(self.signal_var), math.log(self.noise_var)]])

    @classmethod
    def from_vector(cls, theta: np.ndarray) -> "GPHyper":
        return cls(np.exp(theta[:-2]), float(np.exp(theta[-2])), float(np.exp(theta[-1])))


@dataclass(frozen=True)
class GPBounds:
    lengthscale: tuple[float, float] = (0.02, 50.0)
    signal_var: tuple[float, float] = (1e-3, 1e3)
    noise_var: tuple[float, float] = (1e-9, 1.0)

    def vector(self, dim: int) -> list[tuple[float, float]]:
        ls = (math.log(self.lengthscale[0]), math.log(self.lengthscale[1]))
        return [ls] * dim + [tuple(map(math.log, self.signal_var)), tuple(map(math.log, self.noise_var))]


def scaled_distance(X1: np.ndarray, X2: np.ndarray, lengthscales) -> np.ndarray:
    A = X1 / lengthscales
    B = X2 / lengthscales
    d2 = np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :] - 2.0 * A @ B.T
    return np.sqrt(np.maximum(d2, 0.0))


def matern52(X1: np.ndarray, X2: np.ndarray, lengthscales, signal_var: float) -> np.ndarray:
    r = scaled_distance(X1, X2, lengthscales)
    return signal_var * (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * np.exp(-SQRT5 * r)


def _chol(K: np.ndarray) -> np.ndarray:
    jitter = 0.0
    for _ in range(8):
        try:
            return cholesky(K + jitter * np.eye(len(K)), lower=True)
        except np.linalg.LinAlgError:
            jitter = 1e-10 if jitter == 0 else jitter * 10
    raise np.linalg.LinAlgError("kernel matrix is not positive definite")


def neg_log_marginal_likelihood(theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Negative log evidence of standardized targets ``y`` and its gradient in log-hyperparameters."""
    n, dim = X.shape
    ls = np.exp(theta[:dim])
    s2 = math.exp(theta[dim])
    sn2 = math.exp(theta[dim + 1])
    r = scaled_distance(X, X, ls)
    e = np.exp(-SQRT5 * r)
    Kf = s2 * (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * e
    K = Kf + sn2 * np.eye(n)
    try:
        L = _chol(K)
    except np.linalg.LinAlgError:
        return 1e25, np.zeros_like(theta)
    alpha = cho_solve((L, True), y)
    nll = 0.5 * y @ alpha + np.sum(np.log(np.diag(L))) + 0.5 * n * math.log(2 * math.pi)
    W = np.outer(alpha, alpha) - cho_solve((L, True), np.eye(n))
    grad = np.empty_like(theta)
    # dK/dlog(l_d) = c(r) * (x_id - x_jd)^2 / l_d^2, summed against W without an (n, n, dim) array
    G = W * (s2 * 5.0 / 3.0 * (1.0 + SQRT5 * r) * e)
    quad = 2.0 * (G.sum(axis=1) @ (X * X)) - 2.0 * np.einsum("id,ij,jd->d", X, G, X)
    grad[:dim] = -0.5 * quad / ls**2
    grad[dim] = -0.5 * np.sum(W * Kf)
    grad[dim + 1] = -0.5 * sn2 * np.trace(W)
    return float(nll), grad


@dataclass
class GPModel:
    X: np.ndarray
    y: np.ndarray
    hyper: GPHyper
    y_mean: float = 0.0
    y_std: float = 1.0
    degenerate: bool = False
    L: np.ndarray | None = None
    alpha: np.ndarray | None = None
    nll: float = float("nan")

    @classmethod
    def prior(cls, dim: int, hyper: GPHyper | None = None) -> "GPModel":
        return cls(np.zeros((0, dim)), np.zeros(0), hyper or GPHyper(np.ones(dim)))

    @classmethod
    def condition(cls, X, y, hyper: GPHyper, degenerate: bool = False) -> "GPModel":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        m = cls(X, y, hyper, degenerate=degenerate)
        if len(y):
            m.y_mean = float(y.mean())
            sd = float(y.std())
            m.y_std = sd if sd > 0 else 1.0
            yn = (y - m.y_mean) / m.y_std
            K = matern52(X, X, hyper.lengthscales, hyper.signal_var) + hyper.noise_var * np.eye(len(y))
            m.L = _chol(K)
            m.alpha = cho_solve((m.L, True), yn)
        return m

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def noise_var(self) -> float:
        """Observation noise variance in target units."""
        return self.hyper.noise_var * self.y_std**2

    def predict(self, Z) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and standard deviation of the latent function."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        h = self.hyper
        if not len(self.y):
            return np.zeros(len(Z)), np.full(len(Z), math.sqrt(h.signal_var))
        Ks = matern52(Z, self.X, h.lengthscales, h.signal_var)
        mean = Ks @ self.alpha
        v = solve_triangular(self.L, Ks.T, lower=True)
        var = np.maximum(h.signal_var - np.sum(v * v, axis=0), 0.0)
        return self.y_mean + self.y_std * mean, self.y_std * np.sqrt(var)

    def mean_gradient(self, Z) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if not len(self.y):
            return np.zeros_like(Z)
        h = self.hyper
        r = scaled_distance(Z, self.X, h.lengthscales)
        # dk/dz = c(r) * (z - x) / l^2 with c(r) = -s2 * 5/3 * (1 + sqrt5 r) exp(-sqrt5 r)
        w = -h.signal_var * 5.0 / 3.0 * (1.0 + SQRT5 * r) * np.exp(-SQRT5 * r) * self.alpha
        grad = (Z * w.sum(axis=1, keepdims=True) - w @ self.X) / h.lengthscales**2
        return self.y_std * grad


def fit_gp(X, y, seed=0, n_restarts: int = 2, init: GPHyper | None = None, bounds: GPBounds = GPBounds(),
           maxiter: int = 100) -> GPModel:
    """Maximize the marginal likelihood from several starts; the best optimum wins."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) < 2:
        raise ValueError("at least two observations are needed to fit a GP")
    dim = X.shape[1]
    prior = GPHyper(np.ones(dim))
    if not np.std(y) > 0:
        log.warning("all targets are equal; keeping prior hyperparameters")
        return GPModel.condition(X, y, init or prior, degenerate=True)
    yn = (y - y.mean()) / y.std()
    rng = np.random.default_rng(seed)
    bvec = bounds.vector(dim)
    lo = np.array([b[0] for b in bvec])
    hi = np.array([b[1] for b in bvec])
    starts = [np.clip((init or prior).to_vector(), lo, hi)]
    span = np.ptp(X, axis=0)
    span = np.where(span > 0, span, 1.0)
    for _ in range(n_restarts - 1):
        th = np.concatenate([np.log(span * rng.uniform(0.1, 2.0, dim)), [rng.uniform(-1, 1), rng.uniform(-8, -2)]])
        starts.append(np.clip(th, lo, hi))
    best = None
    for th0 in starts:
        res = minimize(neg_log_marginal_likelihood, th0, args=(X, yn), jac=True, method="L-BFGS-B",
                       bounds=bvec, options={"maxiter": maxiter})
        if best is None or res.fun < best.fun:
            best = res
    model = GPModel.condition(X, y, GPHyper.from_vector(best.x))
    model.nll = float(best.fun)
    return model


# ---------------------------------------------------------------------------
# Acquisition
# ---------------------------------------------------------------------------


def ei_closed_form(mean, std, best: float, xi: float = 0.0) -> np.ndarray:
    """Expected improvement over ``best`` for maximization."""
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    imp = mean - best - xi
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(std > 0, imp / np.where(std > 0, std, 1.0), 0.0)
    ei = np.where(std > 0, imp * ndtr(u) + std * INV_SQRT_2PI * np.exp(-0.5 * u * u), np.maximum(imp, 0.0))
    return np.maximum(ei, 0.0)


def expected_improvement(model: GPModel, Z, best: float, xi: float = 0.0) -> np.ndarray:
    mean, std = model.predict(Z)
    return ei_closed_form(mean, std, best, xi)


def lipschitz_estimate(model: GPModel, box: tuple[float, float], rng, n: int = 256) -> float:
    """Largest posterior-mean gradient norm over random box points and the data."""
    pts = rng.uniform(box[0], box[1], (n, model.dim))
    if len(model.X):
        pts = np.vstack([pts, model.X])
    g = np.linalg.norm(model.mean_gradient(pts), axis=1)
    return max(float(g.max()), 1e-7)


@dataclass
class Penalizer:
    """Hard local penalizers around pending points.

    Each factor is ``min(1, (L * |z - p| / (|M - mu(p)| + gamma * s(p))) ** power)``:
    zero at the pending point, one outside its radius.
    """

    centers: np.ndarray
    radii: np.ndarray
    power: float = 1.0

    @classmethod
    def build(cls, model: GPModel, pending, best: float, lipschitz: float, gamma: float = 1.0,
              power: float = 1.0) -> "Penalizer":
        P = np.asarray(pending, dtype=float).reshape(-1, model.dim)
        if not len(P):
            return cls(P, np.zeros(0), power)
        mean, std = model.predict(P)
        radii = (np.abs(best - mean) + gamma * std) / lipschitz
        return cls(P, np.maximum(radii, 1e-12), power)

    def __call__(self, Z) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        out = np.ones(len(Z))
        for c, r in zip(self.centers, self.radii):
            d = np.linalg.norm(Z - c, axis=1)
            out *= np.minimum(1.0, (d / r) ** self.power)
        return out


def penalized_acquisition(model: GPModel, Z, pending, best: float, lipschitz: float | None = None,
                          gamma: float = 1.0, power: float = 1.0, rng=None, box=(-3.0, 3.0)) -> np.ndarray:
    ei = expected_improvement(model, Z, best)
    if pending is None or not len(pending):
        return ei
    if lipschitz is None:
        lipschitz = lipschitz_estimate(model, box, np.random.default_rng(rng))
    return ei * Penalizer.build(model, pending, best, lipschitz, gamma, power)(Z)


# ---------------------------------------------------------------------------
# Optimizer state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BOConfig:
    dim: int = 8
    box: tuple[float, float] = (-3.0, 3.0)
    n_init: int = 10  # uniform random proposals before the surrogate takes over
    penalize: bool = True
    gamma: float = 1.0
    power: float = 1.0
    n_candidates: int = 512
    n_local: int = 4  # best candidates refined by the local search
    local_iters: int = 15
    local_samples: int = 32
    refit_until: int = 30  # refit hyperparameters on every report up to this many records
    refit_every: int = 10  # afterwards on every n-th report
    gp_restarts: int = 2
    floor_default: float = -1.0
    floor_freeze: int = 10
    pending_timeout: float = math.inf

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass
class EvalRecord:
    index: int
    z: np.ndarray
    status: str = PENDING
    fitness: float = float("nan")
    design: str | None = None
    worker: int = 0
    t_proposed: float = 0.0
    t_reported: float | None = None
    pending_at_proposal: tuple[int, ...] = ()
    source: str = "random"  # or "acquisition"
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "index": self.index, "z": self.z.tolist(), "status": self.status,
            "fitness": None if not np.isfinite(self.fitness) else float(self.fitness),
            "design": self.design, "worker": self.worker, "t_proposed": self.t_proposed,
            "t_reported": self.t_reported, "pending_at_proposal": list(self.pending_at_proposal),
            "source": self.source, "note": self.note,
        }


@dataclass
class EvalOutcome:
    fitness: float
    status: str = DONE
    design: str | None = None
    note: str = ""


class BOState:
    """Single authority over proposals and reports; every method is one atomic transaction."""

    def __init__(self, config: BOConfig = BOConfig(), seed=0, budget: int | None = None):
        self.config = config
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.budget = budget
        self.records: list[EvalRecord] = []
        self.model: GPModel | None = None
        self._hyper: GPHyper | None = None
        self._fit_count = 0
        self._frozen_floor: float | None = None

    # -- bookkeeping ------------------------------------------------------

    @property
    def pending(self) -> list[EvalRecord]:
        return [r for r in self.records if r.status == PENDING]

    @property
    def completed(self) -> list[EvalRecord]:
        return [r for r in self.records if r.status != PENDING]

    @property
    def done(self) -> list[EvalRecord]:
        return [r for r in self.records if r.status == DONE]

    @property
    def best(self) -> EvalRecord | None:
        done = self.done
        if not done:
            return None
        return max(done, key=lambda r: (r.fitness, -r.index))

    def floor(self) -> float:
        if self._frozen_floor is not None:
            return self._frozen_floor
        done = self.done
        value = (min(r.fitness for r in done) - 1.0) if done else self.config.floor_default
        if len(done) >= self.config.floor_freeze:
            self._frozen_floor = value
        return value

    def can_propose(self) -> bool:
        return self.budget is None or len(self.records) < self.budget

    # -- transactions -----------------------------------------------------

    def propose(self, now: float = 0.0, worker: int = 0) -> EvalRecord:
        if not self.can_propose():
            raise RuntimeError("budget exhausted")
        cfg = self.config
        self.expire(now)
        pending = self.pending
        source = "random"
        if len(self.completed) < max(cfg.n_init, 2) or self.model is None:
            z = self.rng.uniform(cfg.box[0], cfg.box[1], cfg.dim)
        else:
            z = self._maximize_acquisition(np.array([r.z for r in pending]).reshape(-1, cfg.dim))
            source = "acquisition"
        rec = EvalRecord(len(self.records), z, worker=worker, t_proposed=now,
                         pending_at_proposal=tuple(r.index for r in pending), source=source)
        self.records.append(rec)
        return rec

    def report(self, index: int, outcome: EvalOutcome | float, now: float = 0.0) -> EvalRecord:
        rec = self.records[index]
        if rec.status != PENDING:
            raise ValueError(f"record {index} is not pending")
        if not isinstance(outcome, EvalOutcome):
            outcome = EvalOutcome(float(outcome))
        rec.t_reported = now
        rec.design = outcome.design
        rec.note = outcome.note
        if outcome.status == DONE and np.isfinite(outcome.fitness):
            rec.status = DONE
            rec.fitness = float(outcome.fitness)
        else:
            rec.status = INVALID
        self._refresh_floor()
        self._update_model()
        return rec

    def expire(self, now: float) -> list[EvalRecord]:
        """Release pending records older than the timeout; they count as invalid."""
        lost = [r for r in self.pending if now - r.t_proposed > self.config.pending_timeout]
        for r in lost:
            r.status = INVALID
            r.t_reported = now
            r.note = "expired"
        if lost:
            self._refresh_floor()
            self._update_model()
        return lost

    # -- internals --------------------------------------------------------

    def _refresh_floor(self) -> None:
        f = self.floor()
        for r in self.records:
            if r.status == INVALID:
                r.fitness = f

    def _update_model(self) -> None:
        cfg = self.config
        comp = self.completed
        if len(comp) < 2:
            return
        X = np.array([r.z for r in comp])
        y = np.array([r.fitness for r in comp])
        n = len(comp)
        refit = self._hyper is None or n <= cfg.refit_until or (n - cfg.refit_until) % cfg.refit_every == 0
        if refit:
            seed = np.random.SeedSequence([abs(hash_seed(self.seed)), n])
            # late refits start only from the previous optimum
            restarts = cfg.gp_restarts if n <= cfg.refit_until else 1
            self.model = fit_gp(X, y, seed=np.random.default_rng(seed), n_restarts=restarts, init=self._hyper)
            if not self.model.degenerate:
                self._hyper = self.model.hyper
            self._fit_count += 1
        else:
            self.model = GPModel.condition(X, y, self._hyper)

    def _maximize_acquisition(self, pending: np.ndarray) -> np.ndarray:
        cfg = self.config
        lo, hi = cfg.box
        model = self.model
        best = self.best.fitness if self.best is not None else float(np.max(model.y))
        if cfg.penalize and len(pending):
            lip = lipschitz_estimate(model, cfg.box, self.rng)
            pen = Penalizer.build(model, pending, best, lip, cfg.gamma, cfg.power)
        else:
            pen = None

        def acq(Z):
            a = expected_improvement(model, Z, best)
            return a if pen is None else a * pen(Z)

        # multi-start: uniform candidates plus perturbations of the best
        # observations and of the points still in flight
        cand = self.rng.uniform(lo, hi, (cfg.n_candidates, cfg.dim))
        seeds = [r.z for r in sorted(self.done, key=lambda r: -r.fitness)[:8]] + list(pending)
        if seeds:
            around = np.repeat(np.array(seeds), 8, axis=0)
            around = around + 0.1 * (hi - lo) * self.rng.standard_normal(around.shape)
            cand = np.vstack([cand, np.clip(around, lo, hi)])
        vals = acq(cand)
        order = np.argsort(-vals, kind="stable")[: cfg.n_local]
        xs, fs = cand[order], vals[order]
        # gradient-free local refinement with a shrinking Gaussian step
        step = 0.1 * (hi - lo)
        for _ in range(cfg.local_iters):
            trial = xs[:, None, :] + step * self.rng.standard_normal((len(xs), cfg.local_samples, cfg.dim))
            trial = np.clip(trial, lo, hi).reshape(-1, cfg.dim)
            tv = acq(trial).reshape(len(xs), cfg.local_samples)
            j = np.argmax(tv, axis=1)
            better = tv[np.arange(len(xs)), j] > fs
            xs[better] = trial.reshape(len(xs), cfg.local_samples, cfg.dim)[better, j[better]]
            fs[better] = tv[better, j[better]]
            step *= 0.85
        i = int(np.argmax(fs))
        if not fs[i] > 0:
            # acquisition is flat (e.g. every region penalized away): fall back to uniform
            return self.rng.uniform(lo, hi, cfg.dim)
        return xs[i].copy()


def hash_seed(seed) -> int:
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    return 0


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

Evaluator = Callable[[np.ndarray], "EvalOutcome | float"]


@dataclass
class BORun:
    best: EvalRecord | None
    history: list[EvalRecord]  # in report order
    state: BOState
    log_lines: list[str] = field(default_factory=list)

    @property
    def best_curve(self) -> np.ndarray:
        return best_so_far([r.fitness if r.status == DONE else -np.inf for r in self.history])


def best_so_far(values: Iterable[float]) -> np.ndarray:
    v = np.asarray(list(values), dtype=float)
    return np.maximum.accumulate(v) if len(v) else v


def _evaluate(evaluator: Evaluator, z: np.ndarray) -> EvalOutcome:
    try:
        out = evaluator(z.copy())
    except Exception as exc:  # evaluator failures become invalid records
        log.warning("evaluation failed: %s", exc)
        return EvalOutcome(float("nan"), INVALID, note=f"error: {exc}")
    return out if isinstance(out, EvalOutcome) else EvalOutcome(float(out))


def log_line(rec: EvalRecord, evaluator_id: str, seed) -> str:
    d = rec.to_dict()
    d["evaluator"] = evaluator_id
    d["seed"] = seed if isinstance(seed, (int, np.integer)) else None
    return json.dumps(d)


def bo_run(evaluator: Evaluator, budget: int, n_workers: int = 1, seed=0, config: BOConfig = BOConfig(),
           duration: Callable[[np.random.Generator], float] | None = None, evaluator_id: str | None = None,
           on_report=None) -> BORun:
    """Asynchronous BO with ``n_workers`` simulated workers on a virtual clock.

    Each worker proposes, evaluates for a seeded random duration and reports;
    the next proposal happens as soon as it reports.
    """
    if budget < 1 or n_workers < 1:
        raise ValueError("budget and n_workers must be positive")
    state = BOState(config, seed, budget)
    clock_rng = np.random.default_rng(np.random.SeedSequence([hash_seed(seed), 0xC10C]))
    duration = duration or (lambda r: float(r.uniform(0.5, 1.5)))
    ev_id = evaluator_id or getattr(evaluator, "evaluator_id", getattr(evaluator, "__name__", "custom"))
    queue: list[tuple[float, int, int]] = []  # (finish time, worker, record index)
    results: dict[int, EvalOutcome] = {}
    history: list[EvalRecord] = []
    lines: list[str] = []
    now = 0.0

    def launch(worker: int):
        rec = state.propose(now, worker)
        results[rec.index] = _evaluate(evaluator, rec.z)
        heapq.heappush(queue, (now + duration(clock_rng), worker, rec.index))

    for w in range(min(n_workers, budget)):
        launch(w)
    while queue:
        now, worker, idx = heapq.heappop(queue)
        if state.records[idx].status != PENDING:
            continue  # expired while running
        rec = state.report(idx, results.pop(idx), now)
        history.append(rec)
        lines.append(log_line(rec, ev_id, seed))
        if on_report is not None:
            on_report(rec)
        if state.can_propose():
            launch(worker)
    return BORun(state.best, history, state, lines)


def bo_run_sync(evaluator: Evaluator, budget: int, seed=0, config: BOConfig = BOConfig(),
                evaluator_id: str | None = None) -> BORun:
    """Plain sequential BO: propose, evaluate, report."""
    state = BOState(config, seed, budget)
    ev_id = evaluator_id or getattr(evaluator, "evaluator_id", getattr(evaluator, "__name__", "custom"))
    history, lines = [], []
    for _ in range(budget):
        rec = state.propose()
        rec = state.report(rec.index, _evaluate(evaluator, rec.z))
        history.append(rec)
        lines.append(log_line(rec, ev_id, seed))
    return BORun(state.best, history, state, lines)


def replay_best_curve(lines: Iterable[str]) -> np.ndarray:
    """Best-so-far fitness from a run log, in report order."""
    vals = []
    for line in lines:
        d = json.loads(line)
        if "status" not in d:
            continue  # header or other non-record lines
        vals.append(d["fitness"] if d["status"] == DONE else -np.inf)
    return best_so_far(vals)


def random_search(evaluator: Evaluator, budget: int, seed=0, dim: int = 8, box=(-3.0, 3.0)) -> tuple[np.ndarray, float]:
    rng = np.random.default_rng(seed)
    Z = rng.uniform(box[0], box[1], (budget, dim))
    f = np.array([_evaluate(evaluator, z).fitness for z in Z])
    f = np.where(np.isfinite(f), f, -np.inf)
    i = int(np.argmax(f))
    return Z[i], float(f[i])


def mean_pending_distance(records: list[EvalRecord], source: str | None = "acquisition") -> float:
    """Mean distance from each proposal to the points pending when it was made.

    By default only surrogate-driven proposals count, since the initial
    uniform draws are spread out regardless of penalization.
    """
    by_index = {r.index: r for r in records}
    d = [np.linalg.norm(r.z - by_index[j].z) for r in records if source is None or r.source == source
         for j in r.pending_at_proposal]
    return float(np.mean(d)) if d else float("nan")


# ---------------------------------------------------------------------------
# Evaluators
# ---------------------------------------------------------------------------


class NegSquaredNorm:
    """f(z) = -|z|^2, the synthetic benchmark."""

    evaluator_id = "neg-squared-norm"

    def __call__(self, z: np.ndarray) -> float:
        return -float(np.dot(z, z))


class DesignEvaluator:
    """Decode a latent vector, reject invalid designs, score the rest by pose search.

    Fitness is the best pose score plus the probe displacement of that pose.
    """

    evaluator_id = "pose-probe"

    def __init__(self, model, pose_count: int = 64, seed: int = 0, **pose_kwargs):
        self.model = model
        self.pose_count = pose_count
        self.seed = seed
        self.pose_kwargs = pose_kwargs

    def __call__(self, z: np.ndarray) -> EvalOutcome:
        from .genome import VALID, decode_latent
        from .morphology import encode_tree, format_seq
        from .poseopt import optimize_pose

        res = decode_latent(self.model, z)
        ref = format_seq(res.seq)
        if res.verdict != VALID:
            return EvalOutcome(float("nan"), INVALID, ref, res.verdict)
        pose = optimize_pose(res.tree, seed=self.seed, count=self.pose_count, **self.pose_kwargs)
        if pose.best_index is None:
            return EvalOutcome(float("nan"), INVALID, ref, "no admissible pose")
        i = pose.best_index
        fitness = pose.best_total + float(pose.scores.displacement[i])
        return EvalOutcome(fitness, DONE, format_seq(encode_tree(res.tree)))
