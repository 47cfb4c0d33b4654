"""Multi-objective TPE sampler with a Pareto archive and JSON-lines journal.

All objectives are maximised. The good/bad split ranks trials by
nondominated front, breaks ties inside the boundary front by crowding
distance (larger first) and then by insertion order.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import ndtr, ndtri

from .numerics import seeded_rng

OBJECTIVES = ("auc", "precision", "specificity", "recall")


# --- search space ---------------------------------------------------------

@dataclass(frozen=True)
class Float:
    name: str
    low: float
    high: float
    log: bool = False
    active_if: tuple | None = None  # (parent name, minimum parent value)

    def __post_init__(self):
        if not self.low < self.high or (self.log and self.low <= 0):
            raise ValueError(f"bad bounds for {self.name}: [{self.low}, {self.high}]")

    def contains(self, v) -> bool:
        return self.low <= v <= self.high


@dataclass(frozen=True)
class Int:
    name: str
    low: int
    high: int
    active_if: tuple | None = None

    def __post_init__(self):
        if not self.low <= self.high:
            raise ValueError(f"bad bounds for {self.name}: [{self.low}, {self.high}]")

    def contains(self, v) -> bool:
        return float(v).is_integer() and self.low <= v <= self.high


@dataclass(frozen=True)
class Categorical:
    name: str
    choices: tuple
    active_if: tuple | None = None

    def contains(self, v) -> bool:
        return v in self.choices


@dataclass(frozen=True)
class SearchSpace:
    params: tuple

    def __post_init__(self):
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        seen = set()
        for p in self.params:
            if p.active_if is not None and p.active_if[0] not in seen:
                raise ValueError(f"{p.name} depends on {p.active_if[0]}, which must come first")
            seen.add(p.name)

    @classmethod
    def default(cls, max_blocks: int = 3, k_range=(5, 17), width_range=(8, 256), steps_range=(1, 17),
                lr_range=(1e-4, 1e-2), batch_sizes=(16, 32, 64)) -> "SearchSpace":
        """The tuned hyperparameters; keyword arguments narrow the ranges."""
        ps = [Float("dropout", 0.1, 0.5), Float("asap_ratio", 0.1, 1.0), Int("n_blocks", 1, max_blocks)]
        for b in range(max_blocks):
            cond = None if b == 0 else ("n_blocks", b + 1)
            ps += [Int(f"out_channels_{b}", *width_range, active_if=cond),
                   Int(f"prop_steps_{b}", *steps_range, active_if=cond)]
        ps += [Float("lr", *lr_range, log=True), Categorical("batch_size", tuple(batch_sizes)),
               Int("k_neighbors", *k_range)]
        return cls(tuple(ps))

    def __getitem__(self, name):
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    @staticmethod
    def is_active(p, assignment: dict) -> bool:
        if p.active_if is None:
            return True
        parent, minimum = p.active_if
        return parent in assignment and assignment[parent] >= minimum

    def validate(self, assignment: dict) -> None:
        for p in self.params:
            active = self.is_active(p, assignment)
            if active and p.name not in assignment:
                raise ValueError(f"missing active parameter {p.name}")
            if not active and p.name in assignment:
                raise ValueError(f"inactive parameter {p.name} present")
            if active and not p.contains(assignment[p.name]):
                raise ValueError(f"{p.name}={assignment[p.name]!r} outside its domain")


# --- trials and dominance --------------------------------------------------

@dataclass
class Trial:
    number: int
    params: dict
    seed: int
    state: str = "running"  # running | complete | failed
    objectives: tuple | None = None
    note: str = ""

    def to_dict(self) -> dict:
        return {"number": self.number, "params": self.params, "objectives": self.objectives,
                "state": self.state, "seed": self.seed, "note": self.note}

    @classmethod
    def from_dict(cls, d: dict) -> "Trial":
        obj = d.get("objectives")
        return cls(int(d["number"]), dict(d["params"]), int(d["seed"]), d["state"],
                   tuple(obj) if obj is not None else None, d.get("note", ""))


def dominates(a, b) -> bool:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return bool(np.all(a >= b) and np.any(a > b))


def nondominated_sort(objectives) -> list[list[int]]:
    """Fronts of indices; front 0 is the nondominated set."""
    pts = np.asarray(objectives, dtype=float)
    n = len(pts)
    if n == 0:
        return []
    ge = np.all(pts[:, None, :] >= pts[None, :, :], axis=2)
    gt = np.any(pts[:, None, :] > pts[None, :, :], axis=2)
    dom = ge & gt  # dom[i, j]: i dominates j
    n_dominators = dom.sum(axis=0)
    fronts, current = [], [i for i in range(n) if n_dominators[i] == 0]
    while current:
        fronts.append(current)
        nxt = []
        for i in current:
            for j in np.flatnonzero(dom[i]):
                n_dominators[j] -= 1
                if n_dominators[j] == 0:
                    nxt.append(int(j))
        current = sorted(nxt)
    return fronts


def crowding_distance(objectives) -> np.ndarray:
    """Crowding distance within one front. Objectives with zero range add
    nothing, so a fully degenerate front gets all zeros."""
    pts = np.asarray(objectives, dtype=float)
    n, m = pts.shape
    dist = np.zeros(n)
    for k in range(m):
        col = pts[:, k]
        span = col.max() - col.min()
        if span <= 0:
            continue
        order = np.argsort(col, kind="stable")
        dist[order[0]] = dist[order[-1]] = np.inf
        dist[order[1:-1]] += (col[order[2:]] - col[order[:-2]]) / span
    return dist


def split_observations(trials, gamma: float = 0.1):
    """Return (good, bad) trial lists with ``|good| = ceil(gamma * n)``."""
    done = [t for t in trials if t.state == "complete"]
    n = len(done)
    if n < 2:
        raise ValueError("need at least 2 complete trials to split")
    if not 0 < gamma < 1:
        raise ValueError("gamma must be in (0, 1)")
    n_good = math.ceil(gamma * n - 1e-12)
    ranked = []
    for rank, front in enumerate(nondominated_sort([t.objectives for t in done])):
        crowd = crowding_distance([done[i].objectives for i in front])
        ranked += [(rank, -crowd[p], i) for p, i in enumerate(front)]
    ranked.sort()
    good_idx = {i for _, _, i in ranked[:n_good]}
    good = [t for i, t in enumerate(done) if i in good_idx]
    bad = [t for i, t in enumerate(done) if i not in good_idx]
    return good, bad


class ParetoArchive:
    def __init__(self):
        self.members: list[Trial] = []

    def add(self, trial: Trial) -> bool:
        if trial.state != "complete":
            return False
        if any(dominates(m.objectives, trial.objectives) for m in self.members):
            return False
        self.members = [m for m in self.members if not dominates(trial.objectives, m.objectives)]
        self.members.append(trial)
        return True

    def to_dict(self, objective_names=OBJECTIVES) -> dict:
        return {"objectives": list(objective_names), "members": [m.to_dict() for m in self.members]}


def hypervolume(front, reference) -> float:
    """Exact dominated hypervolume (maximisation) via recursive slicing."""
    ref = np.asarray(reference, dtype=float)
    pts = np.asarray(front, dtype=float).reshape(-1, ref.size)
    if len(pts) == 0:
        return 0.0
    if np.any(pts < ref):
        raise ValueError("reference point must be dominated by every front member")
    keep = nondominated_sort(pts)[0]
    return _hv(pts[keep], ref)


def _hv(pts, ref) -> float:
    if pts.shape[1] == 1:
        return float(pts[:, 0].max() - ref[0])
    order = np.argsort(-pts[:, -1], kind="stable")
    pts = pts[order]
    total = 0.0
    for i in range(len(pts)):
        lower = pts[i + 1, -1] if i + 1 < len(pts) else ref[-1]
        height = pts[i, -1] - lower
        if height > 0:
            total += height * _hv(pts[:i + 1, :-1], ref[:-1])
    return total


# --- Parzen estimators ----------------------------------------------------

class ParzenNumeric:
    """Truncated-Gaussian mixture on [low, high] (log space if ``log``), plus a
    flat prior component weighted like one observation. Bandwidths adapt to
    local spacing. Integer domains
    are modelled on [low - 0.5, high + 0.5] and rounded."""

    def __init__(self, param, observations):
        self.param = param
        self.is_int = isinstance(param, Int)
        self.log = getattr(param, "log", False)
        obs = np.asarray(list(observations), dtype=float)
        if any(not param.contains(v) for v in obs):
            raise ValueError(f"observation outside the domain of {param.name}")
        lo, hi = float(param.low), float(param.high)
        if self.is_int:
            lo, hi = lo - 0.5, hi + 0.5
        if self.log:
            lo, hi, obs = math.log(lo), math.log(hi), np.log(obs)
        self.lo, self.hi = lo, hi
        width = hi - lo
        self.mu = obs
        n = obs.size
        # each kernel is as wide as the larger gap to its sorted neighbours
        # (domain ends count as neighbours), floored at 1% of the domain
        pts = np.concatenate([[lo], np.sort(obs), [hi]])
        gaps = np.maximum(pts[1:-1] - pts[:-2], pts[2:] - pts[1:-1])
        self.sigma = np.empty(n)
        self.sigma[np.argsort(obs, kind="stable")] = np.clip(gaps, 0.01 * width, width)
        w = np.ones(n + 1)
        self.weights = w / w.sum()  # last weight is the flat prior
        self.mass = ndtr((hi - obs) / self.sigma) - ndtr((lo - obs) / self.sigma)

    def _pdf_internal(self, u):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        dens = np.full(u.shape, self.weights[-1] / (self.hi - self.lo))
        if self.mu.size:
            z = (u[:, None] - self.mu[None, :]) / self.sigma
            k = np.exp(-0.5 * z * z) / (self.sigma * math.sqrt(2 * math.pi) * self.mass[None, :])
            dens = dens + k @ self.weights[:-1]
        inside = (u >= self.lo) & (u <= self.hi)
        return np.where(inside, dens, 0.0)

    def _cdf_internal(self, u):
        u = np.clip(np.atleast_1d(np.asarray(u, dtype=float)), self.lo, self.hi)
        out = self.weights[-1] * (u - self.lo) / (self.hi - self.lo)
        if self.mu.size:
            c = (ndtr((u[:, None] - self.mu) / self.sigma) - ndtr((self.lo - self.mu) / self.sigma)) / self.mass
            out = out + c @ self.weights[:-1]
        return out

    def pdf(self, x):
        """Density (or probability mass for integers) in the native domain."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.is_int:
            edges_lo, edges_hi = x - 0.5, x + 0.5
            if self.log:
                edges_lo, edges_hi = np.log(edges_lo), np.log(edges_hi)
            return self._cdf_internal(edges_hi) - self._cdf_internal(edges_lo)
        if self.log:
            return self._pdf_internal(np.log(x)) / x
        return self._pdf_internal(x)

    def log_score(self, x):
        return np.log(np.maximum(self.pdf(x), 1e-300))

    def sample(self, rng, size: int):
        comp = rng.choice(self.weights.size, size=size, p=self.weights)
        u = np.empty(size)
        prior = comp == self.mu.size
        u[prior] = rng.uniform(self.lo, self.hi, prior.sum())
        idx = np.flatnonzero(~prior)
        if idx.size:
            mu, sd = self.mu[comp[idx]], self.sigma[comp[idx]]
            # inverse-CDF draw from each truncated normal
            a, b = ndtr((self.lo - mu) / sd), ndtr((self.hi - mu) / sd)
            p = a + rng.random(idx.size) * (b - a)
            u[idx] = np.clip(mu + sd * ndtri(np.clip(p, 1e-300, 1 - 1e-16)), self.lo, self.hi)
        x = np.exp(u) if self.log else u
        if self.is_int:
            return np.clip(np.rint(x), self.param.low, self.param.high).astype(int)
        return np.clip(x, self.param.low, self.param.high)


class ParzenCategorical:
    def __init__(self, param, observations, prior_count: float = 1.0):
        self.param = param
        counts = np.full(len(param.choices), prior_count)
        for v in observations:
            if v not in param.choices:
                raise ValueError(f"observation outside the domain of {param.name}")
            counts[param.choices.index(v)] += 1
        self.weights = counts / counts.sum()

    def pdf(self, x):
        return np.array([self.weights[self.param.choices.index(v)] for v in np.atleast_1d(x)])

    def log_score(self, x):
        return np.log(self.pdf(x))

    def sample(self, rng, size: int):
        idx = rng.choice(len(self.param.choices), size=size, p=self.weights)
        return [self.param.choices[i] for i in idx]


def parzen_density(param, observations):
    if isinstance(param, Categorical):
        return ParzenCategorical(param, observations)
    return ParzenNumeric(param, observations)


# --- suggestion -------------------------------------------------------------

def _py(v):
    return v.item() if isinstance(v, np.generic) else v


def sample_uniform(space: SearchSpace, rng) -> dict:
    out = {}
    for p in space.params:
        if not space.is_active(p, out):
            continue
        if isinstance(p, Categorical):
            out[p.name] = p.choices[int(rng.integers(len(p.choices)))]
        elif isinstance(p, Int):
            out[p.name] = int(rng.integers(p.low, p.high + 1))
        elif p.log:
            out[p.name] = float(math.exp(rng.uniform(math.log(p.low), math.log(p.high))))
        else:
            out[p.name] = float(rng.uniform(p.low, p.high))
    return out


def suggest(history, space: SearchSpace, seed: int = 0, n_candidates: int = 24, n_startup: int = 10,
            gamma: float = 0.1) -> dict:
    """Next assignment given the trial history; deterministic in (history, seed)."""
    rng = seeded_rng((seed, len(history)))
    done = [t for t in history if t.state == "complete"]
    if len(done) < max(n_startup, 2):
        return sample_uniform(space, rng)
    good, bad = split_observations(done, gamma)
    out = {}
    for p in space.params:
        if not space.is_active(p, out):
            continue
        lo_obs = [t.params[p.name] for t in good if p.name in t.params]
        hi_obs = [t.params[p.name] for t in bad if p.name in t.params]
        l, g = parzen_density(p, lo_obs), parzen_density(p, hi_obs)
        cand = l.sample(rng, n_candidates)
        score = l.log_score(cand) - g.log_score(cand)
        out[p.name] = _py(cand[int(np.argmax(score))])
    return out


# --- study ------------------------------------------------------------------

class Study:
    """Ask/tell driver. ``suggest`` calls are serialised by construction;
    evaluating several asked trials concurrently is the caller's business."""

    def __init__(self, space: SearchSpace, seed: int = 0, journal=None, sampler: str = "motpe",
                 n_startup: int = 10, n_candidates: int = 24, gamma: float = 0.1):
        if sampler not in ("motpe", "random"):
            raise ValueError(f"unknown sampler {sampler!r}")
        self.space, self.seed, self.sampler = space, seed, sampler
        self.n_startup, self.n_candidates, self.gamma = n_startup, n_candidates, gamma
        self.trials: list[Trial] = []
        self.archive = ParetoArchive()
        self.journal = Path(journal) if journal else None

    def ask(self) -> Trial:
        startup = self.n_startup if self.sampler == "motpe" else 10 ** 9
        params = suggest(self.trials, self.space, self.seed, self.n_candidates, startup, self.gamma)
        trial = Trial(len(self.trials), params, seed=self.seed * 100003 + len(self.trials))
        self.trials.append(trial)
        return trial

    def tell(self, trial: Trial, objectives=None, failed: str | None = None) -> None:
        if failed is not None or objectives is None:
            trial.state, trial.note = "failed", failed or ""
        else:
            obj = tuple(float(v) for v in objectives)
            if not all(math.isfinite(v) for v in obj):
                raise ValueError("complete trials need finite objectives")
            trial.state, trial.objectives = "complete", obj
            self.archive.add(trial)
        if self.journal is not None:
            with self.journal.open("a") as fh:
                fh.write(json.dumps(trial.to_dict(), sort_keys=True) + "\n")

    def optimize(self, objective: Callable[[dict, int], tuple], n_trials: int) -> "Study":
        for _ in range(n_trials):
            trial = self.ask()
            try:
                self.tell(trial, objective(trial.params, trial.seed))
            except (ValueError, FloatingPointError) as exc:
                self.tell(trial, failed=str(exc))
        return self

    @classmethod
    def from_journal(cls, path, space: SearchSpace, **kw) -> "Study":
        study = cls(space, journal=path, **kw)
        for line in Path(path).read_text().splitlines():
            if line.strip():
                t = Trial.from_dict(json.loads(line))
                study.trials.append(t)
                study.archive.add(t)
        return study


def toy_objective(params: dict, seed: int = 0) -> tuple:
    """minimise (x^2, (x - 2)^2) recast as maximisation."""
    x = params["x"]
    return (-x * x, -(x - 2.0) ** 2)


TOY_SPACE = SearchSpace((Float("x", -5.0, 5.0),))
TOY_REFERENCE = (-25.0, -49.0)


def toy_hypervolume(seed: int, sampler: str, n_trials: int = 100) -> float:
    study = Study(TOY_SPACE, seed=seed, sampler=sampler).optimize(toy_objective, n_trials)
    return hypervolume([t.objectives for t in study.archive.members], TOY_REFERENCE)
