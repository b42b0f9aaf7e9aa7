"""Bandit environments: context laws, rewards, instance generators, and
Monte-Carlo checks of the diversity and margin conditions.

Clients are indexed from 0. Three instance families are provided:

``DiverseMargin``
    K arms per round, each uniform on the unit ball and pushed through a
    per-client linear map ``Q diag(s)`` (Q orthogonal, s in [0.5, 1]^d), so
    client context laws genuinely differ while every feature stays inside
    the unit ball. This family is a modelling choice of this package; the
    theory only fixes the diversity and margin conditions.
``SphereHard``
    Two arms; arm 1 carries a truncated-Gaussian 2-vector in a uniformly
    chosen coordinate block, arm 2 is the zero vector. theta* has one
    radius-r block per coordinate pair.
``AxisNecessity``
    Fixed two-arm features; client 0 sees only the first axis, every other
    client only the second, so no single client has a diverse optimal arm.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .numkit import (
    RngLike,
    _gen,
    min_eigenvalue,
    sample_truncated_gaussian_ball,
    sample_uniform_ball,
    sample_uniform_sphere,
)

KINDS = ("DiverseMargin", "SphereHard", "AxisNecessity")
DEFAULT_EPS_GRID = tuple(float(e) for e in np.geomspace(1e-3, 1.0, 31))
_NORM_SLACK = 1e-9
_CHUNK = 50_000


@dataclass(frozen=True)
class DecisionSet:
    arms: np.ndarray  # (K, d)

    def __post_init__(self):
        arms = np.asarray(self.arms, dtype=float)
        if arms.ndim != 2 or arms.shape[0] == 0:
            raise ValueError("a decision set needs at least one arm")
        if np.any(np.linalg.norm(arms, axis=1) > 1.0 + _NORM_SLACK):
            raise ValueError("feature vectors must lie in the unit ball")
        object.__setattr__(self, "arms", arms)

    @property
    def d(self) -> int:
        return self.arms.shape[1]

    def __len__(self):
        return self.arms.shape[0]


@dataclass(frozen=True)
class Instance:
    d: int
    num_arms: int
    num_clients: int
    theta_star: np.ndarray
    kind: str
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        theta = np.asarray(self.theta_star, dtype=float)
        if theta.shape != (self.d,):
            raise ValueError(f"theta_star must have shape ({self.d},)")
        if np.linalg.norm(theta) > 1.0 + _NORM_SLACK:
            raise ValueError("||theta_star|| must be at most 1")
        if self.kind not in KINDS:
            raise ValueError(f"unknown instance kind {self.kind!r}")
        if self.kind == "SphereHard":
            r = self.meta["sphere_radius"]
            if self.d % 2 or not 0 < r <= 1 / math.sqrt(self.d) + 1e-12:
                raise ValueError("SphereHard needs even d and 0 < r <= 1/sqrt(d)")
            blocks = np.linalg.norm(theta.reshape(-1, 2), axis=1)
            if not np.allclose(blocks, r, rtol=0, atol=1e-12):
                raise ValueError("every 2-block of theta_star must have norm r")
        theta.setflags(write=False)
        object.__setattr__(self, "theta_star", theta)
        if self.kind == "DiverseMargin":
            maps = np.asarray(self.meta["client_maps"], dtype=float)
            if maps.shape != (self.num_clients, self.d, self.d):
                raise ValueError("client_maps must have shape (M, d, d)")
            object.__setattr__(self, "_maps", maps)

    @property
    def lambda0(self) -> float | None:
        return self.meta.get("lambda0")

    @property
    def C0(self) -> float | None:
        return self.meta.get("C0")

    # -- serialization --------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "num_arms": self.num_arms,
            "num_clients": self.num_clients,
            "kind": self.kind,
            "theta_star": [float(v) for v in self.theta_star],
            "meta": _jsonable(self.meta),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Instance":
        expected = {"d", "num_arms", "num_clients", "kind", "theta_star", "meta"}
        if set(doc) != expected:
            raise ValueError(f"instance document must have exactly the keys {sorted(expected)}")
        return cls(
            d=int(doc["d"]),
            num_arms=int(doc["num_arms"]),
            num_clients=int(doc["num_clients"]),
            theta_star=np.asarray(doc["theta_star"], dtype=float),
            kind=doc["kind"],
            meta=dict(doc["meta"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Instance":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# context and reward laws


def _raw_contexts(inst: Instance, client: int, n: int, rng: RngLike) -> np.ndarray:
    d, K = inst.d, inst.num_arms
    if inst.kind == "DiverseMargin":
        u = sample_uniform_ball(rng, d, 1.0, size=(n, K))
        return u @ inst._maps[client].T
    if inst.kind == "SphereHard":
        g = _gen(rng)
        blocks = g.integers(0, d // 2, size=n)
        z = sample_truncated_gaussian_ball(rng, 2, 1.0, size=n)
        out = np.zeros((n, 2, d))
        rows = np.arange(n)
        out[rows, 0, 2 * blocks] = z[:, 0]
        out[rows, 0, 2 * blocks + 1] = z[:, 1]
        return out
    axis = 0 if client == 0 else 1
    base = np.zeros((2, 2))
    base[0, axis] = 0.5
    base[1, axis] = -0.5
    return np.broadcast_to(base, (n, 2, 2)).copy()


def sample_contexts(inst: Instance, client: int, n: int, rng: RngLike) -> np.ndarray:
    """``n`` decision sets for ``client`` as an array of shape (n, K, d)."""
    if not 0 <= client < inst.num_clients:
        raise IndexError(f"client {client} out of range")
    X = _raw_contexts(inst, client, n, rng)
    floor = float(inst.meta.get("gap_floor", 0.0) or 0.0)
    if floor > 0.0 and inst.num_arms >= 2:
        bad = _top_gaps(X, inst.theta_star) < floor
        while np.any(bad):
            X[bad] = _raw_contexts(inst, client, int(bad.sum()), rng)
            bad = _top_gaps(X, inst.theta_star) < floor
    return X


def sample_context(inst: Instance, client: int, rng: RngLike) -> DecisionSet:
    return DecisionSet(sample_contexts(inst, client, 1, rng)[0])


def reward(inst: Instance, x, rng: RngLike) -> float:
    return float(np.dot(x, inst.theta_star) + _gen(rng).standard_normal())


def rewards(inst: Instance, X, rng: RngLike) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return X @ inst.theta_star + _gen(rng).standard_normal(X.shape[0])


def instantaneous_regret(inst: Instance, ds: DecisionSet | np.ndarray, chosen: int) -> float:
    arms = ds.arms if isinstance(ds, DecisionSet) else np.asarray(ds)
    means = arms @ inst.theta_star
    return float(max(means.max() - means[chosen], 0.0))


def regrets(theta_star, X: np.ndarray, chosen: np.ndarray) -> np.ndarray:
    """Per-round regret for stacked contexts X (n, K, d) and chosen indices (n,)."""
    means = X @ theta_star
    return np.maximum(means.max(axis=1) - means[np.arange(len(chosen)), chosen], 0.0)


def _top_gaps(X: np.ndarray, theta) -> np.ndarray:
    means = X @ theta
    if means.shape[1] < 2:
        return np.full(means.shape[0], np.inf)
    part = np.sort(means, axis=1)
    return part[:, -1] - part[:, -2]


# ---------------------------------------------------------------------------
# Monte-Carlo checks of the diversity / margin conditions


def _optimal_gram_sum(inst, client, n, rng):
    G = np.zeros((inst.d, inst.d))
    done = 0
    while done < n:
        m = min(_CHUNK, n - done)
        X = sample_contexts(inst, client, m, rng)
        best = np.argmax(X @ inst.theta_star, axis=1)
        Xs = X[np.arange(m), best]
        G += Xs.T @ Xs
        done += m
    return G


def estimate_min_eig_optimal(inst: Instance, client: int, n_samples: int, rng: RngLike) -> float:
    """lambda_min of the empirical second moment of the optimal arm's features."""
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    G = _optimal_gram_sum(inst, client, n_samples, rng) / n_samples
    lam = min_eigenvalue(G)
    # roundoff on an exactly singular Gram can land a hair below zero
    return 0.0 if abs(lam) <= 1e-14 else lam


def _gaps(inst, client, n, rng):
    out = []
    done = 0
    while done < n:
        m = min(_CHUNK, n - done)
        out.append(_top_gaps(sample_contexts(inst, client, m, rng), inst.theta_star))
        done += m
    return np.concatenate(out)


def margin_constant_from_gaps(gaps, eps_grid) -> float:
    gaps = np.sort(np.asarray(gaps, dtype=float))
    grid = np.asarray(eps_grid, dtype=float)
    if np.any(grid <= 0) or np.any(np.diff(grid) < 0):
        raise ValueError("eps_grid must be positive and sorted")
    frac = np.searchsorted(gaps, grid, side="right") / gaps.size
    return float(np.max(frac / grid))


def estimate_margin_constant(
    inst: Instance, client: int, eps_grid=DEFAULT_EPS_GRID, n_samples: int = 100_000, rng: RngLike = None
) -> float:
    """max over the grid of P[top-vs-runner-up gap <= eps] / eps."""
    return margin_constant_from_gaps(_gaps(inst, client, n_samples, rng), eps_grid)


def instance_report(inst: Instance, n_samples: int, rng, batches: int = 10) -> dict:
    """Per-client lambda_0 and C_0 estimates with batch-means +-2 SE bands."""
    lam, lam_se, c0, c0_se = [], [], [], []
    per = max(n_samples // batches, 1)
    for i in range(inst.num_clients):
        stream = rng.child("client", i)
        X_grams, gaps = [], []
        for _ in range(batches):
            X_grams.append(_optimal_gram_sum(inst, i, per, stream) / per)
            gaps.append(_gaps(inst, i, per, stream))
        full = min_eigenvalue(sum(X_grams) / batches)
        parts = [min_eigenvalue(G) for G in X_grams]
        lam.append(full)
        lam_se.append(float(np.std(parts, ddof=1) / math.sqrt(batches)) if batches > 1 else 0.0)
        c_full = margin_constant_from_gaps(np.concatenate(gaps), DEFAULT_EPS_GRID)
        c_parts = [margin_constant_from_gaps(g, DEFAULT_EPS_GRID) for g in gaps]
        c0.append(c_full)
        c0_se.append(float(np.std(c_parts, ddof=1) / math.sqrt(batches)) if batches > 1 else 0.0)
    worst = int(np.argmin(lam))
    return {
        "lambda0": float(lam[worst]),
        "lambda0_band": [float(lam[worst] - 2 * lam_se[worst]), float(lam[worst] + 2 * lam_se[worst])],
        "C0": float(max(c0)),
        "C0_band": [float(max(c0) - 2 * c0_se[int(np.argmax(c0))]), float(max(c0) + 2 * c0_se[int(np.argmax(c0))])],
        "per_client_lambda0": [float(v) for v in lam],
        "per_client_C0": [float(v) for v in c0],
    }


# ---------------------------------------------------------------------------
# generators


def _random_orthogonal(g: np.random.Generator, d: int) -> np.ndarray:
    Q, R = np.linalg.qr(g.standard_normal((d, d)))
    return Q * np.sign(np.diag(R))


def make_diverse_margin_instance(
    d: int,
    num_arms: int,
    num_clients: int,
    gap_floor: float = 0.0,
    rng=None,
    n_check: int = 20_000,
    max_retries: int = 100,
) -> Instance:
    """theta* uniform on the unit sphere; per-client context maps redrawn until
    that client's optimal-arm diversity estimate reaches 0.02 / d."""
    if num_arms < 2:
        raise ValueError("need at least two arms")
    g = _gen(rng.child("theta") if hasattr(rng, "child") else rng)
    theta = sample_uniform_sphere(g, d, 1.0)
    maps, lam = [], []
    target = 0.02 / d
    for i in range(num_clients):
        for attempt in range(max_retries):
            A = _random_orthogonal(g, d) * g.uniform(0.5, 1.0, size=d)
            probe = Instance(
                d, num_arms, 1, theta, "DiverseMargin", {"client_maps": [A.tolist()], "gap_floor": gap_floor}
            )
            est = estimate_min_eig_optimal(probe, 0, n_check, g)
            if est >= target:
                break
        else:
            raise RuntimeError(f"could not find a diverse context law for client {i}")
        maps.append(A)
        lam.append(est)
    meta = {"client_maps": np.array(maps).tolist(), "gap_floor": gap_floor, "per_client_lambda0": lam}
    inst = Instance(d, num_arms, num_clients, theta, "DiverseMargin", meta)
    c0 = [estimate_margin_constant(inst, i, DEFAULT_EPS_GRID, n_check, g) for i in range(num_clients)]
    meta.update(lambda0=float(min(lam)), C0=float(max(c0)))
    return Instance(d, num_arms, num_clients, theta, "DiverseMargin", meta)


def make_sphere_hard_instance(d: int, num_clients: int, r: float, rng, n_check: int = 100_000) -> Instance:
    if d % 2:
        raise ValueError("SphereHard needs an even dimension")
    if not 0 < r <= 1 / math.sqrt(d) + 1e-12:
        raise ValueError(f"sphere radius must lie in (0, 1/sqrt(d)], got {r}")
    g = _gen(rng.child("theta") if hasattr(rng, "child") else rng)
    theta = sample_uniform_sphere(g, 2, r, size=d // 2).reshape(d)
    meta: dict[str, Any] = {"sphere_radius": float(r), "lambda0": None, "C0": None}
    inst = Instance(d, 2, num_clients, theta, "SphereHard", meta)
    meta = dict(meta)
    meta["C0"] = estimate_margin_constant(inst, 0, DEFAULT_EPS_GRID, n_check, g)
    meta["lambda0"] = estimate_min_eig_optimal(inst, 0, n_check, g)
    return Instance(d, 2, num_clients, theta, "SphereHard", meta)


def make_axis_instance(num_clients: int, rng=None, n_check: int = 10_000) -> Instance:
    """Two-arm axis instance; theta* is (+-1, +-1)/sqrt(2), (1, 1)/sqrt(2) without an rng."""
    if rng is None:
        signs = np.ones(2)
        g = np.random.default_rng(0)
    else:
        g = _gen(rng.child("theta") if hasattr(rng, "child") else rng)
        signs = g.integers(0, 2, size=2) * 2.0 - 1.0
    theta = signs / math.sqrt(2.0)
    inst = Instance(2, 2, num_clients, theta, "AxisNecessity", {})
    lam = min(estimate_min_eig_optimal(inst, i, n_check, g) for i in range(min(num_clients, 2)))
    c0 = estimate_margin_constant(inst, 0, DEFAULT_EPS_GRID, n_check, g)
    return Instance(2, 2, num_clients, theta, "AxisNecessity", {"lambda0": lam, "C0": c0})


def generate_instance(spec: dict) -> Instance:
    """Build an instance from a generator description such as
    ``{"kind": "DiverseMargin", "d": 4, "num_arms": 8, "num_clients": 50, "seed": 1}``."""
    from .numkit import RngStream

    kind = spec["kind"]
    rng = RngStream(int(spec.get("seed", 0))).child("instance", kind)
    if kind == "DiverseMargin":
        return make_diverse_margin_instance(
            int(spec["d"]), int(spec["num_arms"]), int(spec["num_clients"]), float(spec.get("gap_floor", 0.0)), rng
        )
    if kind == "SphereHard":
        return make_sphere_hard_instance(int(spec["d"]), int(spec["num_clients"]), float(spec["sphere_radius"]), rng)
    if kind == "AxisNecessity":
        return make_axis_instance(int(spec["num_clients"]), rng)
    raise ValueError(f"unknown instance kind {kind!r}")
