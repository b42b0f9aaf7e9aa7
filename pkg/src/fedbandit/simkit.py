"""Round-synchronized simulation of M clients and a server.

Rounds are grouped into phases of length 2^p (p = 1, 2, ...). Within a
phase no information crosses the client/server boundary, so a greedy
client's whole phase is processed as one block; LinUCB phases step round
by round. Contexts and reward noise come from per-(client, phase) random
streams, so every algorithm sees the same environment draws for a seed.
"""

from __future__ import annotations

import dataclasses
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import banditalgos as ba
from . import envmod, numkit
from .dpmech import PrivacyParams, robin_budget, robin_budget_spent
from .errors import ConfigError
from .numkit import RngStream

ALGORITHMS = ("Robin", "LocalOnly", "NonPrivateAvg")


@dataclass
class RunConfig:
    instance: envmod.Instance
    algorithm: str = "Robin"
    T: int = 1024
    privacy: PrivacyParams = field(default_factory=lambda: PrivacyParams(1.0, 1e-5))
    beta: float = 0.05
    seed: int = 0
    U: int | None = None
    alpha: float | None = None
    lambda0: float | None = None  # replaces the instance's lambda0 in U and the aggregation radius
    M: int | None = None
    d: int | None = None
    rtol: float = 1e-10
    instance_spec: dict | None = None  # generator spec, lets sweeps over M rebuild the instance

    def validate(self) -> None:
        inst = self.instance
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.T < 2:
            raise ConfigError("T must be at least 2")
        if self.M is not None and self.M != inst.num_clients:
            raise ConfigError(f"M={self.M} does not match the instance's {inst.num_clients} clients")
        if self.d is not None and self.d != inst.d:
            raise ConfigError(f"d={self.d} does not match the instance dimension {inst.d}")
        if inst.num_clients < 1:
            raise ConfigError("need at least one client")
        if not 0 < self.beta < 1:
            raise ConfigError("beta must lie in (0, 1)")
        if self.U is not None and self.U < 1:
            raise ConfigError("U override must be at least 1")
        if self.lambda0 is not None and not self.lambda0 > 0:
            raise ConfigError("lambda0 override must be positive")
        lam = self.effective_lambda0
        if self.algorithm != "LocalOnly":
            if self.privacy.delta <= 0:
                raise ConfigError("ROBIN needs delta > 0")
            if self.U is None and not (lam and lam > 0 and inst.C0 is not None):
                raise ConfigError("U needs positive lambda0 and a C0 estimate; set the U or lambda0 override")
        if self.algorithm == "Robin" and not (lam and lam > 0):
            raise ConfigError("ROBIN's aggregation radius needs lambda0 > 0; set the lambda0 override")

    @property
    def effective_lambda0(self) -> float | None:
        return self.lambda0 if self.lambda0 is not None else self.instance.lambda0


def num_phases(T: int) -> int:
    return math.ceil(math.log2(T + 1))


@dataclass
class PhaseDiag:
    phase: int
    length: int
    min_eig_per_client: np.ndarray
    est_error: float
    eps_spent: float
    delta_spent: float
    aggregated: bool


@dataclass
class RunResult:
    cumulative_regret: np.ndarray
    phases: list[PhaseDiag]
    P: int
    U: int | None
    alpha: float
    c1: float | None
    eps0: float | None
    delta0: float | None
    wallclock: float = 0.0
    traffic: list | None = None

    @property
    def final_regret(self) -> float:
        return float(self.cumulative_regret[-1])

    def phase_end_times(self) -> list[int]:
        """Round counts at the end of each *complete* phase."""
        out, t = [], 0
        for ph in self.phases:
            t += ph.length
            if ph.length == 2**ph.phase:
                out.append(t)
        return out

    def phase_totals(self) -> np.ndarray:
        """Regret accumulated within each complete phase."""
        ends = self.phase_end_times()
        cum = np.concatenate(([0.0], self.cumulative_regret))
        starts = [0] + ends[:-1]
        return np.array([cum[e] - cum[s] for s, e in zip(starts, ends)])

    def log_slope(self, last: int = 4) -> float:
        """Least-squares slope of cumulative regret against log2(t) over the last complete phases."""
        ends = self.phase_end_times()[-last:]
        if len(ends) < 2:
            return math.nan
        x = np.log2(ends)
        y = self.cumulative_regret[np.array(ends) - 1]
        return float(np.polyfit(x, y, 1)[0])


Policy = Callable[[int, np.ndarray, RngStream], np.ndarray]


def _play_linucb_phase(clients: list[ba.RobinClient], X, eta, theta) -> np.ndarray:
    """Step every client through one LinUCB phase, round by round.

    Clients never see each other's data; their independent updates are only
    stacked so each round is a handful of batched linear-algebra calls. The
    choices match calling ``step``/``observe`` per client.
    """
    M, n = eta.shape
    V = np.stack([c.acc.V for c in clients])
    Y = np.stack([c.acc.Y for c in clients])
    alpha = clients[0].acc.alpha
    rows = np.arange(M)
    chosen = np.empty((M, n), dtype=int)
    for t in range(n):
        a = ba.linucb_select_batch(V, Y, alpha, X[:, t])
        x = X[rows, t, a]
        r = np.einsum("md,d->m", x, theta) + eta[:, t]
        V += x[:, :, None] * x[:, None, :]
        Y += x * r[:, None]
        chosen[:, t] = a
    for i, c in enumerate(clients):
        c.acc.V, c.acc.Y = V[i].copy(), Y[i].copy()
    return chosen


def run_episode(cfg: RunConfig, *, policy: Policy | None = None, record_traffic: bool = False) -> RunResult:
    """Run T synchronized rounds and collect regret and per-phase diagnostics.

    ``policy`` replaces the learning clients with a fixed rule
    ``policy(client, contexts, rng) -> indices``; it exists for tests.
    """
    cfg.validate()
    start = time.perf_counter()
    inst = cfg.instance
    M, d, T = inst.num_clients, inst.d, cfg.T
    theta_star = inst.theta_star
    root = RngStream(cfg.seed).child("episode")
    P = num_phases(T)
    algo = cfg.algorithm

    split = robin_budget(cfg.privacy, P) if algo != "LocalOnly" else None
    if algo == "LocalOnly":
        U: float = math.inf
        alpha = cfg.alpha if cfg.alpha is not None else ba.compute_alpha(M, cfg.beta, T, d)
    else:
        U = cfg.U if cfg.U is not None else ba.compute_U(d, M, P, inst.C0, cfg.effective_lambda0, cfg.beta)
        alpha = cfg.alpha if cfg.alpha is not None else ba.compute_alpha(M, cfg.beta, 2**U, d)
    clients = [ba.RobinClient(i, d, U, alpha, cfg.rtol) for i in range(M)]
    server = None
    if algo != "LocalOnly":
        server = ba.RobinServer(d, M, P, int(U), split, cfg.beta, cfg.effective_lambda0 or math.nan, private=algo == "Robin")

    per_round = np.zeros(T)
    phases: list[PhaseDiag] = []
    traffic: list | None = [] if record_traffic else None
    broadcast: ba.BroadcastMsg | None = None
    t0, p = 0, 0
    while t0 < T:
        p += 1
        length = min(2**p, T - t0)
        if broadcast is not None and traffic is not None:
            traffic.append(broadcast.to_dict())
        for c in clients:
            c.begin_phase(p, broadcast if p > U else None)
        Xs = np.stack(
            [envmod.sample_contexts(inst, i, length, root.child("client", i, "phase", p, "ctx")) for i in range(M)]
        )
        etas = np.stack([root.child("client", i, "phase", p, "noise").gen.standard_normal(length) for i in range(M)])
        if policy is None and clients[0].mode == ba.INIT:
            chosen_all = _play_linucb_phase(clients, Xs, etas, theta_star)
        else:
            chosen_all = np.empty((M, length), dtype=int)
            for i, c in enumerate(clients):
                if policy is not None:
                    chosen = policy(i, Xs[i], root.child("client", i, "phase", p, "policy"))
                else:
                    chosen = c.select_block(Xs[i])
                chosen_all[i] = chosen
                Xc = Xs[i, np.arange(length), chosen_all[i]]
                c.observe_block(Xc, Xc @ theta_star + etas[i])
        for i in range(M):
            per_round[t0 : t0 + length] += envmod.regrets(theta_star, Xs[i], chosen_all[i])

        min_eigs = np.array([numkit.min_eigenvalue(c.acc.V) for c in clients])
        in_force = clients[0].theta_global if clients[0].mode == ba.GREEDY else None
        est_error = float(np.linalg.norm(in_force - theta_star)) if in_force is not None else math.nan

        aggregated = False
        complete = length == 2**p
        if server is not None and complete and p >= U:
            uploads = [c.local_estimate() for c in clients]
            if traffic is not None:
                traffic.extend(m.to_dict() for m in uploads)
            broadcast = server.aggregate(uploads, 2**p, root.child("server", "phase", p))
            aggregated = True

        if algo == "Robin":
            eps_spent, delta_spent = robin_budget_spent(split, server.aggregations)
        elif algo == "NonPrivateAvg" and server.aggregations > 0:
            eps_spent, delta_spent = math.inf, 0.0
        else:
            eps_spent, delta_spent = 0.0, 0.0
        phases.append(PhaseDiag(p, length, min_eigs, est_error, eps_spent, delta_spent, aggregated))
        t0 += length

    return RunResult(
        cumulative_regret=np.cumsum(per_round),
        phases=phases,
        P=P,
        U=None if U == math.inf else int(U),
        alpha=float(alpha),
        c1=server.c1 if server is not None and algo == "Robin" else None,
        eps0=split.eps0 if split else None,
        delta0=split.delta0 if split else None,
        wallclock=time.perf_counter() - start,
        traffic=traffic,
    )


def baseline_local_only(cfg: RunConfig) -> RunResult:
    return run_episode(dataclasses.replace(cfg, algorithm="LocalOnly"))


def baseline_nonprivate_avg(cfg: RunConfig) -> RunResult:
    return run_episode(dataclasses.replace(cfg, algorithm="NonPrivateAvg"))


# ---------------------------------------------------------------------------
# serialization


def _fmt(v: float) -> str:
    return repr(float(v))


def rounds_csv(result: RunResult, header: str = "") -> str:
    lines = [header] if header else []
    lines.append("round,cum_regret")
    lines.extend(f"{t + 1},{_fmt(v)}" for t, v in enumerate(result.cumulative_regret))
    return "\n".join(lines) + "\n"


def phases_csv(result: RunResult, header: str = "") -> str:
    lines = [header] if header else []
    lines.append("phase,len,min_eig_min,min_eig_med,est_error,eps_spent,delta_spent")
    for ph in result.phases:
        lines.append(
            ",".join(
                [
                    str(ph.phase),
                    str(ph.length),
                    _fmt(np.min(ph.min_eig_per_client)),
                    _fmt(np.median(ph.min_eig_per_client)),
                    _fmt(ph.est_error),
                    _fmt(ph.eps_spent),
                    _fmt(ph.delta_spent),
                ]
            )
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# sweeps

AXES = ("epsilon", "M", "T")


def cell_config(base: RunConfig, axis: str, value, seed: int) -> RunConfig:
    """Config for one sweep cell; its seed depends only on (base seed, cell seed)."""
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    cell_seed = RngStream(base.seed).child("sweep", "seed", seed).seed
    cfg = dataclasses.replace(base, seed=cell_seed)
    if axis == "epsilon":
        cfg.privacy = PrivacyParams(float(value), base.privacy.delta)
    elif axis == "T":
        cfg.T = int(value)
    else:
        if base.instance_spec is None:
            raise ConfigError("sweeping M needs a generated instance (instance spec), not a file")
        spec = dict(base.instance_spec, num_clients=int(value))
        cfg.instance = envmod.generate_instance(spec)
        cfg.instance_spec = spec
        cfg.M = int(value)
    return cfg


@dataclass
class SweepCell:
    value: object
    seed: int
    config: RunConfig
    result: RunResult


def _run_cell(cfg: RunConfig) -> RunResult:
    return run_episode(cfg)


def sweep(base: RunConfig, axis: str, values, seeds, jobs: int = 1) -> list[SweepCell]:
    """Full factorial over values x seeds, in (value, seed) order regardless of ``jobs``."""
    if len(values) == 0 or len(seeds) == 0:
        raise ConfigError("sweep needs at least one value and one seed")
    cells = [(v, s, cell_config(base, axis, v, s)) for v in values for s in seeds]
    if jobs <= 1:
        results = [_run_cell(cfg) for _, _, cfg in cells]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, [cfg for _, _, cfg in cells]))
    return [SweepCell(v, s, cfg, r) for (v, s, cfg), r in zip(cells, results)]
