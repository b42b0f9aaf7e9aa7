"""Client and server decision logic: LinUCB, ROBIN's phased client/server,
and the helpers that set their constants.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import dpmech, numkit
from .dpmech import BudgetSplit
from .envmod import DecisionSet
from .errors import IncompleteRound, MissingBroadcast


@dataclass
class LinUcbState:
    V: np.ndarray
    Y: np.ndarray
    alpha: float

    @classmethod
    def zeros(cls, d: int, alpha: float) -> "LinUcbState":
        return cls(np.zeros((d, d)), np.zeros(d), alpha)

    def reset(self) -> None:
        self.V = np.zeros_like(self.V)
        self.Y = np.zeros_like(self.Y)


def _arms(ds) -> np.ndarray:
    return ds.arms if isinstance(ds, DecisionSet) else np.asarray(ds, dtype=float)


def linucb_select(st: LinUcbState, ds) -> int:
    """argmax_x  x^T theta_hat + alpha * ||x||_{(I+V)^{-1}}, theta_hat = (I+V)^{-1} Y.

    Both terms come from one Cholesky factor of I + V; ties go to the lowest index.
    """
    arms = _arms(ds)
    A = np.eye(st.V.shape[0]) + st.V
    L = np.linalg.cholesky(A)
    theta_hat = np.linalg.solve(L.T, np.linalg.solve(L, st.Y))
    W = np.linalg.solve(L, arms.T)
    ucb = arms @ theta_hat + st.alpha * np.sqrt(np.sum(W * W, axis=0))
    return int(np.argmax(ucb))


def linucb_select_batch(V: np.ndarray, Y: np.ndarray, alpha: float, X: np.ndarray) -> np.ndarray:
    """``linucb_select`` for a stack of independent learners: V (n, d, d), Y (n, d), X (n, K, d)."""
    A = np.eye(V.shape[-1]) + V
    L = np.linalg.cholesky(A)
    z = np.linalg.solve(L, Y[..., None])
    theta_hat = np.linalg.solve(np.swapaxes(L, -1, -2), z)[..., 0]
    W = np.linalg.solve(L, np.swapaxes(X, -1, -2))
    ucb = np.einsum("nkd,nd->nk", X, theta_hat) + alpha * np.sqrt(np.sum(W * W, axis=-2))
    return np.argmax(ucb, axis=-1)


def linucb_update(st: LinUcbState, x, r: float) -> LinUcbState:
    x = np.asarray(x, dtype=float)
    st.V += np.outer(x, x)
    st.Y += x * r
    return st


def compute_alpha(M: int, beta: float, T_U: float, d: int) -> float:
    """LinUCB confidence width 1 + sqrt(2 log(M/beta) + d log T_U)."""
    if T_U < 2:
        raise ValueError("T_U must be at least 2")
    return 1.0 + math.sqrt(2.0 * math.log(M / beta) + d * math.log(T_U))


class UCappedWarning(UserWarning):
    pass


def _u_rhs(U: int, d, M, P, C0, lambda0, beta) -> int:
    log_term = math.log(2.0 * d * M * P / beta)
    first = math.log2(64.0 * log_term / lambda0**2)
    second = math.log2(144.0 * d * U * U * (C0 + lambda0) ** 2 * log_term * math.log(2.0) / lambda0**4)
    return max(1, math.ceil(max(first, second)))


def compute_U(d: int, M: int, P: int, C0: float, lambda0: float, beta: float, max_iter: int = 200) -> int:
    """Number of LinUCB initialization phases.

    U appears on both sides of its defining bound (through a U^2 factor), so
    iterate U <- rhs(U) from U = 1; rhs is nondecreasing in U, so this climbs
    to the smallest fixed point. The result is capped at P - 1 (with a
    warning) so at least one phase is left for greedy play.
    """
    if min(d, M, P, C0, lambda0, beta) <= 0:
        raise ValueError("compute_U needs positive inputs")
    cap = max(1, P - 1)
    U = 1
    for _ in range(max_iter):
        nxt = _u_rhs(U, d, M, P, C0, lambda0, beta)
        if nxt == U:
            break
        U = nxt
        if U > cap:
            break
    if U > cap:
        warnings.warn(f"initialization length U={U} exceeds P-1={cap}; capping", UCappedWarning, stacklevel=2)
        return cap
    return U


def compute_c1(d: int, M: int, P: int, beta: float, lambda0: float) -> float:
    return 4.0 * math.sqrt(2.0 * d * math.log(16.0 * d * (M + 1) * P / beta)) / lambda0


# ---------------------------------------------------------------------------
# messages


@dataclass(frozen=True)
class UploadMsg:
    client: int
    phase: int
    theta_tilde: np.ndarray

    def to_dict(self) -> dict:
        return {"type": "upload", "client": self.client, "phase": self.phase, "theta_tilde": self.theta_tilde.tolist()}


@dataclass(frozen=True)
class BroadcastMsg:
    phase: int
    theta_hat: np.ndarray

    def to_dict(self) -> dict:
        return {"type": "broadcast", "phase": self.phase, "theta_hat": self.theta_hat.tolist()}


# ---------------------------------------------------------------------------
# client


INIT, GREEDY = "Init", "Greedy"


class RobinClient:
    """One client of ROBIN.

    Phases 1..U run LinUCB on statistics that accumulate across all of
    them. Each later phase starts from a broadcast global estimate, resets
    the statistics, and plays greedily against that estimate. With
    ``U=math.inf`` this is plain local LinUCB forever.
    """

    def __init__(self, client_id: int, d: int, U: float, alpha: float, rtol: float = 1e-10):
        self.client_id = client_id
        self.d = d
        self.U = U
        self.rtol = rtol
        self.phase = 0
        self.mode = INIT
        self.acc = LinUcbState.zeros(d, alpha)
        self.theta_global: np.ndarray | None = None

    def begin_phase(self, p: int, broadcast: BroadcastMsg | None = None) -> None:
        self.phase = p
        if p <= self.U:
            self.mode = INIT
            return
        if broadcast is None:
            raise MissingBroadcast(f"MissingBroadcast: client {self.client_id} has no estimate for phase {p}")
        if broadcast.phase != p:
            raise ValueError(f"broadcast is for phase {broadcast.phase}, not {p}")
        self.mode = GREEDY
        self.theta_global = np.array(broadcast.theta_hat, dtype=float)
        self.acc.reset()

    def step(self, ds) -> int:
        """Choose an arm for one round (LinUCB while initializing, greedy after)."""
        if self.mode == INIT:
            return linucb_select(self.acc, ds)
        if self.theta_global is None:
            raise MissingBroadcast("MissingBroadcast: greedy step without a global estimate")
        return int(np.argmax(_arms(ds) @ self.theta_global))

    def observe(self, x, r: float) -> None:
        linucb_update(self.acc, x, r)

    def select_block(self, X: np.ndarray) -> np.ndarray:
        """Greedy choices for a stack of decision sets (n, K, d); same as calling ``step`` per row."""
        if self.mode != GREEDY or self.theta_global is None:
            raise MissingBroadcast("MissingBroadcast: block selection needs greedy mode and an estimate")
        return np.argmax(X @ self.theta_global, axis=1)

    def observe_block(self, Xc: np.ndarray, r: np.ndarray) -> None:
        self.acc.V += Xc.T @ Xc
        self.acc.Y += Xc.T @ r

    def local_estimate(self) -> UploadMsg:
        """Least-squares estimate V^+ Y, projected onto the unit ball."""
        theta = numkit.pinv_solve(self.acc.V, self.acc.Y, self.rtol)
        norm = np.linalg.norm(theta)
        if norm > 1.0:
            theta = theta / norm
        return UploadMsg(self.client_id, self.phase, theta)


# ---------------------------------------------------------------------------
# server


@dataclass
class RobinServer:
    d: int
    M: int
    P: int
    U: int
    split: BudgetSplit
    beta: float
    lambda0: float
    private: bool = True
    theta_history: list = field(default_factory=list)

    @property
    def c1(self) -> float:
        return compute_c1(self.d, self.M, self.P, self.beta, self.lambda0)

    @property
    def aggregations(self) -> int:
        return len(self.theta_history)

    def aggregate(self, msgs: list[UploadMsg], phase_len: int, rng) -> BroadcastMsg:
        """Combine one upload per client into the next phase's global estimate.

        Private mode runs the winsorized high-dimensional mean with radius
        c1 / sqrt(phase_len), failure probability beta / (16P) and the
        per-phase budget; otherwise it takes the plain average.
        """
        ids = sorted(m.client for m in msgs)
        if ids != list(range(self.M)):
            raise IncompleteRound(f"IncompleteRound: expected uploads from {self.M} clients, got {len(msgs)}")
        phases = {m.phase for m in msgs}
        if len(phases) != 1:
            raise ValueError("uploads span more than one phase")
        p = phases.pop()
        X = np.array([m.theta_tilde for m in sorted(msgs, key=lambda m: m.client)])
        if self.private:
            d_pad = numkit.next_power_of_two(self.d)
            Xp = np.zeros((self.M, d_pad))
            Xp[:, : self.d] = X
            theta = dpmech.winsorized_mean_highd(
                Xp,
                self.c1 / math.sqrt(phase_len),
                self.beta / (16.0 * self.P),
                self.split.eps0,
                self.split.delta0,
                rng,
            )[: self.d]
        else:
            theta = X.mean(axis=0)
        self.theta_history.append(theta)
        return BroadcastMsg(p + 1, theta)
