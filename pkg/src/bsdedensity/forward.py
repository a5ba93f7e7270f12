"""Forward simulation and the first/second order Malliavin tableaux for U and X.

The forward equation is simulated in Lamperti coordinates: U = g(X) has unit
diffusion, so Euler-Maruyama on U adds the Brownian increments exactly and the
only discretization error sits in the drift.  X is recovered per step through
g^-1.

Malliavin derivatives along a simulated path reduce to one-dimensional
quadratures of state functions:

    D_theta U_t      = exp( int_theta^t (beta o g^-1)'(U_s) ds )
    D_theta X_t      = sigma(X_t) D_theta U_t
    D2_{theta,t} U_s = int_t^s (beta o g^-1)''(U_r) D_r U_s D_t U_r D_theta U_r dr
    D2_{theta,t} X_s = (sigma' sigma)(X_s) D_theta U_s D_t U_s + sigma(X_s) D2 U_s

Because the trapezoid rule makes the log-derivative integral additive, the
whole first-order tableau is represented by one cumulative integral per path
(A_i below) and entries are materialized on demand:

    D_theta U_t = exp(A_t - A_theta),
    D2_{theta,t} U_s = exp(A_s - A_t - A_theta) * (B_s - B_t),

where B is the cumulative trapezoid of (beta o g^-1)''(X_r) exp(A_r).  This
is exactly the triangular tableau of trapezoid quadratures, stored in O(n)
per path instead of O(n^2).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .coeffs import ProblemSpec, eval_derivative
from .errors import OrderingError, SimulationError
from .lamperti import LampertiMap

__all__ = [
    "TimeGrid",
    "PathEnsemble",
    "MalliavinTableau",
    "simulate_forward",
    "malliavin_first_U",
    "malliavin_first_X",
    "malliavin_second_U",
    "malliavin_second_X",
    "dump_ensemble",
    "load_ensemble",
]

_MAGIC = b"BSDENS01"
_VERSION = 1
_HEADER_FMT = "<8sIIIIddQI4x"


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_i = i T / n on [0, T]."""

    T: float
    n_steps: int

    def __post_init__(self) -> None:
        if self.T <= 0:
            raise ValueError("T must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def index_of(self, t: float) -> int:
        """Snap a time in [0, T] to the nearest grid node."""
        i = int(round(t / self.dt))
        if not 0 <= i <= self.n_steps:
            raise ValueError(f"t = {t} outside [0, {self.T}]")
        return i


@dataclass
class PathEnsemble:
    """Seeded Brownian / Lamperti / state paths, one row per surviving path.

    ``dW`` has shape (n_paths, n_steps); W, U, X have shape
    (n_paths, n_steps + 1).  Row i of the increment matrix is a pure function
    of (master_seed, path_id): increments are drawn row-major from a single
    PCG64 stream, so a row's values depend only on its original index.
    Paths that left the certified sigma > 0 box are dropped; ``path_ids``
    maps surviving rows to original indices.
    """

    grid: TimeGrid
    n_paths: int
    master_seed: int
    x0: float
    dW: np.ndarray
    W: np.ndarray
    U: np.ndarray
    X: np.ndarray
    path_ids: np.ndarray
    n_flagged: int
    n_requested: int

    def __post_init__(self) -> None:
        n = self.grid.n_steps
        assert self.dW.shape == (self.n_paths, n)
        assert self.W.shape == (self.n_paths, n + 1)


def _draw_increments(master_seed: int, n_paths: int, n_steps: int, dt: float) -> np.ndarray:
    rng = np.random.default_rng(np.random.PCG64(master_seed))
    return rng.standard_normal((n_paths, n_steps)) * np.sqrt(dt)


def simulate_forward(
    problem: ProblemSpec,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    lamperti_map: LampertiMap | None = None,
    workers: int = 1,
    max_flagged_fraction: float = 0.01,
) -> PathEnsemble:
    """Simulate the forward diffusion by Euler-Maruyama on U = g(X).

    Paths whose U leaves the image of the certified box are clamped, flagged
    and excluded from the returned ensemble; if more than
    ``max_flagged_fraction`` of paths are flagged the run fails.

    ``workers`` only controls the chunking of the path-parallel sweep; chunks
    are merged in fixed path order, so results are bit-identical for any
    worker count.
    """
    if n_paths < 1:
        raise SimulationError("n_paths must be >= 1")
    lmap = lamperti_map or LampertiMap(problem.sigma, problem.b, problem.box)
    n = grid.n_steps
    dt = grid.dt
    dW = _draw_increments(seed, n_paths, n, dt)

    u0 = lmap.transform(problem.x0)
    glo, ghi = lmap.g_range
    margin = 1e-9 * (ghi - glo)

    W = np.empty((n_paths, n + 1))
    U = np.empty((n_paths, n + 1))
    X = np.empty((n_paths, n + 1))
    flagged = np.zeros(n_paths, dtype=bool)

    workers = max(1, int(workers))
    bounds = np.linspace(0, n_paths, workers + 1).astype(int)
    for w in range(workers):
        lo_row, hi_row = bounds[w], bounds[w + 1]
        if hi_row == lo_row:
            continue
        rows = slice(lo_row, hi_row)
        W[rows, 0] = 0.0
        U[rows, 0] = u0
        X[rows, 0] = problem.x0
        dWc = dW[rows]
        for i in range(n):
            drift = lmap.beta(X[rows, i])
            u_next = U[rows, i] + drift * dt + dWc[:, i]
            out = (u_next < glo + margin) | (u_next > ghi - margin)
            if out.any():
                flagged[lo_row + np.nonzero(out)[0]] = True
                u_next = np.clip(u_next, glo + margin, ghi - margin)
            U[rows, i + 1] = u_next
            W[rows, i + 1] = W[rows, i] + dWc[:, i]
            X[rows, i + 1] = lmap.inverse_transform(u_next)

    n_flagged = int(flagged.sum())
    if n_flagged > max_flagged_fraction * n_paths:
        raise SimulationError(
            f"{n_flagged} of {n_paths} paths left the certified box "
            f"[{problem.box[0]}, {problem.box[1]}] (> {max_flagged_fraction:.1%}); "
            "enlarge the working box or shorten the horizon"
        )
    keep = ~flagged
    return PathEnsemble(
        grid=grid,
        n_paths=int(keep.sum()),
        master_seed=seed,
        x0=problem.x0,
        dW=dW[keep],
        W=W[keep],
        U=U[keep],
        X=X[keep],
        path_ids=np.nonzero(keep)[0].astype(np.uint64),
        n_flagged=n_flagged,
        n_requested=n_paths,
    )


def _cumtrapz(values: np.ndarray, dt: float) -> np.ndarray:
    """Cumulative trapezoid along the last axis, starting at 0."""
    out = np.zeros_like(values)
    np.cumsum(0.5 * dt * (values[..., 1:] + values[..., :-1]), axis=-1, out=out[..., 1:])
    return out


class MalliavinTableau:
    """First and second order Malliavin derivatives of U and X along paths.

    Logical layout is the lower-triangular grid DU[theta_i][t_j] (theta <= t)
    per path, with second-order slices indexed by (theta, t, s); physically
    everything derives from the cumulative integrals A and B described in the
    module docstring.  theta arguments snap to grid nodes; accessors reject
    theta > t.
    """

    def __init__(self, ens: PathEnsemble, lmap: LampertiMap, problem: ProblemSpec):
        self.ens = ens
        self.lmap = lmap
        self.problem = problem
        dt = ens.grid.dt
        self.sigX = eval_derivative(problem.sigma, 0, ens.X)
        self.A = _cumtrapz(lmap.beta_prime_sigma(ens.X), dt)
        self._B: np.ndarray | None = None
        self._sig1X: np.ndarray | None = None

    # -- lazy second-order machinery ----------------------------------------

    @property
    def B(self) -> np.ndarray:
        if self._B is None:
            psi2 = self.lmap.beta_comp_second(self.ens.X)
            self._B = _cumtrapz(psi2 * np.exp(self.A), self.ens.grid.dt)
        return self._B

    @property
    def sig1X(self) -> np.ndarray:
        if self._sig1X is None:
            self._sig1X = eval_derivative(self.problem.sigma, 1, self.ens.X)
        return self._sig1X

    # -- guards --------------------------------------------------------------

    def _check_pair(self, theta_idx: int, t_idx: int) -> None:
        n = self.ens.grid.n_steps
        if not (0 <= theta_idx <= n and 0 <= t_idx <= n):
            raise OrderingError(f"indices ({theta_idx}, {t_idx}) outside 0..{n}")
        if theta_idx > t_idx:
            raise OrderingError(
                f"tableau is triangular: theta index {theta_idx} > t index {t_idx}"
            )

    def _canon_second(self, theta_idx: int, t_idx: int, s_idx: int) -> tuple[int, int]:
        lo, hi = min(theta_idx, t_idx), max(theta_idx, t_idx)
        n = self.ens.grid.n_steps
        if not (0 <= lo and s_idx <= n):
            raise OrderingError("second-order indices outside the grid")
        if s_idx < hi:
            raise OrderingError(
                f"second-order slice needs max(theta, t) <= s; got s index {s_idx} < {hi}"
            )
        return lo, hi

    # -- scalar accessors (per spec operations) ------------------------------

    def first_u(self, path: int, theta_idx: int, t_idx: int) -> float:
        self._check_pair(theta_idx, t_idx)
        return float(np.exp(self.A[path, t_idx] - self.A[path, theta_idx]))

    def first_x(self, path: int, theta_idx: int, t_idx: int) -> float:
        self._check_pair(theta_idx, t_idx)
        return float(self.sigX[path, t_idx]) * self.first_u(path, theta_idx, t_idx)

    def second_u(self, path: int, theta_idx: int, t_idx: int, s_idx: int) -> float:
        lo, hi = self._canon_second(theta_idx, t_idx, s_idx)
        a = self.A[path]
        return float(
            np.exp(a[s_idx] - a[hi] - a[lo]) * (self.B[path, s_idx] - self.B[path, hi])
        )

    def second_x(self, path: int, theta_idx: int, t_idx: int, s_idx: int) -> float:
        lo, hi = self._canon_second(theta_idx, t_idx, s_idx)
        a = self.A[path]
        du_prod = np.exp(2.0 * a[s_idx] - a[hi] - a[lo])
        d2u = np.exp(a[s_idx] - a[hi] - a[lo]) * (self.B[path, s_idx] - self.B[path, hi])
        return float(
            self.sig1X[path, s_idx] * self.sigX[path, s_idx] * du_prod
            + self.sigX[path, s_idx] * d2u
        )

    # -- vector accessors used by the backward machinery ---------------------

    def first_u_matrix(self, t_idx: int) -> np.ndarray:
        """DU[theta][t] for all theta <= t, shape (n_paths, t_idx + 1)."""
        self._check_pair(0, t_idx)
        return np.exp(self.A[:, t_idx : t_idx + 1] - self.A[:, : t_idx + 1])

    def first_x_matrix(self, t_idx: int) -> np.ndarray:
        return self.sigX[:, t_idx : t_idx + 1] * self.first_u_matrix(t_idx)

    def first_x_all(self, theta_idx: int, t_idx: int) -> np.ndarray:
        """D_theta X_t across paths, shape (n_paths,)."""
        self._check_pair(theta_idx, t_idx)
        return self.sigX[:, t_idx] * np.exp(self.A[:, t_idx] - self.A[:, theta_idx])


def malliavin_first_U(tab: MalliavinTableau, path: int, theta_idx: int, t_idx: int) -> float:
    """D_theta U_t: exponential of the trapezoid quadrature of (beta o g^-1)'."""
    return tab.first_u(path, theta_idx, t_idx)


def malliavin_first_X(tab: MalliavinTableau, path: int, theta_idx: int, t_idx: int) -> float:
    """D_theta X_t = sigma(X_t) D_theta U_t."""
    return tab.first_x(path, theta_idx, t_idx)


def malliavin_second_U(
    tab: MalliavinTableau, path: int, theta_idx: int, t_idx: int, s_idx: int
) -> float:
    """D2_{theta,t} U_s; (theta, t) are canonicalized to (min, max)."""
    return tab.second_u(path, theta_idx, t_idx, s_idx)


def malliavin_second_X(
    tab: MalliavinTableau, path: int, theta_idx: int, t_idx: int, s_idx: int
) -> float:
    """D2_{theta,t} X_s = (sigma' sigma)(X_s) DU DU + sigma(X_s) D2U."""
    return tab.second_x(path, theta_idx, t_idx, s_idx)


# ---------------------------------------------------------------------------
# Binary ensemble dump (little-endian, layout documented in the README)
# ---------------------------------------------------------------------------


def dump_ensemble(ens: PathEnsemble, path: str | Path) -> None:
    """Write the ensemble in the documented binary layout."""
    header = struct.pack(
        _HEADER_FMT,
        _MAGIC,
        _VERSION,
        ens.grid.n_steps,
        ens.n_paths,
        ens.n_requested,
        ens.grid.T,
        ens.x0,
        ens.master_seed & 0xFFFFFFFFFFFFFFFF,
        ens.n_flagged,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(ens.path_ids, dtype="<u8").tobytes())
        per_path = np.concatenate([ens.dW, ens.W, ens.U, ens.X], axis=1)
        fh.write(np.ascontiguousarray(per_path, dtype="<f8").tobytes())


def load_ensemble(path: str | Path) -> PathEnsemble:
    """Read an ensemble written by :func:`dump_ensemble`."""
    with open(path, "rb") as fh:
        head = fh.read(struct.calcsize(_HEADER_FMT))
        magic, version, n_steps, n_paths, n_requested, T, x0, seed, n_flagged = (
            struct.unpack(_HEADER_FMT, head)
        )
        if magic != _MAGIC or version != _VERSION:
            raise SimulationError(f"{path} is not a version-{_VERSION} ensemble dump")
        path_ids = np.frombuffer(fh.read(8 * n_paths), dtype="<u8")
        n = n_steps
        width = n + 3 * (n + 1)
        data = np.frombuffer(fh.read(8 * n_paths * width), dtype="<f8").reshape(
            n_paths, width
        )
    grid = TimeGrid(T, n_steps)
    return PathEnsemble(
        grid=grid,
        n_paths=n_paths,
        master_seed=int(seed),
        x0=x0,
        dW=data[:, :n].copy(),
        W=data[:, n : 2 * n + 1].copy(),
        U=data[:, 2 * n + 1 : 3 * n + 2].copy(),
        X=data[:, 3 * n + 2 :].copy(),
        path_ids=path_ids.copy(),
        n_flagged=n_flagged,
        n_requested=n_requested,
    )
