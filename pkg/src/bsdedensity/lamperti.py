"""Lamperti transform g(x) = int_0^x du/sigma(u) and derived drift functions.

The state change U = g(X) turns the forward diffusion into a unit-diffusion
equation with drift beta o g^-1, where beta = b/sigma - sigma'/2.  The three
derived functions exposed here,

    beta(x)              = b(x)/sigma(x) - sigma'(x)/2
    beta_prime_sigma(x)  = [sigma,b](x)/sigma(x) - (sigma sigma'')(x)/2
    beta_comp_second(x)  = [sigma,[sigma,b]](x)/sigma(x) - ((sigma'' sigma)' sigma)(x)/2

are (beta o g^-1), its first and its second derivative, all parameterized in
x-coordinates (callers compose with X rather than U, avoiding a double
inversion).
"""

from __future__ import annotations

import numpy as np

from .coeffs import CoefficientFamily, eval_derivative, lie_bracket, iterated_bracket
from .errors import DomainError

__all__ = [
    "LampertiMap",
    "transform",
    "inverse_transform",
    "beta",
    "beta_prime_sigma",
    "beta_comp_second",
]


class LampertiMap:
    """Cached evaluator for g, g^-1 and the derived drift functions.

    The map certifies sigma > 0 on the convex hull of the validity box and
    the origin (g is anchored at 0), then builds a quadrature lattice for g
    by adaptive Simpson refinement.  Instances are immutable after
    construction, so concurrent reads need no coordination.
    """

    def __init__(
        self,
        sigma: CoefficientFamily,
        b: CoefficientFamily,
        box: tuple[float, float],
        quadrature_step: float = 1e-3,
        root_tolerance: float = 1e-12,
    ) -> None:
        if quadrature_step <= 0 or root_tolerance <= 0:
            raise DomainError("quadrature_step and root_tolerance must be positive")
        self.sigma = sigma
        self.b = b
        self.box = (float(box[0]), float(box[1]))
        self.quadrature_step = float(quadrature_step)
        self.root_tolerance = float(root_tolerance)

        lo = min(self.box[0], 0.0)
        hi = max(self.box[1], 0.0)
        n_cells = max(2, int(np.ceil((hi - lo) / self.quadrature_step)))
        # force the origin onto the lattice so that g(0) = 0 exactly
        n_left = int(np.round(n_cells * (0.0 - lo) / (hi - lo)))
        n_left = min(max(n_left, 0), n_cells)
        h_left = (0.0 - lo) / n_left if n_left else 0.0
        h_right = (hi - 0.0) / (n_cells - n_left) if n_cells - n_left else 0.0
        nodes = np.concatenate(
            [
                0.0 - h_left * np.arange(n_left, 0, -1),
                [0.0],
                0.0 + h_right * np.arange(1, n_cells - n_left + 1),
            ]
        )
        self._nodes = nodes
        self._i0 = n_left

        sig_nodes = eval_derivative(sigma, 0, nodes)
        self._certify_positive(sig_nodes, nodes)
        # probe midpoints too before trusting the lattice
        mids = 0.5 * (nodes[:-1] + nodes[1:])
        self._certify_positive(eval_derivative(sigma, 0, mids), mids)

        cell = self._integrate_cells(nodes[:-1], nodes[1:])
        g = np.empty_like(nodes)
        g[0] = 0.0
        np.cumsum(cell, out=g[1:])
        g -= g[self._i0]
        self._g = g
        self._inv_sigma_nodes = 1.0 / sig_nodes
        # constant sigma makes g exactly linear; skip lattice work in that case
        self._const_sigma = (
            float(sigma.params["c"]) if sigma.family == "constant" else None
        )

    # -- internals ---------------------------------------------------------

    def _certify_positive(self, values: np.ndarray, points: np.ndarray) -> None:
        bad = np.argmin(values)
        if values[bad] <= 0.0:
            raise DomainError(
                f"sigma({points[bad]:.6g}) = {values[bad]:.6g} <= 0; the Lamperti "
                "transform requires sigma > 0 on the working interval"
            )

    def _simpson(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        mid = 0.5 * (a + b)
        fa = 1.0 / eval_derivative(self.sigma, 0, a)
        fm = 1.0 / eval_derivative(self.sigma, 0, mid)
        fb = 1.0 / eval_derivative(self.sigma, 0, b)
        return (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def _integrate_cells(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Adaptive Simpson on each cell, refined until the Richardson error
        estimate is below the per-cell share of the quadrature budget."""
        length = self._nodes[-1] - self._nodes[0]
        tol = self.quadrature_step**2
        out = np.zeros(len(a))
        idx = np.arange(len(a))
        lo = a.astype(float).copy()
        hi = b.astype(float).copy()
        coarse = self._simpson(lo, hi)
        for _ in range(24):
            mid = 0.5 * (lo + hi)
            left = self._simpson(lo, mid)
            right = self._simpson(mid, hi)
            fine = left + right
            err = np.abs(fine - coarse) / 15.0
            budget = tol * (hi - lo) / length
            done = err <= budget
            np.add.at(out, idx[done], fine[done] + (fine[done] - coarse[done]) / 15.0)
            keep = ~done
            if not keep.any():
                return out
            idx = np.concatenate([idx[keep], idx[keep]])
            lo = np.concatenate([lo[keep], mid[keep]])
            hi = np.concatenate([mid[keep], hi[keep]])
            coarse = np.concatenate([left[keep], right[keep]])
        raise DomainError("quadrature for g did not converge on the lattice")

    def _domain_check(self, x: np.ndarray) -> None:
        lo, hi = self._nodes[0], self._nodes[-1]
        if x.size and (x.min() < lo or x.max() > hi):
            bad = float(x[np.argmax((x < lo) | (x > hi))])
            raise DomainError(
                f"x = {bad:.6g} is outside the certified interval "
                f"[{lo:.6g}, {hi:.6g}] of this Lamperti map"
            )

    # -- public API ---------------------------------------------------------

    @property
    def g_range(self) -> tuple[float, float]:
        """Image of the certified interval under g."""
        return float(self._g[0]), float(self._g[-1])

    def transform(self, x):
        """g(x) = int_0^x du/sigma(u), absolute error below quadrature_step^2."""
        arr = np.asarray(x, dtype=float)
        scalar = arr.ndim == 0
        arr = np.atleast_1d(arr)
        self._domain_check(arr)
        if self._const_sigma is not None:
            out = arr / self._const_sigma
        else:
            k = np.clip(np.searchsorted(self._nodes, arr, side="right") - 1, 0,
                        len(self._nodes) - 2)
            out = self._g[k] + self._simpson(self._nodes[k], arr)
        return float(out[0]) if scalar else out

    def inverse_transform(self, u):
        """g^-1(u) by monotone bracketing with Newton steps (g^-1)' = sigma o g^-1."""
        arr = np.asarray(u, dtype=float)
        scalar = arr.ndim == 0
        arr = np.atleast_1d(arr).astype(float)
        glo, ghi = self.g_range
        if arr.size and (arr.min() < glo or arr.max() > ghi):
            bad = float(arr[np.argmax((arr < glo) | (arr > ghi))])
            raise DomainError(
                f"u = {bad:.6g} is outside the image [{glo:.6g}, {ghi:.6g}] of the "
                "certified interval under g"
            )
        if self._const_sigma is not None:
            out = arr * self._const_sigma
            return float(out[0]) if scalar else out
        k = np.clip(np.searchsorted(self._g, arr, side="right") - 1, 0,
                    len(self._g) - 2)
        blo = self._nodes[k].copy()
        bhi = self._nodes[k + 1].copy()
        # secant initial guess inside the bracketing cell
        span = self._g[k + 1] - self._g[k]
        frac = np.where(span > 0, (arr - self._g[k]) / np.where(span > 0, span, 1.0), 0.5)
        x = blo + frac * (bhi - blo)
        for _ in range(100):
            r = self.transform(x) - arr
            if np.max(np.abs(r)) <= self.root_tolerance:
                break
            above = r > 0
            bhi = np.where(above, x, bhi)
            blo = np.where(above, blo, x)
            step = r * eval_derivative(self.sigma, 0, x)
            xn = x - step
            outside = (xn <= blo) | (xn >= bhi)
            x = np.where(outside, 0.5 * (blo + bhi), xn)
        else:
            raise DomainError("inverse Lamperti iteration failed to converge")
        return float(x[0]) if scalar else x

    def _sigma_guard(self, x: np.ndarray) -> np.ndarray:
        s = eval_derivative(self.sigma, 0, x)
        smin = np.min(s)
        if smin <= 0.0:
            arr = np.atleast_1d(np.asarray(x, dtype=float))
            sv = np.atleast_1d(np.asarray(s))
            bad = float(arr[np.argmin(sv)])
            raise DomainError(f"sigma({bad:.6g}) <= 0")
        return s

    def beta(self, x):
        """b/sigma - sigma'/2 evaluated at x."""
        s = self._sigma_guard(x)
        return eval_derivative(self.b, 0, x) / s - 0.5 * eval_derivative(self.sigma, 1, x)

    def beta_prime_sigma(self, x):
        """(beta o g^-1)'(g(x)) = [sigma,b](x)/sigma(x) - (sigma sigma'')(x)/2."""
        s = self._sigma_guard(x)
        return lie_bracket(self.sigma, self.b, x) / s - 0.5 * s * eval_derivative(
            self.sigma, 2, x
        )

    def beta_comp_second(self, x):
        """(beta o g^-1)''(g(x)) = [sigma,[sigma,b]]/sigma - ((sigma'' sigma)' sigma)/2.

        Parameterized by x in state space; callers compose with X_r, not U_r.
        """
        s = self._sigma_guard(x)
        s1 = eval_derivative(self.sigma, 1, x)
        s2 = eval_derivative(self.sigma, 2, x)
        s3 = eval_derivative(self.sigma, 3, x)
        return iterated_bracket(self.sigma, self.b, x) / s - 0.5 * (s3 * s + s2 * s1) * s


def transform(lmap: LampertiMap, x):
    return lmap.transform(x)


def inverse_transform(lmap: LampertiMap, u):
    return lmap.inverse_transform(u)


def beta(lmap: LampertiMap, x):
    return lmap.beta(x)


def beta_prime_sigma(lmap: LampertiMap, x):
    return lmap.beta_prime_sigma(x)


def beta_comp_second(lmap: LampertiMap, x):
    return lmap.beta_comp_second(x)
