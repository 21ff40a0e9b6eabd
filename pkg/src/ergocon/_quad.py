"""Composite Gauss-Legendre quadrature with global panel refinement."""

from __future__ import annotations

import numpy as np
from numpy.polynomial.legendre import leggauss

GL_ORDER = 5
_NODES, _WEIGHTS = leggauss(GL_ORDER)


class QuadratureError(RuntimeError):
    pass


def gl_points(a, b):
    """Map the reference nodes onto each interval [a_i, b_i].

    Returns ``(points, weights)`` with shape ``a.shape + (GL_ORDER,)``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    pts = mid[..., None] + half[..., None] * _NODES
    wts = half[..., None] * _WEIGHTS
    return pts, wts


def panel_integrals(f, edges):
    """Integral of vectorised ``f`` over each panel ``[edges[i], edges[i+1]]``."""
    edges = np.asarray(edges, dtype=float)
    pts, wts = gl_points(edges[:-1], edges[1:])
    return np.sum(f(pts) * wts, axis=-1)


def _panel_edges(a, b, breakpoints, n_per_segment):
    cuts = [a, b]
    for p in breakpoints:
        if a < p < b:
            cuts.append(float(p))
    cuts = np.unique(cuts)
    pieces = [np.linspace(lo, hi, n_per_segment + 1)[:-1] for lo, hi in zip(cuts[:-1], cuts[1:])]
    return np.concatenate(pieces + [np.array([b])])


def integrate(f, a, b, breakpoints=(), atol=1e-12, rtol=1e-12, initial_panels=16, max_panels=2**18):
    """Integrate ``f`` over ``[a, b]``, doubling the panel count until converged.

    ``breakpoints`` are always panel edges, so kinks and jumps located there do
    not spoil the Gauss-Legendre convergence rate.
    """
    if not b > a:
        return 0.0
    n = initial_panels
    prev = float(np.sum(panel_integrals(f, _panel_edges(a, b, breakpoints, n))))
    while n < max_panels:
        n *= 2
        cur = float(np.sum(panel_integrals(f, _panel_edges(a, b, breakpoints, n))))
        if abs(cur - prev) <= max(atol, rtol * abs(cur)):
            return cur
        prev = cur
    raise QuadratureError(f"quadrature did not converge on [{a}, {b}] (last change {abs(cur - prev):.3e})")


def sign_change_roots(f, a, b, n_grid=4096):
    """Roots of ``f`` in (a, b) located by grid sign changes plus bisection."""
    from scipy.optimize import brentq

    xs = np.linspace(a, b, n_grid + 1)
    vals = f(xs)
    roots = []
    for i in np.nonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0)[0]:
        roots.append(brentq(lambda x: float(f(np.array([x]))[0]), xs[i], xs[i + 1], xtol=1e-14))
    for i in np.nonzero(vals[1:-1] == 0.0)[0]:
        roots.append(float(xs[i + 1]))
    return sorted(roots)


def abs_integral(f, a, b, breakpoints=(), atol=1e-12):
    """``∫|f|`` over [a, b], splitting at sign changes so the kinks are panel edges."""
    cuts = list(breakpoints) + sign_change_roots(f, a, b)
    return integrate(lambda x: np.abs(f(x)), a, b, breakpoints=cuts, atol=atol, rtol=1e-12)


def refined_sup(f, a, b, n=2**17, tol=1e-8, max_n=2**22):
    """``sup |f|`` on [a, b] from uniform grids refined until two successive levels agree."""
    prev = float(np.max(np.abs(f(np.linspace(a, b, n + 1)))))
    while n < max_n:
        n *= 2
        cur = float(np.max(np.abs(f(np.linspace(a, b, n + 1)))))
        if abs(cur - prev) <= tol:
            return cur
        prev = cur
    return prev
