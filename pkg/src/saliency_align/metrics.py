"""Alignment, linearized robustness, homogeneous decomposition and pointwise bounds.

All inner products treat inputs as flat vectors in row-major order. A
gradient with norm below ``DEGENERATE_NORM`` counts as zero.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import numpy as np

from .network import Network, argmax_lowest, bias_gradient, input_gradient, logits

logger = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-12

__all__ = [
    "DegenerateSaliencyError",
    "AlignmentReport",
    "alignment",
    "linearized_robustness",
    "binarized_alignment",
    "homogeneous_decomposition",
    "beta_dagger_via_bias",
    "bound_report",
    "check_bounds",
]


class DegenerateSaliencyError(ArithmeticError):
    """A saliency map (or gradient difference) is numerically zero."""


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _align(x: np.ndarray, g: np.ndarray) -> float:
    n = np.linalg.norm(g)
    if n < DEGENERATE_NORM:
        raise DegenerateSaliencyError("saliency map has zero norm")
    return abs(float(x @ g)) / n


def _quotients(z: np.ndarray, jac: np.ndarray, i_star: int) -> tuple[float, int]:
    best, best_j = np.inf, -1
    for j in range(len(z)):
        if j == i_star:
            continue
        d = np.linalg.norm(jac[i_star] - jac[j])
        if d < DEGENERATE_NORM:
            logger.warning("class %d has the same input gradient as class %d; skipped", j, i_star)
            continue
        q = (z[i_star] - z[j]) / d
        if q < best:
            best, best_j = q, j
    if best_j < 0:
        raise DegenerateSaliencyError("every competing class has an identical input gradient")
    return float(best), best_j


def _flat_jacobian(net: Network, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z, jac = net.jacobian(x)
    return z, jac.reshape(len(z), -1)


def alignment(net: Network, x) -> float:
    """|<x, grad Psi^{F(x)}(x)>| / ||grad Psi^{F(x)}(x)||."""
    x = np.asarray(x, dtype=np.float64)
    i = argmax_lowest(logits(net, x))
    return _align(x.ravel(), input_gradient(net, x, i).ravel())


def linearized_robustness(net: Network, x) -> tuple[float, int]:
    """Minimum over j != i* of (Psi^i* - Psi^j) / ||grad Psi^i* - grad Psi^j||, and its argmin."""
    z, jac = _flat_jacobian(net, np.asarray(x, dtype=np.float64))
    return _quotients(z, jac, argmax_lowest(z))


def binarized_alignment(net: Network, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    z, jac = _flat_jacobian(net, x)
    i_star = argmax_lowest(z)
    _, j_star = _quotients(z, jac, i_star)
    return _align(x.ravel(), jac[i_star] - jac[j_star])


def homogeneous_decomposition(net: Network, x, i: int) -> tuple[float, float]:
    """Split logit ``i`` into <x, grad_x Psi^i> and the bias term <b, grad_b Psi^i>."""
    x = np.asarray(x, dtype=np.float64)
    linear_term = float(x.ravel() @ input_gradient(net, x, i).ravel())
    gb = bias_gradient(net, x, i)
    b = np.concatenate([b.ravel() for b in net.biases]) if net.biases else np.zeros(0)
    return linear_term, float(b @ gb)


def beta_dagger_via_bias(net: Network, x, i: int, j: int) -> float:
    """beta^i(x) - beta^j(x) from bias gradients, independent of the logit-gap route."""
    x = np.asarray(x, dtype=np.float64)
    if net.bias_free:
        return 0.0
    b = np.concatenate([b.ravel() for b in net.biases])
    return float(b @ (bias_gradient(net, x, i) - bias_gradient(net, x, j)))


@dataclass
class AlignmentReport:
    """Per-sample alignment, robustness and bound terms; ``None`` marks a missing value."""

    i_star: int
    j_star: int | None = None
    alpha: float | None = None
    alpha_dagger: float | None = None
    rho_tilde: float | None = None
    g: np.ndarray | None = field(default=None, repr=False)
    g_dagger: np.ndarray | None = field(default=None, repr=False)
    beta_dagger: float | None = None
    xi: np.ndarray | None = field(default=None, repr=False)
    gamma: np.ndarray | None = field(default=None, repr=False)
    bound_t2a: float | None = None
    bound_t2b: float | None = None
    bound_t3: float | None = None
    f_xi_equals_f_x: bool | None = None
    norm_g: float | None = None
    norm_g_dagger: float | None = None
    xi_alignment_term: float | None = None
    gdagger_g_distance: float | None = None
    gdagger_gamma_distance: float | None = None
    linear_term: float | None = None
    psi_dagger: float | None = None
    alpha_xi: float | None = None
    missing: tuple[str, ...] = ()

    def scalars(self) -> dict:
        skip = {"g", "g_dagger", "xi", "gamma", "missing"}
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name not in skip}


def bound_report(net: Network, x) -> AlignmentReport:
    """Fill every alignment/bound quantity at ``x``.

    j* is computed once and shared by all terms. beta-dagger is the
    residual (Psi^i* - Psi^j*)(x) - <x, g-dagger>, which equals the bias
    route by the homogeneous decomposition. xi is not clipped to any box.
    """
    x = np.asarray(x, dtype=np.float64)
    xf = x.ravel()
    z, jac = _flat_jacobian(net, x)
    i_star = argmax_lowest(z)
    rep = AlignmentReport(i_star=i_star)
    missing: list[str] = []

    g = jac[i_star]
    rep.g = g.reshape(x.shape)
    rep.norm_g = float(np.linalg.norm(g))
    if rep.norm_g >= DEGENERATE_NORM:
        rep.alpha = abs(float(xf @ g)) / rep.norm_g
    else:
        missing.append("alpha")

    try:
        rep.rho_tilde, rep.j_star = _quotients(z, jac, i_star)
    except DegenerateSaliencyError:
        missing += ["rho_tilde", "j_star", "alpha_dagger", "beta_dagger", "bound_t2a",
                    "bound_t2b", "xi", "gamma", "bound_t3"]
        rep.missing = tuple(missing)
        return rep

    j_star = rep.j_star
    gd = jac[i_star] - jac[j_star]
    ngd = float(np.linalg.norm(gd))
    gd_bar = gd / ngd
    rep.g_dagger = gd.reshape(x.shape)
    rep.norm_g_dagger = ngd
    lin = float(xf @ gd)
    gap = float(z[i_star] - z[j_star])
    rep.linear_term = abs(lin)
    rep.psi_dagger = abs(gap)
    rep.alpha_dagger = abs(lin) / ngd
    rep.beta_dagger = gap - lin
    shift = abs(rep.beta_dagger) / ngd
    rep.bound_t2a = rep.alpha_dagger + shift

    if rep.alpha is not None:
        rep.gdagger_g_distance = float(np.linalg.norm(gd_bar - g / rep.norm_g))
        rep.bound_t2b = rep.alpha + float(np.linalg.norm(xf)) * rep.gdagger_g_distance + shift
    else:
        missing.append("bound_t2b")

    xi = xf + (rep.beta_dagger / ngd) * gd_bar
    rep.xi = xi.reshape(x.shape)
    z_xi, jac_xi = _flat_jacobian(net, rep.xi)
    gamma = jac_xi[i_star]
    rep.gamma = gamma.reshape(x.shape)
    rep.f_xi_equals_f_x = argmax_lowest(z_xi) == i_star
    ngamma = float(np.linalg.norm(gamma))
    if ngamma >= DEGENERATE_NORM:
        gamma_bar = gamma / ngamma
        rep.xi_alignment_term = abs(float(xi @ gamma_bar))
        rep.gdagger_gamma_distance = float(np.linalg.norm(gd_bar - gamma_bar))
        rep.bound_t3 = rep.xi_alignment_term + float(np.linalg.norm(xi)) * rep.gdagger_gamma_distance
        if rep.f_xi_equals_f_x:
            rep.alpha_xi = rep.xi_alignment_term
    else:
        missing += ["gamma", "bound_t3"]
    rep.missing = tuple(missing)
    return rep


def check_bounds(rep, slack: float = 1e-9) -> list[str]:
    """Names of violated inequalities for a report or record (empty when all hold)."""
    bad = []
    rho = rep.rho_tilde
    if rho is None:
        return bad
    if rep.bound_t2a is not None and rho > rep.bound_t2a + slack:
        bad.append("rho_tilde <= bound_t2a")
    if rep.bound_t2a is not None and rep.bound_t2b is not None and rep.bound_t2a > rep.bound_t2b + slack:
        bad.append("bound_t2a <= bound_t2b")
    if rep.bound_t3 is not None and rho > rep.bound_t3 + slack:
        bad.append("rho_tilde <= bound_t3")
    return bad
