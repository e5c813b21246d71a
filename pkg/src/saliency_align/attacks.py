"""Minimal-norm L2 attacks: gradient line search, bisected PGD and Carlini-Wagner.

Attacks are untargeted against the model's own prediction. Every reported
success is re-checked with a fresh forward pass. The batched ``*_batch``
functions do the work; the single-sample functions wrap them.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .network import Network, argmax_lowest

logger = logging.getLogger(__name__)

__all__ = [
    "AttackConfig",
    "AttackResult",
    "default_config",
    "gradient_line_search",
    "pgd_l2_minimal",
    "cw_l2",
    "gradient_line_search_batch",
    "pgd_l2_minimal_batch",
    "cw_l2_batch",
    "run_attacks_batch",
    "empirical_robustness",
    "ATTACK_NAMES",
]

ATTACK_NAMES = ("grad", "pgd", "cw")
CHUNK = 128
# pixels sitting on the box are mapped just inside it so tanh stays invertible
TANH_EDGE = 1 - 1e-6


@dataclass(frozen=True)
class AttackConfig:
    """Attack hyperparameters.

    ``step_size`` is the Adam learning rate for CW and the per-iteration
    step as a fraction of epsilon for PGD. ``loss`` picks the line-search
    direction: ``"binarized"`` follows -grad(Psi^i* - Psi^j*) toward the
    linearized-nearest class, ``"nll"`` follows the cross-entropy gradient.
    """

    max_iterations: int = 100
    step_size: float = 0.01
    binary_search_steps: int = 6
    initial_const: float = 1.0
    confidence_kappa: float = 0.0
    box_constraints: tuple[float, float] | None = None
    seed: int = 0
    loss: str = "binarized"

    def __post_init__(self):
        if self.max_iterations < 1 or self.binary_search_steps < 1:
            raise ValueError("iteration counts must be positive")
        if self.step_size <= 0 or self.initial_const <= 0:
            raise ValueError("step_size and initial_const must be positive")
        if self.confidence_kappa < 0:
            raise ValueError("confidence_kappa must be non-negative")
        if self.box_constraints is not None:
            lo, hi = self.box_constraints
            if not lo < hi:
                raise ValueError(f"box lower bound {lo} must be below upper bound {hi}")
            object.__setattr__(self, "box_constraints", (float(lo), float(hi)))
        if self.loss not in ("binarized", "nll"):
            raise ValueError(f"unknown line-search loss {self.loss!r}")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["box_constraints"] = list(self.box_constraints) if self.box_constraints else None
        return d


def default_config(name: str, box: tuple[float, float] | None = None) -> AttackConfig:
    if name == "grad":
        return AttackConfig(max_iterations=200, box_constraints=box)
    if name == "pgd":
        return AttackConfig(max_iterations=20, step_size=0.1, binary_search_steps=10, box_constraints=box)
    if name == "cw":
        return AttackConfig(max_iterations=100, step_size=0.1, binary_search_steps=4,
                            initial_const=1.0, box_constraints=box)
    raise KeyError(f"unknown attack {name!r}; choose from {ATTACK_NAMES}")


@dataclass
class AttackResult:
    success: bool
    perturbation: np.ndarray | None
    norm: float | None
    adversarial_class: int | None
    queries: int
    attack: str = ""


# --- model access on flattened batches ---------------------------------------------


class _Model:
    """Flat-vector view of a network that counts per-sample evaluations."""

    def __init__(self, net: Network):
        self.net = net
        self.shape = net.input_shape
        self.n = net.n_classes

    def logits(self, X: np.ndarray) -> np.ndarray:
        out = [self.net.logits_batch(X[k:k + CHUNK].reshape((-1,) + self.shape))
               for k in range(0, len(X), CHUNK)]
        return np.concatenate(out) if out else np.zeros((0, self.n))

    def vjp(self, X: np.ndarray, seed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        zs, gs = [], []
        for k in range(0, len(X), CHUNK):
            z, g = self.net.vjp_batch(X[k:k + CHUNK].reshape((-1,) + self.shape), seed[k:k + CHUNK])
            zs.append(z)
            gs.append(g.reshape(len(z), -1))
        if not zs:
            return np.zeros((0, self.n)), np.zeros((0, X.shape[1]))
        return np.concatenate(zs), np.concatenate(gs)

    def jacobian(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = self.n
        per = max(1, CHUNK // n)
        zs, js = [], []
        for k in range(0, len(X), per):
            xb = X[k:k + per]
            rep = np.repeat(xb, n, axis=0)
            seed = np.tile(np.eye(n), (len(xb), 1))
            z, g = self.net.vjp_batch(rep.reshape((-1,) + self.shape), seed)
            zs.append(z[::n])
            js.append(g.reshape(len(xb), n, -1))
        return np.concatenate(zs), np.concatenate(js)


def _margin_seed(Z: np.ndarray, i_star: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Seed for grad(Psi^i* - max_{j != i*} Psi^j) and that margin."""
    rows = np.arange(len(Z))
    other = Z.copy()
    other[rows, i_star] = -np.inf
    j = argmax_lowest(other)
    j = np.atleast_1d(j)
    seed = np.zeros_like(Z)
    seed[rows, i_star] = 1.0
    seed[rows, j] -= 1.0
    return seed, Z[rows, i_star] - Z[rows, j]


def _clip(X: np.ndarray, box) -> np.ndarray:
    return X if box is None else np.clip(X, box[0], box[1])


def _line_search_dirs(model: _Model, X: np.ndarray, i_star: np.ndarray, loss: str) -> tuple[np.ndarray, np.ndarray]:
    """Unit ascent directions of the chosen loss, and a per-sample query count."""
    rows = np.arange(len(X))
    if loss == "nll":
        Z = model.logits(X)
        p = np.exp(Z - Z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        seed = p.copy()
        seed[rows, i_star] -= 1.0
        _, G = model.vjp(X, seed)
        queries = 2
        dead = np.linalg.norm(G, axis=1) < 1e-300
        if dead.any():
            # saturated softmax: use the margin gradient toward the runner-up class
            s, _ = _margin_seed(Z[dead], i_star[dead])
            G[dead] = -model.vjp(X[dead], s)[1]
    else:
        Z, J = model.jacobian(X)
        G = np.zeros_like(X)
        for k in range(len(X)):
            i = i_star[k]
            diff = J[k, i][None, :] - J[k]
            nd = np.linalg.norm(diff, axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                q = np.where(nd >= 1e-12, (Z[k, i] - Z[k]) / nd, np.inf)
            q[i] = np.inf
            j = int(np.argmin(q))
            G[k] = -diff[j] if np.isfinite(q[j]) else 0.0
        queries = model.n
    norms = np.linalg.norm(G, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        D = np.where(norms > 0, G / norms, 0.0)
    return D, np.full(len(X), queries)


def _line_search(model: _Model, X: np.ndarray, i_star: np.ndarray, D: np.ndarray, box,
                 max_steps: int = 200) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exponential search then bisection for the first misclassifying t along D.

    Returns (success, perturbation, queries). The bracket [lo, hi] always
    has a clean point at lo and an adversarial point at hi.
    """
    N = len(X)
    xn = np.linalg.norm(X, axis=1)
    scale = np.maximum(xn, 1.0)
    t_max = 1e3 * scale
    tol = np.maximum(1e-4 * xn, 1e-6)
    lo = np.zeros(N)
    hi = np.full(N, np.nan)
    t = tol.copy()
    queries = np.zeros(N, dtype=int)
    valid = np.linalg.norm(D, axis=1) > 0
    searching = valid.copy()
    for _ in range(max_steps):
        idx = np.flatnonzero(searching)
        if idx.size == 0:
            break
        P = _clip(X[idx] + t[idx, None] * D[idx], box)
        adv = argmax_lowest(model.logits(P)) != i_star[idx]
        queries[idx] += 1
        hit, miss = idx[adv], idx[~adv]
        hi[hit] = t[hit]
        searching[hit] = False
        lo[miss] = t[miss]
        t[miss] *= 2.0
        searching[miss[t[miss] > t_max[miss]]] = False
    found = ~np.isnan(hi)
    bisect = found.copy()
    for _ in range(max_steps):
        idx = np.flatnonzero(bisect & (hi - lo > tol))
        if idx.size == 0:
            break
        mid = 0.5 * (lo[idx] + hi[idx])
        P = _clip(X[idx] + mid[:, None] * D[idx], box)
        adv = argmax_lowest(model.logits(P)) != i_star[idx]
        queries[idx] += 1
        hi[idx[adv]] = mid[adv]
        lo[idx[~adv]] = mid[~adv]
    pert = np.zeros_like(X)
    f = np.flatnonzero(found)
    pert[f] = _clip(X[f] + hi[f, None] * D[f], box) - X[f]
    return found, pert, queries


def _finalize(model: _Model, X: np.ndarray, i_star: np.ndarray, ok: np.ndarray, pert: np.ndarray,
              queries: np.ndarray, name: str, shape) -> list[AttackResult]:
    """Re-verify successes with a fresh forward pass and package results."""
    results = []
    cls = np.full(len(X), -1)
    if ok.any():
        idx = np.flatnonzero(ok)
        cls[idx] = argmax_lowest(model.logits(X[idx] + pert[idx]))
    for k in range(len(X)):
        good = bool(ok[k]) and cls[k] != i_star[k]
        if ok[k] and not good:
            logger.warning("%s: candidate for sample %d failed re-verification", name, k)
        if good:
            e = pert[k].reshape(shape).copy()
            results.append(AttackResult(True, e, float(np.linalg.norm(e)), int(cls[k]), int(queries[k]) + 1, name))
        else:
            results.append(AttackResult(False, None, None, None, int(queries[k]), name))
    return results


def _prep(net: Network, X) -> tuple[_Model, np.ndarray, np.ndarray]:
    model = _Model(net)
    X = np.asarray(X, dtype=np.float64).reshape(-1, int(np.prod(net.input_shape)))
    i_star = np.atleast_1d(argmax_lowest(model.logits(X)))
    return model, X, i_star


def gradient_line_search_batch(net: Network, X, cfg: AttackConfig) -> list[AttackResult]:
    model, Xf, i_star = _prep(net, X)
    ok, pert, q = _line_search_raw(model, Xf, i_star, cfg)
    return _finalize(model, Xf, i_star, ok, pert, q, "grad", net.input_shape)


def _line_search_raw(model, Xf, i_star, cfg):
    D, q0 = _line_search_dirs(model, Xf, i_star, cfg.loss)
    ok, pert, q = _line_search(model, Xf, i_star, D, cfg.box_constraints, max_steps=cfg.max_iterations)
    return ok, pert, q + q0


# --- PGD ------------------------------------------------------------------------------


def _pgd_fixed(model: _Model, X: np.ndarray, i_star: np.ndarray, eps: np.ndarray, cfg: AttackConfig,
               callback: Callable[[np.ndarray, np.ndarray, np.ndarray], None] | None = None):
    """Normalized-gradient descent on the logit margin inside the eps-ball (and box).

    ``callback(rows, delta, eps)`` sees every iterate of the rows that moved.
    """
    N = len(X)
    box = cfg.box_constraints
    delta = np.zeros_like(X)
    done = np.zeros(N, dtype=bool)
    queries = np.zeros(N, dtype=int)
    alpha = cfg.step_size * eps
    for _ in range(cfg.max_iterations):
        idx = np.flatnonzero(~done)
        if idx.size == 0:
            break
        Z = model.logits(X[idx] + delta[idx])
        seed, _ = _margin_seed(Z, i_star[idx])
        _, G = model.vjp(X[idx] + delta[idx], seed)
        queries[idx] += 1
        adv = argmax_lowest(Z) != i_star[idx]
        done[idx[adv]] = True
        step = idx[~adv]
        if step.size == 0:
            break
        G = G[~adv]
        gn = np.linalg.norm(G, axis=1, keepdims=True)
        G = np.where(gn > 0, G / np.where(gn > 0, gn, 1.0), 0.0)
        d = delta[step] - alpha[step, None] * G
        dn = np.linalg.norm(d, axis=1)
        factor = np.where(dn > eps[step], eps[step] / np.maximum(dn, 1e-300), 1.0)
        d = d * factor[:, None]
        if box is not None:
            d = _clip(X[step] + d, box) - X[step]
        delta[step] = d
        if callback is not None:
            callback(step, d, eps[step])
    rest = np.flatnonzero(~done)
    if rest.size:
        adv = argmax_lowest(model.logits(X[rest] + delta[rest])) != i_star[rest]
        queries[rest] += 1
        done[rest[adv]] = True
    return done, delta, queries


def pgd_l2_minimal_batch(net: Network, X, cfg: AttackConfig,
                         upper: Sequence[AttackResult] | None = None,
                         callback: Callable | None = None) -> list[AttackResult]:
    """Bisection over epsilon around a fixed-epsilon PGD inner loop.

    ``upper`` supplies successful perturbations that bound epsilon from
    above (by default a gradient line search with the same box); samples
    without one grow epsilon geometrically until PGD succeeds.
    """
    model, Xf, i_star = _prep(net, X)
    N = len(Xf)
    if upper is None:
        ok, pert, queries = _line_search_raw(model, Xf, i_star, replace(cfg, max_iterations=200))
    else:
        ok = np.array([r.success for r in upper], dtype=bool)
        pert = np.stack([r.perturbation.reshape(-1) if r.success else np.zeros(Xf.shape[1]) for r in upper]) \
            if N else np.zeros_like(Xf)
        queries = np.array([r.queries for r in upper], dtype=int)
    best = pert.copy()
    hi = np.where(ok, np.linalg.norm(pert, axis=1), np.nan)

    missing = np.flatnonzero(~ok)
    if missing.size:
        xn = np.maximum(np.linalg.norm(Xf[missing], axis=1), 1.0)
        eps = 1e-3 * xn
        pending = np.ones(missing.size, dtype=bool)
        while pending.any() and (eps[pending] <= 1e3 * xn[pending]).any():
            sel = np.flatnonzero(pending & (eps <= 1e3 * xn))
            idx = missing[sel]
            s, d, q = _pgd_fixed(model, Xf[idx], i_star[idx], eps[sel], cfg)
            queries[idx] += q
            hit = idx[s]
            best[hit] = d[s]
            hi[hit] = eps[sel][s]
            ok[hit] = True
            pending[sel[s]] = False
            eps[sel[~s]] *= 4.0
            pending[sel[~s][eps[sel[~s]] > 1e3 * xn[sel[~s]]]] = False

    lo = np.zeros(N)
    active = np.flatnonzero(ok)
    for _ in range(cfg.binary_search_steps):
        if active.size == 0:
            break
        mid = 0.5 * (lo[active] + hi[active])
        s, d, q = _pgd_fixed(model, Xf[active], i_star[active], mid, cfg, callback)
        queries[active] += q
        won = active[s]
        hi[won] = mid[s]
        dn = np.linalg.norm(d[s], axis=1)
        better = dn < np.linalg.norm(best[won], axis=1)
        best[won[better]] = d[s][better]
        lo[active[~s]] = mid[~s]
    return _finalize(model, Xf, i_star, ok, best, queries, "pgd", net.input_shape)


# --- Carlini-Wagner ---------------------------------------------------------------------


def _ray_refine(model: _Model, X, i_star, pert, ok, steps: int = 30):
    """Shrink each successful perturbation along its own ray to the first adversarial scale."""
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        return pert, np.zeros(len(X), dtype=int)
    lo = np.zeros(idx.size)
    hi = np.ones(idx.size)
    q = np.zeros(len(X), dtype=int)
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        adv = argmax_lowest(model.logits(X[idx] + mid[:, None] * pert[idx])) != i_star[idx]
        q[idx] += 1
        hi = np.where(adv, mid, hi)
        lo = np.where(adv, lo, mid)
    out = pert.copy()
    out[idx] = hi[:, None] * pert[idx]
    return out, q


def cw_l2_batch(net: Network, X, cfg: AttackConfig,
                start: Sequence[AttackResult] | None = None, warm_start: bool = False) -> list[AttackResult]:
    """Carlini-Wagner L2 with a bisection over the trade-off constant c.

    ``start`` (by default a gradient line search with the same box) seeds
    the best-so-far perturbation, so the result is never worse than it.
    Optimisation begins at x itself unless ``warm_start`` is set, in which
    case it begins at the start perturbation. The best success is finally
    shrunk along its ray to the decision boundary. With box constraints the
    variable is squashed through tanh onto the box.
    """
    model, Xf, i_star = _prep(net, X)
    N, D = Xf.shape
    box = cfg.box_constraints
    kappa = cfg.confidence_kappa
    if start is None:
        ok0, p0, queries = _line_search_raw(model, Xf, i_star, replace(cfg, max_iterations=200))
    else:
        ok0 = np.array([r.success for r in start], dtype=bool)
        p0 = np.stack([r.perturbation.reshape(-1) if r.success else np.zeros(D) for r in start]) \
            if N else np.zeros_like(Xf)
        queries = np.array([r.queries for r in start], dtype=int)

    if box is not None:
        lo_b, hi_b = box
        half = 0.5 * (hi_b - lo_b)

        def to_x(w):
            return lo_b + half * (np.tanh(w) + 1.0)

        u = np.clip((Xf + (p0 if warm_start else 0.0) - lo_b) / half - 1.0, -TANH_EDGE, TANH_EDGE)
        w0 = np.arctanh(u)
    else:
        def to_x(w):
            return Xf + w

        w0 = p0.copy() if warm_start else np.zeros_like(Xf)

    best_pert = p0.copy()
    best_norm = np.where(ok0, np.linalg.norm(p0, axis=1), np.inf)
    c = np.full(N, cfg.initial_const)
    c_lo = np.zeros(N)
    c_hi = np.full(N, np.inf)
    lr = cfg.step_size
    b1, b2, eps_adam = 0.9, 0.999, 1e-8

    for _ in range(cfg.binary_search_steps):
        w = w0.copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        won = np.zeros(N, dtype=bool)
        for it in range(1, cfg.max_iterations + 1):
            xa = to_x(w)
            Z = model.logits(xa)
            seed, margin = _margin_seed(Z, i_star)
            _, G = model.vjp(xa, seed)
            queries += 1
            adv = argmax_lowest(Z) != i_star
            d = xa - Xf
            dn = np.linalg.norm(d, axis=1)
            better = adv & (dn < best_norm)
            best_norm[better] = dn[better]
            best_pert[better] = d[better]
            won |= adv
            hinge = (margin > -kappa).astype(np.float64)
            gx = 2.0 * d + (c * hinge)[:, None] * G
            gw = gx * (half * (1.0 - np.tanh(w) ** 2)) if box is not None else gx
            m = b1 * m + (1 - b1) * gw
            v = b2 * v + (1 - b2) * gw * gw
            w = w - lr * (m / (1 - b1 ** it)) / (np.sqrt(v / (1 - b2 ** it)) + eps_adam)
        c_hi = np.where(won, np.minimum(c_hi, c), c_hi)
        c_lo = np.where(won, c_lo, np.maximum(c_lo, c))
        c = np.where(np.isfinite(c_hi), 0.5 * (c_lo + c_hi), c * 10.0)

    ok = np.isfinite(best_norm)
    best_pert, q = _ray_refine(model, Xf, i_star, best_pert, ok)
    queries += q
    return _finalize(model, Xf, i_star, ok, best_pert, queries, "cw", net.input_shape)


# --- single-sample front end -------------------------------------------------------------


def gradient_line_search(net: Network, x, cfg: AttackConfig | None = None) -> AttackResult:
    return gradient_line_search_batch(net, np.asarray(x)[None], cfg or default_config("grad"))[0]


def pgd_l2_minimal(net: Network, x, cfg: AttackConfig | None = None, callback=None) -> AttackResult:
    return pgd_l2_minimal_batch(net, np.asarray(x)[None], cfg or default_config("pgd"), callback=callback)[0]


def cw_l2(net: Network, x, cfg: AttackConfig | None = None) -> AttackResult:
    return cw_l2_batch(net, np.asarray(x)[None], cfg or default_config("cw"))[0]


def run_attacks_batch(net: Network, X, cfgs: Mapping[str, AttackConfig]) -> dict[str, list[AttackResult]]:
    """Run the configured attacks on a batch.

    PGD and CW reuse the gradient attack's result as their upper bound /
    starting point when the gradient attack is configured with the same box.
    """
    X = np.asarray(X, dtype=np.float64)
    unknown = set(cfgs) - set(ATTACK_NAMES)
    if unknown:
        raise KeyError(f"unknown attacks: {sorted(unknown)}")
    out: dict[str, list[AttackResult]] = {}
    grad = None
    if "grad" in cfgs:
        grad = out["grad"] = gradient_line_search_batch(net, X, cfgs["grad"])
    same_box = lambda name: grad is not None and cfgs[name].box_constraints == cfgs["grad"].box_constraints  # noqa: E731
    if "pgd" in cfgs:
        out["pgd"] = pgd_l2_minimal_batch(net, X, cfgs["pgd"], upper=grad if same_box("pgd") else None)
    if "cw" in cfgs:
        out["cw"] = cw_l2_batch(net, X, cfgs["cw"], start=grad if same_box("cw") else None)
    return {k: out[k] for k in cfgs}


def empirical_robustness(net: Network, x, cfgs: Mapping[str, AttackConfig]) -> tuple[float | None, dict[str, AttackResult]]:
    """Smallest successful perturbation norm over the configured attacks (``None`` if all fail)."""
    if not cfgs:
        raise ValueError("configure at least one attack")
    res = {k: v[0] for k, v in run_attacks_batch(net, np.asarray(x)[None], cfgs).items()}
    norms = [r.norm for r in res.values() if r.success]
    return (min(norms) if norms else None), res
