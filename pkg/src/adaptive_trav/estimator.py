"""Gaussian-process cost and speed regression with CVaR risk shaping.

Two zero-mean GPs with an RBF kernel share one snapshot of the experience
buffer:

* cost model, inputs ``[O / descriptor_scale ; S / speed_norm]`` -> roughness
* speed model, inputs ``[O / descriptor_scale ; R / roughness_scale]`` -> speed

Predictive variances are those of the latent function (observation noise
excluded).  ``rasterize`` evaluates both models over every known map cell;
it drops kernel entries below ``1e-14 * signal_var`` so that well separated
terrain groups are solved independently, which keeps full-map refreshes
inside the control-loop budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg
from scipy.sparse.csgraph import connected_components
from scipy.special import ndtri

from .errors import InvalidInputError, NumericError

S_HARD_MAX = 8.0
_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class GprHyper:
    signal_var: float = 0.25
    length_scale: float = 1.0
    noise_var: float = 1e-3

    def __post_init__(self):
        if not (self.signal_var > 0 and self.length_scale > 0 and self.noise_var > 0):
            raise InvalidInputError("GP hyperparameters must be positive")

    def scaled(self, factor: float) -> "GprHyper":
        """Same kernel for targets multiplied by ``factor``."""
        return GprHyper(self.signal_var * factor ** 2, self.length_scale,
                        self.noise_var * factor ** 2)


@dataclass(frozen=True)
class InputScaling:
    descriptor_scale: float = 1.0
    speed_norm: float = S_HARD_MAX
    roughness_scale: float = 1.0

    def __post_init__(self):
        if not (self.descriptor_scale > 0 and self.speed_norm > 0 and self.roughness_scale > 0):
            raise InvalidInputError("input scales must be positive")


DEFAULT_COST_HYPER = GprHyper()
DEFAULT_SPEED_HYPER = DEFAULT_COST_HYPER.scaled(S_HARD_MAX)


@dataclass(frozen=True, eq=False)
class GprModel:
    """Fitted GP. ``chol`` is the lower Cholesky factor of ``K + noise_var * I``."""

    X: np.ndarray
    y: np.ndarray
    hyper: GprHyper
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0
    kind: str = "generic"
    scaling: InputScaling = InputScaling()
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]


def rbf_kernel(A, B, hyper: GprHyper) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    np.maximum(sq, 0.0, out=sq)
    return hyper.signal_var * np.exp(-sq / (2.0 * hyper.length_scale ** 2))


def fit_gpr(X, y, hyper: GprHyper = DEFAULT_COST_HYPER, kind: str = "generic",
            scaling: InputScaling = InputScaling()) -> GprModel:
    """Factor ``K + noise_var * I`` and solve for the weights.

    A failed factorization is retried with diagonal jitter growing tenfold
    per attempt (ten attempts) before ``NumericError`` is raised.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.shape[0] == 0:
        raise InvalidInputError("cannot fit a GP to an empty snapshot")
    if X.shape[0] != y.shape[0]:
        raise InvalidInputError("inputs and targets differ in length")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise InvalidInputError("non-finite training data")
    K = rbf_kernel(X, X, hyper)
    K[np.diag_indices_from(K)] += hyper.noise_var
    jitter = 0.0
    for attempt in range(11):
        try:
            L = linalg.cholesky(K + jitter * np.eye(len(K)), lower=True, check_finite=False)
            break
        except linalg.LinAlgError:
            jitter = hyper.noise_var * 1e-6 * 10 ** attempt
    else:
        raise NumericError("kernel matrix not positive definite after 10 jitter escalations")
    alpha = linalg.cho_solve((L, True), y, check_finite=False)
    for a in (X, y, L, alpha):
        a.setflags(write=False)
    return GprModel(X, y, hyper, L, alpha, jitter, kind, scaling)


def gpr_predict(model: GprModel, Xq, chunk: int = 4096):
    """Predictive mean and latent variance at the rows of ``Xq``."""
    Xq = np.atleast_2d(np.asarray(Xq, dtype=np.float64))
    mean = np.empty(len(Xq))
    var = np.empty(len(Xq))
    for s in range(0, len(Xq), chunk):
        Ks = rbf_kernel(Xq[s:s + chunk], model.X, model.hyper)
        mean[s:s + chunk] = Ks @ model.alpha
        W = linalg.solve_triangular(model.chol, Ks.T, lower=True, check_finite=False)
        var[s:s + chunk] = model.hyper.signal_var - (W * W).sum(axis=0)
    # floor keeps v > 0 when cancellation leaves a tiny negative residue
    np.maximum(var, model.hyper.signal_var * 1e-12, out=var)
    return mean, var


def _descriptor_matrix(O, scaling: InputScaling) -> np.ndarray:
    O = np.asarray(O, dtype=np.float64)
    if O.ndim == 1:
        O = O[None, :]
    return O / scaling.descriptor_scale


def cost_inputs(O, S, scaling: InputScaling) -> np.ndarray:
    D = _descriptor_matrix(O, scaling)
    S = np.broadcast_to(np.asarray(S, dtype=np.float64), (len(D),))
    return np.column_stack([D, S / scaling.speed_norm])


def speed_inputs(O, R, scaling: InputScaling) -> np.ndarray:
    D = _descriptor_matrix(O, scaling)
    R = np.broadcast_to(np.asarray(R, dtype=np.float64), (len(D),))
    return np.column_stack([D, R / scaling.roughness_scale])


def fit_cost_model(snapshot, hyper: GprHyper = DEFAULT_COST_HYPER,
                   scaling: InputScaling = InputScaling()) -> GprModel:
    snapshot = list(snapshot)
    if not snapshot:
        raise InvalidInputError("empty snapshot")
    X = cost_inputs(np.stack([s.descriptor for s in snapshot]), [s.speed for s in snapshot], scaling)
    y = np.array([s.roughness for s in snapshot])
    return fit_gpr(X, y, hyper, kind="cost", scaling=scaling)


def fit_speed_model(snapshot, hyper: GprHyper = DEFAULT_SPEED_HYPER,
                    scaling: InputScaling = InputScaling()) -> GprModel:
    snapshot = list(snapshot)
    if not snapshot:
        raise InvalidInputError("empty snapshot")
    X = speed_inputs(np.stack([s.descriptor for s in snapshot]),
                     [s.roughness for s in snapshot], scaling)
    y = np.array([s.speed for s in snapshot])
    return fit_gpr(X, y, hyper, kind="speed", scaling=scaling)


def _squeeze(mean, var, O):
    if np.asarray(O).ndim == 1:
        return float(mean[0]), float(var[0])
    return mean, var


def predict_cost(model: GprModel, O, S):
    """``(mu_R, v_R)`` at descriptor(s) ``O`` and speed ``S`` (m/s)."""
    mean, var = gpr_predict(model, cost_inputs(O, S, model.scaling))
    return _squeeze(mean, var, O)


def predict_speed(model: GprModel, O, R_max):
    """``(mu_S, v_S)`` at descriptor(s) ``O`` and roughness budget ``R_max``."""
    mean, var = gpr_predict(model, speed_inputs(O, R_max, model.scaling))
    return _squeeze(mean, var, O)


def cvar_factor(alpha) -> np.ndarray:
    """``phi(Phi^-1(alpha)) / (1 - alpha)``; zero at ``alpha = 0``."""
    a = np.asarray(alpha, dtype=np.float64)
    if np.any(a < 0) or np.any(a >= 1) or np.any(~np.isfinite(a)):
        raise InvalidInputError("alpha must lie in [0, 1)")
    z = ndtri(np.where(a > 0, a, 0.5))
    out = np.exp(-0.5 * z * z) / _SQRT_2PI / (1.0 - a)
    return np.where(a > 0, out, 0.0)


def cvar_adjust(mu, v, alpha):
    """Gaussian CVaR: ``mu + sqrt(v) * phi(Phi^-1(alpha)) / (1 - alpha)``.

    ``alpha = 0`` returns ``mu`` unchanged.
    """
    v_arr = np.asarray(v, dtype=np.float64)
    if np.any(v_arr < 0):
        raise InvalidInputError("variance must be non-negative")
    f = cvar_factor(alpha)
    out = np.asarray(mu, dtype=np.float64) + np.sqrt(v_arr) * f
    out = np.where(f == 0, mu, out)
    return float(out) if out.ndim == 0 else out


def speed_limit(model: GprModel | None, O, R_max: float, alpha_s: float,
                s_hard_max: float = S_HARD_MAX):
    """Risk-adjusted speed limit, clamped to ``[0, s_hard_max]``.

    With no model (empty buffer) the GP prior is used.
    """
    if model is None:
        hyper = DEFAULT_SPEED_HYPER
        mu, v = 0.0, hyper.signal_var
    else:
        mu, v = predict_speed(model, O, R_max)
    return np.clip(cvar_adjust(mu, v, alpha_s), 0.0, s_hard_max)


@dataclass(frozen=True)
class RiskState:
    alpha_r: float = 0.5
    r_max: float = 0.3
    alpha_s: float = 0.5
    alpha_min: float = 0.0
    alpha_max: float = 0.9
    delta_up: float = 0.01
    delta_down: float = 0.05
    eps_v: float = 0.5
    eps_r: float = 0.05

    def __post_init__(self):
        if not 0 <= self.alpha_r < 1:
            raise InvalidInputError("alpha_r must lie in [0, 1)")
        if not 0 <= self.r_max <= 1:
            raise InvalidInputError("r_max must lie in [0, 1]")
        if not 0 <= self.alpha_min <= self.alpha_s <= self.alpha_max < 1:
            raise InvalidInputError("need 0 <= alpha_min <= alpha_s <= alpha_max < 1")
        if self.delta_up < 0 or self.delta_down < 0 or self.eps_v < 0 or self.eps_r < 0:
            raise InvalidInputError("gains and margins must be non-negative")


def update_alpha_s(state: RiskState, measured_speed: float, speed_limit: float,
                   measured_r: float) -> RiskState:
    """Back off when roughness exceeds the budget, explore when comfortably below it."""
    if measured_r > state.r_max:
        return replace(state, alpha_s=max(state.alpha_min, state.alpha_s - state.delta_down))
    if abs(measured_speed - speed_limit) <= state.eps_v and measured_r < state.r_max - state.eps_r:
        return replace(state, alpha_s=min(state.alpha_max, state.alpha_s + state.delta_up))
    return state


# ---------------------------------------------------------------------------
# Batched map prediction

_BLOCK_TOL = 1e-14


def _sq_dist(A, B):
    # in place: the query side can be a full 120x120 grid
    sq = A @ B.T
    sq *= -2.0
    sq += np.einsum("ij,ij->i", A, A)[:, None]
    sq += np.einsum("ij,ij->i", B, B)[None, :]
    np.maximum(sq, 0.0, out=sq)
    return sq


def _blocks(model: GprModel, k: int):
    """Groups of training rows whose descriptor kernel never exceeds the tolerance across groups."""
    blocks = model._cache.get("blocks")
    if blocks is not None:
        return blocks
    ell2 = model.hyper.length_scale ** 2
    cut = -2.0 * ell2 * math.log(_BLOCK_TOL)
    D = model.X[:, :k]
    adj = _sq_dist(D, D) < cut
    n_comp, labels = connected_components(adj, directed=False)
    blocks = []
    for b in range(n_comp):
        idx = np.flatnonzero(labels == b)
        Xb = model.X[idx]
        Kb = rbf_kernel(Xb, Xb, model.hyper)
        Kb[np.diag_indices_from(Kb)] += model.hyper.noise_var + model.jitter
        Lb = linalg.cholesky(Kb, lower=True, check_finite=False)
        ab = linalg.cho_solve((Lb, True), model.y[idx], check_finite=False)
        blocks.append((idx, Lb, ab))
    model._cache["blocks"] = blocks
    return blocks


def _predict_shared(models, conds, descriptors):
    """Mean and latent variance of several models that share training descriptors.

    The models must agree on scaled training descriptors and length scale,
    so they share one block partition.  Squared distances are computed once
    against the block-ordered training rows, and each block's kernel is
    evaluated once for all models.
    """
    m0 = models[0]
    k = m0.X.shape[1] - 1
    ell2 = m0.hyper.length_scale ** 2
    cut = -2.0 * ell2 * math.log(_BLOCK_TOL)
    Q = np.asarray(descriptors, dtype=np.float64) / m0.scaling.descriptor_scale
    parts = [_blocks(m, k) for m in models]
    order = np.concatenate([idx for idx, _, _ in parts[0]])
    sq = _sq_dist(Q, m0.X[order, :k])
    gains = []
    for m, cond in zip(models, conds):
        sc = m.scaling
        c = cond / (sc.speed_norm if m.kind == "cost" else sc.roughness_scale)
        gains.append(m.hyper.signal_var * np.exp(-(c - m.X[:, k]) ** 2 / (2.0 * ell2)))
    means = [np.zeros(len(Q)) for _ in models]
    quads = [np.zeros(len(Q)) for _ in models]
    off = 0
    for b, (idx, _, _) in enumerate(parts[0]):
        sub = sq[:, off:off + len(idx)]
        off += len(idx)
        rows = np.flatnonzero(sub.min(axis=1) < cut)
        if len(rows) == 0:
            continue
        E = np.exp(sub[rows] * (-0.5 / ell2))
        for part, g, mean, quad in zip(parts, gains, means, quads):
            _, Lb, ab = part[b]
            Ks = E * g[idx]
            mean[rows] += Ks @ ab
            W = linalg.solve_triangular(Lb, Ks.T, lower=True, check_finite=False)
            quad[rows] += np.einsum("ij,ij->j", W, W)
    out = []
    for m, mean, quad in zip(models, means, quads):
        sv = m.hyper.signal_var
        out.append((mean, np.maximum(sv - quad, sv * 1e-12)))
    return out


def predict_grid(model: GprModel, descriptors, cond: float):
    """Mean and latent variance for many descriptors at one conditioning value.

    ``cond`` is the raw speed (cost model) or roughness budget (speed model).
    Training rows are grouped into blocks whose cross-kernel stays below
    ``_BLOCK_TOL``; each query only touches blocks it is close to.
    """
    return _predict_shared([model], [cond], descriptors)[0]


def shares_descriptors(a: GprModel, b: GprModel) -> bool:
    k = a.X.shape[1] - 1
    return (a.X.shape == b.X.shape and a.scaling.descriptor_scale == b.scaling.descriptor_scale
            and a.hyper.length_scale == b.hyper.length_scale
            and np.array_equal(a.X[:, :k], b.X[:, :k]))


def rasterize(grid, cost_model: GprModel | None, speed_model: GprModel | None, risk: RiskState,
              query_speed: float, s_hard_max: float = S_HARD_MAX, cells=None):
    """Write cost and speed-limit layers for known cells (or the given subset).

    Cost is the CVaR-adjusted roughness at ``query_speed`` clipped to
    ``[0, 1]``; speed limits use the speed model at ``risk.r_max`` and the
    current ``alpha_s``.  OOD cells get cost 1 and speed 0.  Without models
    the GP prior is used.
    """
    with grid._lock:
        if cells is None:
            ii, jj = np.nonzero(grid.known)
        else:
            ii, jj = (np.asarray(c, dtype=np.int64) for c in cells)
            keep = grid.in_bounds(ii, jj)
            ii, jj = ii[keep], jj[keep]
            keep = grid.weight[ii, jj] > 0
            ii, jj = ii[keep], jj[keep]
        if len(ii) == 0:
            return grid
        D = grid.descriptor[ii, jj]
        mu_r = np.zeros(len(D))
        v_r = np.full(len(D), DEFAULT_COST_HYPER.signal_var)
        mu_s = np.zeros(len(D))
        v_s = np.full(len(D), DEFAULT_SPEED_HYPER.signal_var)
        if cost_model is not None and speed_model is not None \
                and shares_descriptors(cost_model, speed_model):
            (mu_r, v_r), (mu_s, v_s) = _predict_shared(
                [cost_model, speed_model], [query_speed, risk.r_max], D)
        else:
            if cost_model is not None:
                mu_r, v_r = predict_grid(cost_model, D, query_speed)
            if speed_model is not None:
                mu_s, v_s = predict_grid(speed_model, D, risk.r_max)
        cost = np.clip(cvar_adjust(mu_r, v_r, risk.alpha_r), 0.0, 1.0)
        speed = np.clip(cvar_adjust(mu_s, v_s, risk.alpha_s), 0.0, s_hard_max)
        ood = grid.ood[ii, jj]
        cost = np.where(ood, 1.0, cost)
        speed = np.where(ood, 0.0, speed)
        grid.cost[ii, jj] = cost
        grid.speed_limit[ii, jj] = speed
    return grid
