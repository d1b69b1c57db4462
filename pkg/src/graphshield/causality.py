"""Support-constrained sparse VAR over risk-probability series.

Fits lagged coefficient matrices and the contemporaneous precision matrix by
penalized maximum likelihood under hard support masks, selects the lag order
by AIC, measures effects by partial contemporaneous correlation (PCC, from
the precision matrix) and partial directed correlation (PDC, from the lag
coefficients), and screens both with a per-entry likelihood ratio test.

Conventions: series rows are time, columns are nodes. ``coeffs[l][i, j]`` is
the effect of source j at lag l+1 on target i, i.e. row i of
y_t = sum_l O^(l) y_{t-l} + noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import gammaincc

_LOG_2PI = float(np.log(2.0 * np.pi))


class CausalityError(ValueError):
    pass


class FitDivergence(CausalityError):
    """The objective rose for many consecutive iterations."""


@dataclass
class RiskSeries:
    """Per-node risk probabilities over time: (T, n), entries in [0, 1]."""
    values: np.ndarray
    node_ids: tuple[int, ...] = ()

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise CausalityError(f"series must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise CausalityError("series contains non-finite values")
        if self.values.min() < -1e-12 or self.values.max() > 1 + 1e-12:
            raise CausalityError("risk probabilities must lie in [0, 1]")
        if not self.node_ids:
            self.node_ids = tuple(range(self.values.shape[1]))
        if len(self.node_ids) != self.values.shape[1]:
            raise CausalityError("node_ids length does not match series width")


@dataclass
class VarSpec:
    """Lag order, hard support masks, and penalty weights."""
    lag: int
    temporal_mask: np.ndarray        # (lag, n, n); [l, i, j] allows source j -> target i
    spatial_mask: np.ndarray         # (n, n) symmetric; diagonal always allowed
    lambda1: float = 0.0             # L1 on off-diagonal precision entries
    lambda2: float = 0.0             # L1 on lag coefficients
    strict_paper: bool = False       # printed objective (n/2 log-det) instead of the NLL
    max_iter: int = 10000
    tol: float = 1e-8
    eig_floor: float = 1e-6

    def __post_init__(self):
        self.temporal_mask = np.asarray(self.temporal_mask, dtype=np.float64)
        self.spatial_mask = np.asarray(self.spatial_mask, dtype=np.float64)
        n = self.spatial_mask.shape[0]
        if self.temporal_mask.shape != (self.lag, n, n):
            raise CausalityError(
                f"temporal mask shape {self.temporal_mask.shape} != ({self.lag}, {n}, {n})")
        if not np.array_equal(self.spatial_mask, self.spatial_mask.T):
            raise CausalityError("spatial mask must be symmetric")
        if np.any(np.diag(self.spatial_mask) != 1):
            raise CausalityError("spatial mask diagonal must be allowed")
        for m in (self.temporal_mask, self.spatial_mask):
            if not np.all((m == 0) | (m == 1)):
                raise CausalityError("masks must be 0/1")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise CausalityError("penalty weights must be nonnegative")

    @property
    def n_nodes(self) -> int:
        return self.spatial_mask.shape[0]

    @classmethod
    def full(cls, n: int, lag: int, **kw) -> "VarSpec":
        return cls(lag=lag, temporal_mask=np.ones((lag, n, n)),
                   spatial_mask=np.ones((n, n)), **kw)

    @classmethod
    def from_edges(cls, n: int, lag: int, edges: Iterable[tuple[int, int]], **kw) -> "VarSpec":
        """Masks from directed (source, target) index pairs.

        Lagged support follows the edges (self-lags always allowed); the
        precision support is the symmetrized edge set plus the diagonal.
        """
        temporal = np.zeros((lag, n, n))
        spatial = np.eye(n)
        for l in range(lag):
            np.fill_diagonal(temporal[l], 1.0)
        for s, d in edges:
            temporal[:, d, s] = 1.0
            spatial[s, d] = spatial[d, s] = 1.0
        return cls(lag=lag, temporal_mask=temporal, spatial_mask=spatial, **kw)


@dataclass
class VarFit:
    coeffs: np.ndarray               # (lag, n, n)
    omega: np.ndarray                # (n, n) precision
    xi: np.ndarray                   # (n, n) covariance, inverse of omega
    residuals: np.ndarray            # (T_eff, n)
    mean: np.ndarray                 # centering removed before fitting
    loglik: float
    aic: float
    nonzero: int
    objective: float
    iterations: int
    floor_restores: int
    converged: bool
    objective_curve: list[float] = field(default_factory=list)


def _soft_threshold(x: np.ndarray, thr) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - thr, 0.0)


def _design(values: np.ndarray, lag: int) -> tuple[np.ndarray, np.ndarray]:
    t_total, n = values.shape
    y = values[lag:]
    x = np.concatenate([values[lag - l:t_total - l] for l in range(1, lag + 1)], axis=1)
    return y, x


def _b_mask(spec: VarSpec) -> np.ndarray:
    """Stacked regression mask ((lag*n) x n): column i = allowed regressors of
    target i."""
    n = spec.n_nodes
    mask = np.zeros((spec.lag * n, n))
    for l in range(spec.lag):
        # temporal_mask[l, i, j]: row block l, regressor j, target i
        mask[l * n:(l + 1) * n, :] = spec.temporal_mask[l].T
    return mask


def _coeffs_from_b(b: np.ndarray, lag: int, n: int) -> np.ndarray:
    out = np.empty((lag, n, n))
    for l in range(lag):
        out[l] = b[l * n:(l + 1) * n, :].T
    return out


def _gaussian_loglik(s: np.ndarray, omega: np.ndarray, t_eff: int) -> float:
    n = omega.shape[0]
    sign, logdet = np.linalg.slogdet(omega)
    if sign <= 0:
        raise CausalityError("precision matrix not positive definite")
    return 0.5 * t_eff * logdet - 0.5 * float(np.sum(s * omega)) - 0.5 * t_eff * n * _LOG_2PI


def _objective(y, x, b, omega, spec: VarSpec, t_eff: int) -> float:
    r = y - x @ b
    s = r.T @ r
    sign, logdet = np.linalg.slogdet(omega)
    if sign <= 0:
        return np.inf
    quad = float(np.sum(s * omega))
    if spec.strict_paper:
        smooth = quad - 0.5 * spec.n_nodes * logdet
    else:
        smooth = 0.5 * quad - 0.5 * t_eff * logdet
    off = omega - np.diag(np.diag(omega))
    return smooth + spec.lambda1 * float(np.abs(off).sum()) \
        + spec.lambda2 * float(np.abs(b).sum())


def _spectral_norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(a, 2)) if a.size else 1.0


def fit_var(series: "RiskSeries | np.ndarray", spec: VarSpec) -> VarFit:
    """Penalized maximum likelihood under the support masks.

    Alternates backtracking proximal-gradient steps on the lag coefficients
    (soft-thresholding + hard mask) and on the precision matrix (gradient
    step, off-diagonal soft-threshold, symmetrization, mask, eigenvalue floor
    via a diagonal shift). The objective never increases; convergence is a
    relative objective change below ``spec.tol``.

    The default smooth term is the exact negative Gaussian log-likelihood;
    ``strict_paper`` switches to the printed objective with the n/2 log-det.
    """
    values = series.values if isinstance(series, RiskSeries) else np.asarray(series, float)
    t_total, n = values.shape
    if n != spec.n_nodes:
        raise CausalityError(f"series has {n} nodes, masks cover {spec.n_nodes}")
    if t_total <= n * spec.lag + 5:
        raise CausalityError(
            f"series too short: T={t_total} needs > n*lag+5 = {n * spec.lag + 5}")

    mean = values.mean(axis=0)
    y, x = _design(values - mean, spec.lag)
    t_eff = y.shape[0]
    bmask = _b_mask(spec)
    smask = spec.spatial_mask

    # init: masked per-equation OLS; diagonal precision from residual variances
    b = np.zeros((spec.lag * n, n))
    for i in range(n):
        cols = np.where(bmask[:, i] > 0)[0]
        if cols.size:
            sol, *_ = np.linalg.lstsq(x[:, cols], y[:, i], rcond=None)
            b[cols, i] = sol
    r = y - x @ b
    var0 = np.maximum(r.var(axis=0), 1e-8)
    omega = np.diag(1.0 / var0)

    quad_coef = 1.0 if spec.strict_paper else 0.5
    logdet_coef = 0.5 * n if spec.strict_paper else 0.5 * t_eff

    obj = _objective(y, x, b, omega, spec, t_eff)
    curve = [obj]
    eta_b = 1.0 / max(_spectral_norm(x.T @ x) * _spectral_norm(omega), 1e-12)
    eta_o = 1.0 / max(_spectral_norm(r.T @ r), 1e-12)
    floor_restores = 0
    rising = 0
    it = 0
    for it in range(1, spec.max_iter + 1):
        # --- coefficient step ---
        r = y - x @ b
        grad_b = -2.0 * quad_coef * (x.T @ r @ omega)
        eta = eta_b
        for _ in range(60):
            cand = _soft_threshold(b - eta * grad_b, eta * spec.lambda2) * bmask
            cand_obj = _objective(y, x, cand, omega, spec, t_eff)
            if cand_obj <= obj + 1e-15:
                break
            eta *= 0.5
        if cand_obj <= obj + 1e-15:
            b = cand
            obj_new = cand_obj
            eta_b = min(eta * 2.0, 1e6)
        else:
            obj_new = obj

        # --- precision step ---
        r = y - x @ b
        s = r.T @ r
        try:
            omega_inv = cho_solve(cho_factor(omega), np.eye(n))
        except np.linalg.LinAlgError as err:
            raise CausalityError(f"precision factorization failed: {err}") from err
        grad_o = quad_coef * s - logdet_coef * omega_inv
        eta = eta_o
        improved = False
        for _ in range(60):
            cand = omega - eta * grad_o
            off = cand - np.diag(np.diag(cand))
            cand = np.diag(np.diag(cand)) + _soft_threshold(off, eta * spec.lambda1)
            cand = 0.5 * (cand + cand.T)
            cand *= smask
            eigmin = float(np.linalg.eigvalsh(cand).min())
            restored = eigmin < spec.eig_floor
            if restored:
                cand = cand + (spec.eig_floor - eigmin) * np.eye(n)
            cand_obj = _objective(y, x, b, cand, spec, t_eff)
            if cand_obj <= obj_new + 1e-15:
                improved = True
                break
            eta *= 0.5
        if improved:
            omega = cand
            obj_new = cand_obj
            eta_o = min(eta * 2.0, 1e6)
            if restored:
                floor_restores += 1

        curve.append(obj_new)
        rising = rising + 1 if obj_new > obj + 1e-12 else 0
        if rising >= 50:
            raise FitDivergence("objective rose for 50 consecutive iterations")
        if abs(obj - obj_new) <= spec.tol * max(1.0, abs(obj)):
            obj = obj_new
            break
        obj = obj_new

    converged = it < spec.max_iter or abs(curve[-2] - curve[-1]) <= spec.tol * max(1.0, abs(curve[-2]))
    r = y - x @ b
    s = r.T @ r
    loglik = _gaussian_loglik(s, omega, t_eff)
    coeffs = _coeffs_from_b(b, spec.lag, n)
    xi = cho_solve(cho_factor(omega), np.eye(n))
    nz_o = int(np.count_nonzero(coeffs))
    nz_omega = int(np.count_nonzero(np.triu(omega)))
    aic = 2.0 * (nz_o + nz_omega) - 2.0 * loglik
    return VarFit(coeffs=coeffs, omega=omega, xi=xi, residuals=r, mean=mean,
                  loglik=loglik, aic=aic, nonzero=nz_o + nz_omega, objective=obj,
                  iterations=it, floor_restores=floor_restores, converged=converged,
                  objective_curve=curve)


def select_lag(series: "RiskSeries | np.ndarray", spec_for: Callable[[int], VarSpec],
               lags: Sequence[int] = (1, 2, 3)) -> tuple[int, dict[int, VarFit]]:
    """Fit every candidate lag order and keep the smallest AIC (ties take the
    smaller lag).

    All candidates are fitted on a common effective sample (the series with
    its first max(lags) observations reserved for conditioning); otherwise the
    per-observation likelihood constant biases AIC toward longer lags.
    """
    if not lags:
        raise CausalityError("select_lag: no candidate lags")
    values = series.values if isinstance(series, RiskSeries) else np.asarray(series, float)
    max_lag = max(lags)
    fits: dict[int, VarFit] = {}
    best_lag, best_aic = None, np.inf
    for lag in sorted(lags):
        fit = fit_var(values[max_lag - lag:], spec_for(lag))
        fits[lag] = fit
        if fit.aic < best_aic - 1e-12:
            best_lag, best_aic = lag, fit.aic
    assert best_lag is not None
    return best_lag, fits


# ---------------------------------------------------------------------------
# effect measures
# ---------------------------------------------------------------------------

def pcc(fit: VarFit, i: int, j: int) -> float:
    """Partial contemporaneous correlation -Omega_ij / sqrt(Omega_ii Omega_jj)."""
    if i == j:
        raise CausalityError("pcc: i and j must differ")
    om = fit.omega
    return float(-om[i, j] / np.sqrt(om[i, i] * om[j, j]))


def pdc(fit: VarFit, i: int, j: int, lag: int) -> float:
    """Partial directed correlation of source j at the given lag on target i.

    O^(lag)_ij / sqrt(z Xi_ii) with
    z = Omega_jj + sum_{d<lag} (O^(d) col j)^T Omega (O^(d) col j).
    """
    if not (1 <= lag <= fit.coeffs.shape[0]):
        raise CausalityError(f"pdc: lag {lag} outside 1..{fit.coeffs.shape[0]}")
    z = fit.omega[j, j]
    for d in range(lag - 1):
        col = fit.coeffs[d][:, j]
        z += float(col @ fit.omega @ col)
    return float(fit.coeffs[lag - 1][i, j] / np.sqrt(z * fit.xi[i, i]))


# ---------------------------------------------------------------------------
# likelihood ratio screening
# ---------------------------------------------------------------------------

def chi2_sf(stat: float, df: int = 1) -> float:
    """Upper chi-square tail via the regularized incomplete gamma function."""
    if stat <= 0:
        return 1.0
    return float(gammaincc(0.5 * df, 0.5 * stat))


def _reduced_spec(spec: VarSpec, target: tuple) -> VarSpec:
    kind = target[0]
    if kind == "temporal":
        _k, lag, i, j = target
        tm = spec.temporal_mask.copy()
        tm[lag - 1, i, j] = 0.0
        return replace(spec, temporal_mask=tm)
    if kind == "spatial":
        _k, i, j = target
        if i == j:
            raise CausalityError("spatial LRT target must be off-diagonal")
        sm = spec.spatial_mask.copy()
        sm[i, j] = sm[j, i] = 0.0
        return replace(spec, spatial_mask=sm)
    raise CausalityError(f"unknown LRT target kind {kind!r}")


def lrt_pvalue(series: "RiskSeries | np.ndarray", spec: VarSpec, target: tuple,
               full_fit: VarFit | None = None) -> tuple[float, float]:
    """LRT = -2 (lnL_reduced - lnL_full) for one entry forced to zero.

    ``target`` is ("temporal", lag, i, j) or ("spatial", i, j); the symmetric
    precision pair counts as one parameter, so the null distribution is
    chi-square with one degree of freedom.
    """
    if full_fit is None:
        full_fit = fit_var(series, spec)
    reduced = fit_var(series, _reduced_spec(spec, target))
    stat = -2.0 * (reduced.loglik - full_fit.loglik)
    return stat, chi2_sf(max(stat, 0.0), df=1)


@dataclass
class TestedEffect:
    kind: str          # "pcc" | "pdc"
    i: int             # target index
    j: int             # source index (pcc: the other index)
    lag: int           # 0 for pcc
    value: float
    statistic: float
    p_value: float


@dataclass
class EffectGraph:
    """Significant effects only (p < alpha)."""
    alpha: float
    node_ids: tuple[int, ...]
    spatial: list[TestedEffect]
    temporal: list[TestedEffect]

    @property
    def n_edges(self) -> int:
        return len(self.spatial) + len(self.temporal)


def significance_tests(series: "RiskSeries | np.ndarray", spec: VarSpec,
                       fit: VarFit | None = None) -> list[TestedEffect]:
    """LRT over every unmasked entry: upper-triangle precision pairs and all
    allowed lag coefficients (self-lags included)."""
    if fit is None:
        fit = fit_var(series, spec)
    out: list[TestedEffect] = []
    n = spec.n_nodes
    for i in range(n):
        for j in range(i + 1, n):
            if spec.spatial_mask[i, j] == 0:
                continue
            stat, p = lrt_pvalue(series, spec, ("spatial", i, j), full_fit=fit)
            out.append(TestedEffect("pcc", i, j, 0, pcc(fit, i, j), stat, p))
    for l in range(1, spec.lag + 1):
        for i in range(n):
            for j in range(n):
                if spec.temporal_mask[l - 1, i, j] == 0:
                    continue
                stat, p = lrt_pvalue(series, spec, ("temporal", l, i, j), full_fit=fit)
                out.append(TestedEffect("pdc", i, j, l, pdc(fit, i, j, l), stat, p))
    return out


def effect_graph(tested: Sequence[TestedEffect], alpha: float = 0.05,
                 node_ids: Sequence[int] = ()) -> EffectGraph:
    """Keep effects with p < alpha; everything else is excluded."""
    spatial = [e for e in tested if e.kind == "pcc" and e.p_value < alpha]
    temporal = [e for e in tested if e.kind == "pdc" and e.p_value < alpha]
    return EffectGraph(alpha=alpha, node_ids=tuple(node_ids), spatial=spatial,
                       temporal=temporal)


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def to_dot(graph: EffectGraph, risk_nodes: Iterable[int] = ()) -> str:
    """DOT digraph: undirected (dir=none) PCC edges, arrows for PDC edges
    from source to target, risk nodes filled orange."""
    risk = set(risk_nodes)
    ids = graph.node_ids or tuple(
        sorted({e.i for e in graph.spatial + graph.temporal}
               | {e.j for e in graph.spatial + graph.temporal}))
    lines = ["digraph effects {"]
    for idx, node in enumerate(ids):
        style = ' style=filled fillcolor="orange"' if node in risk else ""
        lines.append(f'  n{idx} [label="{node}"{style}];')
    pos = {node: idx for idx, node in enumerate(ids)}

    def ref(k: int) -> str:
        return f"n{pos[graph.node_ids[k]] if graph.node_ids else k}"

    for e in graph.spatial:
        lines.append(f'  {ref(e.i)} -> {ref(e.j)} [dir=none label="PCC={e.value:.3f} (p={e.p_value:.3g})"];')
    for e in graph.temporal:
        lines.append(f'  {ref(e.j)} -> {ref(e.i)} [label="PDC[l={e.lag}]={e.value:.3f} (p={e.p_value:.3g})"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def effect_table(graph: EffectGraph) -> str:
    """Delimited export: i, j, lag, kind, value, statistic, p."""
    ids = graph.node_ids

    def name(k: int):
        return ids[k] if ids else k

    lines = ["i\tj\tlag\tkind\tvalue\tstatistic\tp"]
    for e in graph.spatial + graph.temporal:
        lines.append(f"{name(e.i)}\t{name(e.j)}\t{e.lag}\t{e.kind}\t"
                     f"{e.value:.10g}\t{e.statistic:.10g}\t{e.p_value:.10g}")
    return "\n".join(lines) + "\n"


def fit_report(fit: VarFit) -> str:
    """Delimited matrices of a fit for inspection."""
    lines = [f"loglik\t{fit.loglik:.10g}", f"aic\t{fit.aic:.10g}",
             f"nonzero\t{fit.nonzero}", f"iterations\t{fit.iterations}",
             f"floor_restores\t{fit.floor_restores}", f"converged\t{fit.converged}"]
    for l in range(fit.coeffs.shape[0]):
        lines.append(f"# lag {l + 1} coefficients (rows: target, cols: source)")
        for row in fit.coeffs[l]:
            lines.append("\t".join(f"{v:.10g}" for v in row))
    lines.append("# precision")
    for row in fit.omega:
        lines.append("\t".join(f"{v:.10g}" for v in row))
    lines.append("# covariance")
    for row in fit.xi:
        lines.append("\t".join(f"{v:.10g}" for v in row))
    return "\n".join(lines) + "\n"
