"""Risk recognition: FC + BatchNorm responsibility network, Gaussian-mixture
statistics, the semi-supervised loss, risk scores, and AUC.

Responsibilities come from a stack of BatchNorm(ReLU(W h + b)) layers ending
in a K-way softmax. Mixture weights/means/covariances are responsibility-
weighted moments of the embeddings and stay on the tape, so the loss is
differentiated jointly through them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .graphs import GraphError
from .tape import (Param, Tensor, add, clamp_min, col_sum, concat_cols, constant, div,
                   frobenius_sq, gather_rows, log, logsumexp_rows, matmul, mul,
                   mvn_logpdf, relu, rowwise_softmax, scale, shift, slice_cols, sqrt,
                   sub, total_sum, transpose)

COV_JITTER_REL = 1e-4
GAMMA_FLOOR = 1e-12
DEGENERATE_RESP = 1e-12


@dataclass
class RiskHeadConfig:
    in_dim: int
    components: int = 2
    hidden: tuple[int, ...] = (32, 16)   # widths of the first layers; final is K
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        widths = [self.in_dim, *self.hidden, self.components]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1


@dataclass
class BatchNormState:
    scale: Param
    shiftp: Param
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float
    momentum: float


@dataclass
class RiskHeadParams:
    weights: list[Param]
    biases: list[Param]
    norms: list[BatchNormState]

    def all_params(self) -> list[Param]:
        out: list[Param] = []
        for w, b, nm in zip(self.weights, self.biases, self.norms):
            out.extend([w, b, nm.scale, nm.shiftp])
        return out


def init_risk_head(cfg: RiskHeadConfig, rng: np.random.Generator) -> RiskHeadParams:
    weights, biases, norms = [], [], []
    for li, (fan_in, fan_out) in enumerate(cfg.layer_dims):
        weights.append(Param(rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in),
                             f"head.w{li}"))
        biases.append(Param(np.zeros((1, fan_out)), f"head.b{li}"))
        norms.append(BatchNormState(
            scale=Param(np.ones((1, fan_out)), f"head.bn{li}.scale"),
            shiftp=Param(np.zeros((1, fan_out)), f"head.bn{li}.shift"),
            running_mean=np.zeros(fan_out),
            running_var=np.ones(fan_out),
            eps=cfg.bn_eps,
            momentum=cfg.bn_momentum,
        ))
    return RiskHeadParams(weights=weights, biases=biases, norms=norms)


def batch_norm(x: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Column-wise batch normalization.

    Train mode normalizes by batch statistics (biased variance) and updates
    the running estimates as a side effect (unbiased variance, like the usual
    deep-learning convention); eval mode applies the running statistics.
    """
    n = x.rows
    if train:
        if n < 2:
            raise GraphError("batch_norm: need at least 2 rows in train mode")
        mean = scale(col_sum(x), 1.0 / n)
        centered = sub(x, mean)
        var = scale(col_sum(mul(centered, centered)), 1.0 / n)
        normed = div(centered, sqrt(shift(var, state.eps)))
        mom = state.momentum
        batch_mean = mean.value[0]
        batch_var_unbiased = var.value[0] * (n / max(n - 1, 1))
        state.running_mean = (1 - mom) * state.running_mean + mom * batch_mean
        state.running_var = (1 - mom) * state.running_var + mom * batch_var_unbiased
    else:
        mean = constant(state.running_mean.reshape(1, -1))
        std = constant(np.sqrt(state.running_var + state.eps).reshape(1, -1))
        normed = div(sub(x, mean), std)
    return add(mul(normed, state.scale), state.shiftp)


def responsibilities(z: Tensor, params: RiskHeadParams, train: bool) -> Tensor:
    """Posterior component memberships: softmax over the final layer.

    Every layer is BatchNorm(ReLU(W h + b)); rows of the result are
    nonnegative and sum to one.
    """
    h = z
    for w, b, nm in zip(params.weights, params.biases, params.norms):
        h = batch_norm(relu(add(matmul(h, w), b)), nm, train)
    return rowwise_softmax(h)


# ---------------------------------------------------------------------------
# mixture statistics and densities
# ---------------------------------------------------------------------------

@dataclass
class GmmStats:
    pi: Tensor                 # (1, K)
    mu: list[Tensor]           # each (1, d)
    sigma: list[Tensor]        # each (d, d), jittered

    @property
    def n_components(self) -> int:
        return len(self.mu)


def gmm_moments(z: Tensor, gamma: Tensor, jitter_rel: float = COV_JITTER_REL) -> GmmStats:
    """Responsibility-weighted mixture moments.

    mu_k = sum_i gamma_ik z_i / sum_i gamma_ik; pi_k = mean_i gamma_ik;
    Sigma_k = weighted outer-product covariance plus (jitter_rel * tr / d) I.
    A component whose total responsibility falls below 1e-12 is degenerate.
    """
    n, d = z.shape
    k_count = gamma.cols
    eye = constant(np.eye(d))
    pis, mus, sigmas = [], [], []
    for k in range(k_count):
        gk = slice_cols(gamma, k, k + 1)
        nk = total_sum(gk)
        if nk.value[0, 0] < DEGENERATE_RESP:
            raise GraphError(f"gmm_moments: component {k + 1} has vanishing responsibility")
        mu_k = div(matmul(transpose(gk), z), nk)
        centered = sub(z, mu_k)
        sig_k = div(matmul(transpose(centered), mul(centered, gk)), nk)
        trace = total_sum(mul(sig_k, eye))
        sig_k = add(sig_k, mul(scale(trace, jitter_rel / d), eye))
        pis.append(scale(nk, 1.0 / n))
        mus.append(mu_k)
        sigmas.append(sig_k)
    return GmmStats(pi=concat_cols(pis), mu=mus, sigma=sigmas)


def gaussian_logpdf(z, mu, sigma) -> np.ndarray:
    """log N(z | mu, sigma) per row, via triangular factorization."""
    zt = z if isinstance(z, Tensor) else constant(np.atleast_2d(z))
    mt = mu if isinstance(mu, Tensor) else constant(np.asarray(mu).reshape(1, -1))
    st = sigma if isinstance(sigma, Tensor) else constant(sigma)
    return mvn_logpdf(zt, mt, st).value[:, 0]


def mixture_log_density(z: Tensor, stats: GmmStats) -> Tensor:
    """Rowwise log sum_k pi_k N(z | mu_k, Sigma_k), log-sum-exp stabilized."""
    cols = []
    for k in range(stats.n_components):
        lp = mvn_logpdf(z, stats.mu[k], stats.sigma[k])
        log_pi = log(clamp_min(slice_cols(stats.pi, k, k + 1), 1e-300))
        cols.append(add(lp, log_pi))
    return logsumexp_rows(concat_cols(cols))


def unlabeled_term(z: Tensor, stats: GmmStats) -> Tensor:
    """Negative mean log mixture density over all rows."""
    n = z.rows
    return scale(total_sum(mixture_log_density(z, stats)), -1.0 / n)


def label_term(gamma: Tensor, label_mask: np.ndarray, normalize: bool = True) -> Tensor:
    """Cross-entropy of labeled rows against their designated components.

    ``label_mask`` is (N, K) with ones at (row, component) for labeled rows.
    ``normalize`` divides by the labeled count; the raw sum otherwise.
    """
    n_labeled = int(label_mask.sum())
    if n_labeled == 0:
        raise GraphError("label_term: empty labeled set")
    picked = mul(log(clamp_min(gamma, GAMMA_FLOOR)), constant(label_mask))
    out = scale(total_sum(picked), -1.0)
    return scale(out, 1.0 / n_labeled) if normalize else out


def semi_supervised_loss(z: Tensor, gamma: Tensor, stats: GmmStats,
                         label_mask: np.ndarray, tau3: float, c_rec: Tensor,
                         drop_unlabeled: bool = False,
                         normalize_label: bool = True) -> Tensor:
    """(1 - tau3) * unlabeled mixture NLL + tau3 * labeled CE + reconstruction.

    ``drop_unlabeled`` removes the mixture term entirely (the supervised
    ablation); the labeled term keeps its tau3 weight.
    """
    if not (0.0 <= tau3 <= 1.0):
        raise GraphError(f"tau3 must be in [0, 1], got {tau3}")
    terms = []
    if not drop_unlabeled and tau3 < 1.0:
        terms.append(scale(unlabeled_term(z, stats), 1.0 - tau3))
    if tau3 > 0.0:
        terms.append(scale(label_term(gamma, label_mask, normalize=normalize_label), tau3))
    loss = c_rec
    for t in terms:
        loss = add(loss, t)
    return loss


# ---------------------------------------------------------------------------
# scores and evaluation
# ---------------------------------------------------------------------------

def designate_risk_components(gamma: np.ndarray, labeled_rows: np.ndarray,
                              labeled_risky: np.ndarray, k_count: int) -> set[int]:
    """Map mixture components (1-based) to the risk class.

    K = 2 fixes component 2 as risky. For K > 2 a component is risky when the
    majority of its labeled members (by argmax responsibility) are risky;
    ties count as risky. Falls back to {K} if nothing qualifies.
    """
    if k_count == 2:
        return {2}
    assign = gamma[labeled_rows].argmax(axis=1)
    risky: set[int] = set()
    for k in range(k_count):
        members = assign == k
        if members.sum() == 0:
            continue
        n_risky = int(labeled_risky[members].sum())
        if 2 * n_risky >= int(members.sum()):
            risky.add(k + 1)
    return risky or {k_count}


def risk_score(gamma: np.ndarray, risk_components: set[int]) -> np.ndarray:
    """Per-row risk probability: responsibility mass on the risk components
    (1-based ids)."""
    if not risk_components:
        raise GraphError("risk_score: empty risk component set")
    k_count = gamma.shape[1]
    for k in risk_components:
        if not (1 <= k <= k_count):
            raise GraphError(f"risk_score: component {k} outside 1..{k_count}")
    cols = [k - 1 for k in sorted(risk_components)]
    return gamma[:, cols].sum(axis=1)


def auc(scores: Sequence[float], truth: Sequence[bool]) -> float:
    """Mann-Whitney AUC with ties counted half.

    The probability that a uniformly chosen risky node outscores a uniformly
    chosen safe one; requires both classes present.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(truth, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise GraphError("auc: scores and truth must be equal-length 1-D")
    n_pos = int(y.sum())
    n_neg = int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise GraphError("auc: both classes must be present")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
