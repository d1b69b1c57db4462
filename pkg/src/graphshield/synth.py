"""Synthetic fixtures: VAR simulators and a desk-scale trust-network generator.

The trust generator mimics the public who-trusts-whom rating lists: a fixed
population with per-node latent trustworthiness, community-clustered rating
activity, and weekly rating events written as (src, dst, rating, timestamp)
edge records. Risky nodes accumulate negative incoming ratings, so the
cumulative-rating ground-truth rule recovers them.
"""

from __future__ import annotations

import numpy as np

from .graphs import EdgeRecord

SECONDS_PER_DAY = 86400.0


# ---------------------------------------------------------------------------
# VAR simulation
# ---------------------------------------------------------------------------

def simulate_var(coeffs: np.ndarray, xi: np.ndarray, t_steps: int,
                 rng: np.random.Generator, burn: int = 200) -> np.ndarray:
    """Draw (t_steps, n) from y_t = sum_l O^(l) y_{t-l} + N(0, Xi)."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim == 2:
        coeffs = coeffs[None]
    lag, n, _ = coeffs.shape
    chol = np.linalg.cholesky(xi)
    total = t_steps + burn
    out = np.zeros((total + lag, n))
    noise = rng.standard_normal((total + lag, n)) @ chol.T
    for t in range(lag, total + lag):
        acc = noise[t].copy()
        for l in range(lag):
            acc += coeffs[l] @ out[t - 1 - l]
        out[t] = acc
    return out[lag + burn:]


def stable_var_coeffs(n: int, lag: int, rng: np.random.Generator,
                      density: float = 0.4, scale: float = 0.4) -> np.ndarray:
    """Random sparse coefficients, rescaled until the companion matrix is stable."""
    coeffs = np.zeros((lag, n, n))
    for l in range(lag):
        mask = rng.random((n, n)) < density
        np.fill_diagonal(mask, True)
        coeffs[l] = mask * rng.uniform(-scale, scale, size=(n, n))
    for _ in range(64):
        comp = np.zeros((n * lag, n * lag))
        comp[:n, :] = np.concatenate(list(coeffs), axis=1)
        if lag > 1:
            comp[n:, :-n] = np.eye(n * (lag - 1))
        radius = np.abs(np.linalg.eigvals(comp)).max()
        if radius < 0.95:
            return coeffs
        coeffs *= 0.9
    return coeffs


def precision_from_pairs(n: int, pairs: list[tuple[int, int, float]]) -> np.ndarray:
    """Sparse PD precision: identity plus symmetric off-diagonal entries,
    ridge-shifted if needed."""
    omega = np.eye(n)
    for i, j, v in pairs:
        omega[i, j] = omega[j, i] = v
    eigmin = np.linalg.eigvalsh(omega).min()
    if eigmin < 0.05:
        omega += (0.05 - eigmin) * np.eye(n)
    return omega


# ---------------------------------------------------------------------------
# trust-network generator
# ---------------------------------------------------------------------------

def synth_trust_edges(n_nodes: int = 500, weeks: int = 40,
                      edges_per_week: int = 180, risk_fraction: float = 0.1,
                      n_communities: int = 8, seed: int = 0,
                      start_ts: float = 1_289_241_911.0) -> list[EdgeRecord]:
    """Weekly rating events over a fixed population.

    Nodes carry a latent trust level; a ``risk_fraction`` of them (clustered
    in a few communities) are untrustworthy and draw mostly negative ratings.
    Raters pick targets inside their community most of the time, so both the
    rating signal and the graph structure carry the risk.
    """
    rng = np.random.default_rng(seed)
    community = rng.integers(0, n_communities, size=n_nodes)
    # concentrate risky nodes in a minority of communities
    risky_comms = rng.choice(n_communities, size=max(1, n_communities // 3), replace=False)
    risk_score = rng.random(n_nodes) * 0.2
    for c in risky_comms:
        members = np.where(community == c)[0]
        risk_score[members] += rng.random(len(members)) * 0.8
    n_risky = max(1, int(round(risk_fraction * n_nodes)))
    risky = np.zeros(n_nodes, dtype=bool)
    risky[np.argsort(-risk_score)[:n_risky]] = True

    # activity concentrated on a heavy-tailed subset of raters
    activity = rng.pareto(1.5, size=n_nodes) + 0.2
    activity /= activity.sum()

    records: list[EdgeRecord] = []
    for week in range(weeks):
        raters = rng.choice(n_nodes, size=edges_per_week, p=activity)
        for s in raters:
            same = rng.random() < 0.7
            pool = np.where(community == community[s])[0] if same else None
            if pool is not None and len(pool) > 1:
                d = int(rng.choice(pool))
            else:
                d = int(rng.integers(0, n_nodes))
            if d == s:
                d = (d + 1) % n_nodes
            if risky[d]:
                rating = float(rng.choice([-10, -8, -5, -3, -1, 1], p=[.25, .2, .2, .15, .1, .1]))
            else:
                rating = float(rng.choice([-1, 1, 2, 3, 5, 8, 10], p=[.05, .2, .2, .2, .15, .1, .1]))
            ts = start_ts + week * 7 * SECONDS_PER_DAY + float(rng.uniform(0, 6.9 * SECONDS_PER_DAY))
            records.append(EdgeRecord(int(s), d, rating, ts))
    records.sort(key=lambda e: e.timestamp)
    return records


def write_edge_csv(path, records: list[EdgeRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in records:
            fh.write(f"{e.src},{e.dst},{e.weight:g},{e.timestamp:.5f}\n")
