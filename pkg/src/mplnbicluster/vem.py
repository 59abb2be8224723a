"""Variational EM for the mixture model with block-structured covariances.

The driver alternates three blocks of work until the observed-data bound
stabilises:

1. responsibilities from the current per-component evidence bounds,
2. coordinate sweeps on the per-observation Gaussian approximations,
3. closed-form mixture weights and means, then a covariance refresh in
   which each component's scatter is grouped into variable blocks and
   projected onto the implied block-diagonal pattern.

Every substep is guarded so the quantity traced in ``elbo_trace`` — the
log-sum-exp bound ``sum_i log sum_g pi_g exp(F_ig)`` — never decreases:
sweeps fall back to a halved step and then to the previous iterate per
observation, and a covariance/grouping candidate is only accepted when it
does not lower that component's weighted Gaussian objective.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import gammaln

from .colgroup import (
    agglomerate,
    block_project,
    cut,
    distance_matrix,
    select_k_silhouette,
)
from .data import CountMatrix, OffsetVector
from .errors import AllRestartsFailed, EmptyComponent, MplnError
from .linalg import cholesky_with_jitter
from .model import (
    EXP_CAP,
    MixtureModel,
    VariationalState,
    elbo_batch,
    lower_bound,
    model_from_dict,
    model_to_dict,
    observed_bound,
    responsibilities,
)
from .seeding import TAG_INIT, derive_rng

__all__ = [
    "FitConfig",
    "EqualK",
    "PerGroupK",
    "SilhouetteK",
    "FitResult",
    "initialize",
    "update_variational",
    "newton_m_step",
    "s_fixed_point_step",
    "m_step_pi",
    "m_step_mu",
    "compute_scatter",
    "fit",
    "fit_from_state",
    "result_to_dict",
    "result_from_dict",
    "save_result",
    "load_result",
    "save_labels",
]

_LINKAGES = ("single", "complete", "average")


@dataclass(frozen=True)
class FitConfig:
    """Knobs for a single fit.  Defaults are the package-wide defaults."""

    max_em_iter: int = 500
    elbo_rel_tol: float = 1e-6
    inner_iter: int = 10
    inner_tol: float = 1e-6
    n_starts: int = 5
    linkage: str = "average"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_em_iter < 1:
            raise ValueError("max_em_iter must be at least 1")
        if self.elbo_rel_tol <= 0 or self.inner_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.inner_iter < 1:
            raise ValueError("inner_iter must be at least 1")
        if self.n_starts < 1:
            raise ValueError("n_starts must be at least 1")
        if self.linkage not in _LINKAGES:
            raise ValueError(
                f"linkage must be one of {_LINKAGES}, got {self.linkage!r}"
            )


@dataclass(frozen=True)
class EqualK:
    """Group every component's variables into the same number of blocks."""

    k: int

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be at least 1")


@dataclass(frozen=True)
class PerGroupK:
    """One block count per component, in component order."""

    ks: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "ks", tuple(int(k) for k in self.ks))
        if any(k < 1 for k in self.ks):
            raise ValueError("all block counts must be at least 1")


@dataclass(frozen=True)
class SilhouetteK:
    """Pick each component's block count by silhouette, up to k_max."""

    k_max: int

    def __post_init__(self) -> None:
        if self.k_max < 1:
            raise ValueError("k_max must be at least 1")


KSpec = Union[EqualK, PerGroupK, SilhouetteK]


@dataclass
class FitResult:
    model: MixtureModel
    state: Optional[VariationalState]  # grid searches drop this to save memory
    labels: np.ndarray  # (n,) int, 1-based component assignments
    elbo_trace: np.ndarray  # observed-data bound per iteration
    lower_bound: float  # responsibility-weighted bound at the final state
    bic: float
    converged: bool
    iterations: int
    restart: int  # index of the winning start

    @property
    def n(self) -> int:
        return self.labels.shape[0]


def _normalize_k_spec(k_spec, G: int, d: int) -> KSpec:
    if isinstance(k_spec, int):
        k_spec = EqualK(k_spec)
    elif isinstance(k_spec, (tuple, list)):
        k_spec = PerGroupK(tuple(k_spec))
    if isinstance(k_spec, EqualK):
        if k_spec.k > d:
            raise ValueError(f"k={k_spec.k} exceeds the number of variables {d}")
    elif isinstance(k_spec, PerGroupK):
        if len(k_spec.ks) != G:
            raise ValueError(
                f"PerGroupK needs {G} block counts, got {len(k_spec.ks)}"
            )
        if any(k > d for k in k_spec.ks):
            raise ValueError("a per-component block count exceeds the dimension")
    elif not isinstance(k_spec, SilhouetteK):
        raise TypeError(f"unsupported block-count request: {k_spec!r}")
    return k_spec


# ---------------------------------------------------------------------------
# initialization


def _kmeans_labels(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100) -> np.ndarray:
    """Plain k-means++ / Lloyd labels, deterministic given the generator."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[int(rng.integers(n))]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centers[j] = x[idx]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    labels = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(axis=-1), axis=1)
    for _ in range(max_iter):
        for j in range(k):
            members = labels == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
            else:
                # resurrect an empty cluster at the worst-fit point
                worst = int(np.argmax(((x - centers[labels]) ** 2).sum(axis=1)))
                centers[j] = x[worst]
                labels[worst] = j
        new = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(axis=-1), axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
    return labels


def initialize(
    counts: CountMatrix,
    offsets: OffsetVector,
    G: int,
    seed: int,
    restart: int,
) -> VariationalState:
    """Starting point for one restart.

    Variational means start at the shifted log counts, covariances at
    0.1 * I.  Responsibilities are hard k-means labels on the log counts
    for restart 0 and Dirichlet(1) draws for later restarts, so the first
    start is a strong guess and the rest explore.
    """
    y = counts.counts
    n, d = y.shape
    if not 1 <= G <= n:
        raise ValueError(f"G must be between 1 and n={n}, got {G}")
    m0 = np.log((y + 0.5) / offsets.c[:, None])
    m = np.repeat(m0[:, None, :], G, axis=1)
    s = np.broadcast_to(0.1 * np.eye(d), (n, G, d, d)).copy()
    if G == 1:
        z = np.ones((n, 1))
    else:
        rng = derive_rng(seed, TAG_INIT, restart)
        if restart == 0:
            hard = _kmeans_labels(m0, G, rng)
            z = np.zeros((n, G))
            z[np.arange(n), hard] = 1.0
        else:
            z = rng.dirichlet(np.ones(G), size=n)
    return VariationalState(m=m, s=s, z=z)


# ---------------------------------------------------------------------------
# variational sweeps


def s_fixed_point_step(log_c, m, s, sigma_inv):
    """One fixed-point refresh of the approximation covariances.

    S' = (Sigma^-1 + diag(exp(log C + m + diag(S)/2)))^-1, batched over
    leading axes.  Returns (s_new, logdet_s_new).
    """
    m = np.asarray(m, dtype=float)
    d = m.shape[-1]
    diag_s = np.einsum("...jj->...j", np.asarray(s, dtype=float))
    lam = np.exp(np.minimum(log_c[..., None] + m + 0.5 * diag_s, EXP_CAP))
    a = np.broadcast_to(sigma_inv, m.shape + (d,)).copy()
    idx = np.arange(d)
    a[..., idx, idx] += lam
    lower = np.linalg.cholesky(a)
    s_new = np.linalg.inv(a)
    s_new = 0.5 * (s_new + np.swapaxes(s_new, -1, -2))
    logdet_a = 2.0 * np.log(np.einsum("...jj->...j", lower)).sum(axis=-1)
    return s_new, -logdet_a


def newton_m_step(y, log_c, m, s_new, mu, sigma_inv):
    """Full Newton update of the approximation means at fixed S'.

    m' = m - S' (exp(log C + m + diag(S')/2) + Sigma^-1 (m - mu) - y);
    the returned step can be damped by the caller.
    """
    m = np.asarray(m, dtype=float)
    diag_s = np.einsum("...jj->...j", np.asarray(s_new, dtype=float))
    lam = np.exp(np.minimum(log_c[..., None] + m + 0.5 * diag_s, EXP_CAP))
    resid = lam + (m - mu) @ sigma_inv - np.asarray(y, dtype=float)
    step = np.einsum("...ij,...j->...i", s_new, resid)
    return m - step, step


def _partial_elbo(y, log_c, m, s, mu, sigma_inv, logdet_s=None):
    """Per-observation bound without the terms constant in (m, S)."""
    dm = m - mu
    quad = np.einsum("ni,ij,nj->n", dm, sigma_inv, dm)
    tr = np.einsum("ij,nji->n", sigma_inv, s)
    if logdet_s is None:
        logdet_s = np.linalg.slogdet(s)[1]
    diag_s = np.einsum("njj->nj", s)
    rate = np.exp(np.minimum(log_c[:, None] + m + 0.5 * diag_s, EXP_CAP))
    return (
        -0.5 * (quad + tr)
        + 0.5 * logdet_s
        + np.einsum("nj,nj->n", m, y)
        - rate.sum(axis=1)
    )


def _sweep_batch(y, log_c, m, s, mu, sigma_inv, inner_iter, inner_tol):
    """Guarded coordinate sweeps for every observation of one component.

    Each sweep refreshes S by its fixed-point map and then takes a Newton
    step on m.  If an observation's bound would drop, the m-step is halved
    once; if it still drops, that observation keeps its pre-sweep pair and
    stops.  Observations whose update falls below ``inner_tol`` in the sup
    norm also stop.  Mutates and returns copies; inputs are untouched.
    """
    y = np.asarray(y, dtype=float)
    m = m.copy()
    s = s.copy()
    n = m.shape[0]
    active = np.arange(n)
    f_cur = _partial_elbo(y, log_c, m, s, mu, sigma_inv)
    for _ in range(inner_iter):
        if active.size == 0:
            break
        ya, la, ma, sa = y[active], log_c[active], m[active], s[active]
        s_new, logdet_s_new = s_fixed_point_step(la, ma, sa, sigma_inv)
        m_full, step = newton_m_step(ya, la, ma, s_new, mu, sigma_inv)
        f_new = _partial_elbo(ya, la, m_full, s_new, mu, sigma_inv, logdet_s_new)
        m_new = m_full
        rejected = np.zeros(active.size, dtype=bool)
        bad = np.flatnonzero(f_new < f_cur[active])
        if bad.size:
            m_half = ma[bad] - 0.5 * step[bad]
            f_half = _partial_elbo(
                ya[bad], la[bad], m_half, s_new[bad], mu, sigma_inv, logdet_s_new[bad]
            )
            ok = f_half >= f_cur[active[bad]]
            m_new[bad[ok]] = m_half[ok]
            f_new[bad[ok]] = f_half[ok]
            rejected[bad[~ok]] = True
        delta = np.maximum(
            np.abs(m_new - ma).max(axis=1),
            np.abs(s_new - sa).max(axis=(1, 2)),
        )
        accepted = ~rejected
        rows = active[accepted]
        m[rows] = m_new[accepted]
        s[rows] = s_new[accepted]
        f_cur[rows] = f_new[accepted]
        active = active[accepted & (delta >= inner_tol)]
    return m, s


def update_variational(y, log_c, m, s, mu, sigma, inner_iter=10, inner_tol=1e-6):
    """Refresh one observation's Gaussian approximation under one component.

    ``y``, ``m`` are length-d vectors, ``s`` is (d, d); returns the updated
    (m, s) pair after at most ``inner_iter`` guarded sweeps.
    """
    sigma = np.asarray(sigma, dtype=float)
    _, lower = cholesky_with_jitter(sigma)
    sigma_inv = cho_solve((lower, True), np.eye(sigma.shape[0]))
    sigma_inv = 0.5 * (sigma_inv + sigma_inv.T)
    log_c_arr = np.atleast_1d(np.asarray(log_c, dtype=float))
    m_out, s_out = _sweep_batch(
        np.asarray(y, dtype=float)[None, :],
        log_c_arr,
        np.asarray(m, dtype=float)[None, :],
        np.asarray(s, dtype=float)[None, :, :],
        np.asarray(mu, dtype=float),
        sigma_inv,
        inner_iter,
        inner_tol,
    )
    return m_out[0], s_out[0]


# ---------------------------------------------------------------------------
# M-step pieces


def m_step_pi(z: np.ndarray) -> np.ndarray:
    pi = z.sum(axis=0)
    return pi / pi.sum()


def m_step_mu(z: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Responsibility-weighted means of the variational means.

    Raises EmptyComponent when a component's responsibility mass has
    collapsed (below 1e-10), which would make its mean undefined.
    """
    mass = z.sum(axis=0)
    for g, value in enumerate(mass):
        if value < 1e-10:
            raise EmptyComponent(
                f"component {g + 1} has responsibility mass {value:.3e}"
            )
    return np.einsum("ng,ngd->gd", z, m) / mass[:, None]


def compute_scatter(z_g, m_g, s_g, mu_g):
    """Weighted second-moment matrix W_g around the component mean."""
    mass = z_g.sum()
    dm = m_g - mu_g
    w = np.einsum("n,ni,nj->ij", z_g, dm, dm) + np.einsum("n,nij->ij", z_g, s_g)
    w = w / mass
    return 0.5 * (w + w.T)


def _gaussian_fit_objective(w, mass, lower):
    """-mass/2 * (tr(Sigma^-1 W) + log det Sigma) given chol(Sigma)."""
    solved = cho_solve((lower, True), w)
    logdet = 2.0 * np.log(np.diag(lower)).sum()
    return -0.5 * mass * (np.trace(solved) + logdet)


def _covariance_candidate(w, k_spec, g, linkage):
    """Group variables from W, project, and factor the candidate covariance.

    Returns (sigma_used, lower, partition); the partition comes from
    cutting the agglomeration of the 1 - corr^2 distances at the requested
    (or silhouette-selected) number of blocks.
    """
    d = w.shape[0]
    dist = distance_matrix(w)
    dendro = agglomerate(dist, linkage=linkage)
    if isinstance(k_spec, EqualK):
        k = k_spec.k
    elif isinstance(k_spec, PerGroupK):
        k = k_spec.ks[g]
    else:
        k, _ = select_k_silhouette(dendro, dist, min(k_spec.k_max, d))
    partition = cut(dendro, k)
    projected = block_project(w, partition)
    sigma_used, lower = cholesky_with_jitter(projected)
    return sigma_used, lower, partition


# ---------------------------------------------------------------------------
# the driver


def fit_from_state(
    counts: CountMatrix,
    offsets: OffsetVector,
    state: VariationalState,
    k_spec,
    config: FitConfig,
    restart: int = 0,
) -> FitResult:
    """Run the EM loop from an explicit starting state.

    The trace records the observed-data bound once per iteration; the loop
    stops when its change falls below ``elbo_rel_tol`` relative to
    max(1, |bound|), or after ``max_em_iter`` iterations.
    """
    y = counts.counts.astype(float)
    log_c = offsets.log
    n, G, d = state.m.shape
    if counts.n != n or counts.d != d:
        raise ValueError("state does not match the count matrix")
    k_spec = _normalize_k_spec(k_spec, G, d)

    m = state.m.copy()
    s = state.s.copy()
    z = state.z.copy()
    log_fact = gammaln(y + 1.0).sum(axis=1)

    # bootstrap the mixture parameters from the initial responsibilities
    pi = m_step_pi(z)
    mu = m_step_mu(z, m)
    sigma = np.empty((G, d, d))
    lowers = []
    partitions = []
    for g in range(G):
        w = compute_scatter(z[:, g], m[:, g], s[:, g], mu[g])
        sig_g, low_g, part_g = _covariance_candidate(w, k_spec, g, config.linkage)
        sigma[g] = sig_g
        lowers.append(low_g)
        partitions.append(part_g)

    eye = np.eye(d)
    trace = []
    prev_bound = -np.inf
    converged = False

    def component_bounds():
        f = np.empty((n, G))
        invs = []
        for g in range(G):
            inv = cho_solve((lowers[g], True), eye)
            inv = 0.5 * (inv + inv.T)
            invs.append(inv)
            logdet = 2.0 * np.log(np.diag(lowers[g])).sum()
            f[:, g] = elbo_batch(
                y, log_c, m[:, g], s[:, g], mu[g], inv, logdet, log_fact=log_fact
            )
        return f, invs

    for _ in range(config.max_em_iter):
        f, sigma_invs = component_bounds()
        bound = observed_bound(f, pi)
        trace.append(bound)
        z = responsibilities(f, pi)
        if abs(bound - prev_bound) <= config.elbo_rel_tol * max(1.0, abs(bound)):
            converged = True
            break
        prev_bound = bound

        for g in range(G):
            m[:, g], s[:, g] = _sweep_batch(
                y, log_c, m[:, g], s[:, g], mu[g], sigma_invs[g],
                config.inner_iter, config.inner_tol,
            )
        pi = m_step_pi(z)
        mu = m_step_mu(z, m)
        for g in range(G):
            w = compute_scatter(z[:, g], m[:, g], s[:, g], mu[g])
            mass = z[:, g].sum()
            cand_sigma, cand_lower, cand_part = _covariance_candidate(
                w, k_spec, g, config.linkage
            )
            current = _gaussian_fit_objective(w, mass, lowers[g])
            candidate = _gaussian_fit_objective(w, mass, cand_lower)
            # ascent guard: only adopt a refresh that does not lower the
            # component's weighted Gaussian objective against the new scatter
            if candidate >= current - 1e-10 * (1.0 + abs(current)):
                sigma[g] = cand_sigma
                lowers[g] = cand_lower
                partitions[g] = cand_part

    if not converged:
        f, _ = component_bounds()
        trace.append(observed_bound(f, pi))
        z = responsibilities(f, pi)

    final_state = VariationalState(m=m, s=s, z=z)
    model = MixtureModel(
        pi=pi, mu=mu, sigma=sigma, groupings=tuple(partitions)
    )
    labels = np.argmax(z, axis=1) + 1
    lb = lower_bound(f, z, pi)
    p = model.n_free_parameters
    bic = 2.0 * lb - p * np.log(n)
    return FitResult(
        model=model,
        state=final_state,
        labels=labels,
        elbo_trace=np.asarray(trace),
        lower_bound=float(lb),
        bic=float(bic),
        converged=converged,
        iterations=len(trace) - 1,
        restart=restart,
    )


def fit(
    counts: CountMatrix,
    offsets: OffsetVector,
    G: int,
    k_spec,
    config: Optional[FitConfig] = None,
) -> FitResult:
    """Fit the mixture with ``G`` components from multiple starts.

    Each start initializes independently and runs the full EM loop; the
    result with the highest final lower bound wins.  A start that fails
    (e.g. a component empties out) is recorded and skipped; if every start
    fails, AllRestartsFailed carries the per-start reasons.
    """
    if config is None:
        config = FitConfig()
    k_spec = _normalize_k_spec(k_spec, G, counts.d)
    best = None
    failures = []
    for restart in range(config.n_starts):
        try:
            state = initialize(counts, offsets, G, config.seed, restart)
            result = fit_from_state(
                counts, offsets, state, k_spec, config, restart=restart
            )
        except MplnError as exc:
            failures.append((restart, f"{type(exc).__name__}: {exc}"))
            continue
        except np.linalg.LinAlgError as exc:
            failures.append((restart, f"LinAlgError: {exc}"))
            continue
        if best is None or result.lower_bound > best.lower_bound:
            best = result
    if best is None:
        raise AllRestartsFailed(failures)
    return best


# ---------------------------------------------------------------------------
# serialization

def result_to_dict(result: FitResult) -> dict:
    """JSON-ready view of a fit: model plus trace, labels and diagnostics.

    The variational state is deliberately left out — it is O(n d^2) and can
    be recomputed from the model if needed.
    """
    return {
        "model": model_to_dict(result.model),
        "labels": [int(v) for v in result.labels],
        "elbo_trace": [float(v) for v in result.elbo_trace],
        "lower_bound": float(result.lower_bound),
        "bic": float(result.bic),
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
        "restart": int(result.restart),
    }


def result_from_dict(payload: dict) -> FitResult:
    return FitResult(
        model=model_from_dict(payload["model"]),
        state=None,
        labels=np.asarray(payload["labels"], dtype=np.int64),
        elbo_trace=np.asarray(payload["elbo_trace"], dtype=float),
        lower_bound=float(payload["lower_bound"]),
        bic=float(payload["bic"]),
        converged=bool(payload["converged"]),
        iterations=int(payload["iterations"]),
        restart=int(payload["restart"]),
    )


def save_result(result: FitResult, path) -> None:
    with open(path, "w") as fh:
        json.dump(result_to_dict(result), fh, indent=2)
        fh.write("\n")


def load_result(path) -> FitResult:
    with open(path) as fh:
        return result_from_dict(json.load(fh))


def save_labels(sample_ids, labels, path) -> None:
    """Row assignments as two-column CSV: sample_id, cluster (1-based)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "cluster"])
        for sid, lab in zip(sample_ids, labels):
            writer.writerow([sid, int(lab)])
