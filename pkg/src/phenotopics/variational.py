"""Per-record posterior inference for the correlated phenotype model.

Each record carries M bags of token counts. The latent log phenotype
proportions ``nu`` get a Gaussian prior N(mu0, sigma0); every token carries a
latent phenotype assignment drawn from softmax(nu). Inference alternates two
coordinate updates until the mode stops moving:

* token responsibilities q(z): a closed-form softmax over phenotypes per
  distinct token, and
* the Gaussian q(nu): a Newton ascent to the mode of the unnormalized
  log-posterior, with covariance from the negated inverse Hessian there.

The expectation of ``eta(nu) = nu - logsumexp(nu)`` under q(nu) has no closed
form. The responsibility update evaluates it at the mode (zeroth order; the
normalizer part cancels there anyway), while the reported variational
objective adds the second-order Gaussian correction of the logsumexp term,
without which the objective can exceed the true log evidence and stop being a
bound.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .corpus import RecordBags
from .numerics import NewtonConfig, log_sum_exp, maximize_concave, softmax


@dataclass
class ModelParams:
    """Global parameters: Gaussian prior over log proportions + topic matrices.

    ``log_beta[m]`` has shape (K, V_m); each row of ``exp(log_beta[m])`` is a
    distribution over type m's vocabulary. ``sigma0_inv`` is cached because the
    per-record objective evaluates the prior quadratic form many times.
    """

    mu0: np.ndarray
    sigma0: np.ndarray
    sigma0_inv: np.ndarray
    log_beta: list

    @property
    def num_phenotypes(self) -> int:
        return self.mu0.shape[0]

    @property
    def num_types(self) -> int:
        return len(self.log_beta)

    @classmethod
    def create(cls, mu0, sigma0, log_beta) -> "ModelParams":
        """Build params from mu0, sigma0 and per-type log topic matrices.

        Computes the cached inverse via Cholesky, which doubles as the
        positive-definiteness check on sigma0.
        """
        mu0 = np.asarray(mu0, dtype=float)
        sigma0 = np.asarray(sigma0, dtype=float)
        sigma0 = 0.5 * (sigma0 + sigma0.T)
        try:
            chol = scipy.linalg.cho_factor(sigma0, lower=True)
        except scipy.linalg.LinAlgError as exc:
            raise ValueError("sigma0 must be symmetric positive definite") from exc
        sigma0_inv = scipy.linalg.cho_solve(chol, np.eye(mu0.shape[0]))
        sigma0_inv = 0.5 * (sigma0_inv + sigma0_inv.T)
        log_beta = [np.asarray(lb, dtype=float) for lb in log_beta]
        params = cls(mu0=mu0, sigma0=sigma0, sigma0_inv=sigma0_inv, log_beta=log_beta)
        params.validate()
        return params

    def validate(self, row_tol: float = 1e-9) -> None:
        k = self.num_phenotypes
        if self.sigma0.shape != (k, k) or self.sigma0_inv.shape != (k, k):
            raise ValueError("sigma0 / sigma0_inv shape does not match mu0")
        if not np.all(np.isfinite(self.mu0)) or not np.all(np.isfinite(self.sigma0)):
            raise ValueError("mu0 / sigma0 must be finite")
        for m, lb in enumerate(self.log_beta):
            if lb.ndim != 2 or lb.shape[0] != k:
                raise ValueError(f"log_beta[{m}] must have K={k} rows, got shape {lb.shape}")
            if not np.all(np.isfinite(lb)):
                raise ValueError(f"log_beta[{m}] contains non-finite entries")
            row_sums = np.exp(lb).sum(axis=1)
            if np.abs(row_sums - 1.0).max() > row_tol:
                raise ValueError(f"rows of exp(log_beta[{m}]) must sum to 1 within {row_tol}")


@dataclass
class DocPosterior:
    """Laplace-approximate posterior for one record.

    ``responsibilities[m]`` maps each distinct token index of type m to its
    K-simplex assignment distribution; occurrences of the same token share one
    entry because the update depends only on token identity. ``expected_counts``
    is the (M, K) matrix of per-type expected token mass per phenotype.

    Internally the per-token data lives in aligned arrays (``token_indices``,
    ``token_counts``, ``resp``) so the training hot paths never touch dicts;
    ``responsibilities`` is a view built on demand.
    """

    nu_hat: np.ndarray
    nu_cov: np.ndarray
    token_indices: list  # per type, (n_m,) distinct token indices
    token_counts: list  # per type, (n_m,) counts aligned with token_indices
    resp: list  # per type, (K, n_m) responsibility columns
    expected_counts: np.ndarray
    proportions: np.ndarray
    converged: bool
    iterations: int

    @property
    def responsibilities(self) -> list:
        return [
            {int(v): self.resp[m][:, j] for j, v in enumerate(idx)}
            for m, idx in enumerate(self.token_indices)
        ]


def _total_counts(expected_counts) -> np.ndarray:
    """Sum the per-type expected count vectors into one K-vector."""
    s = np.asarray(expected_counts, dtype=float)
    return s.sum(axis=0) if s.ndim == 2 else s


def f_nu(nu, expected_counts, params: ModelParams) -> float:
    """Mode objective: eta(nu)' s - (nu - mu0)' sigma0_inv (nu - mu0) / 2.

    ``s`` sums the per-type expected counts and eta(nu) = nu - logsumexp(nu).
    Concave in nu; its maximizer is the Gaussian posterior mode.
    """
    nu = np.asarray(nu, dtype=float)
    s = _total_counts(expected_counts)
    eta = nu - log_sum_exp(nu)
    centered = nu - params.mu0
    return float(eta @ s - 0.5 * centered @ params.sigma0_inv @ centered)


def grad_f(nu, expected_counts, params: ModelParams) -> np.ndarray:
    """Gradient of :func:`f_nu`: s - sum(s) * softmax(nu) - sigma0_inv (nu - mu0)."""
    nu = np.asarray(nu, dtype=float)
    s = _total_counts(expected_counts)
    return s - s.sum() * softmax(nu) - params.sigma0_inv @ (nu - params.mu0)


def hess_f(nu, expected_counts, params: ModelParams) -> np.ndarray:
    """Hessian of :func:`f_nu`: sum(s) * (pi pi' - diag(pi)) - sigma0_inv.

    Exactly symmetric term by term; negative definite whenever sigma0 is PD,
    since diag(pi) - pi pi' is PSD.
    """
    nu = np.asarray(nu, dtype=float)
    s = _total_counts(expected_counts)
    pi = softmax(nu)
    return s.sum() * (np.outer(pi, pi) - np.diag(pi)) - params.sigma0_inv


def _make_objective(s, params: ModelParams):
    """f/grad/hess closures for f_nu with one shared softmax per iterate.

    The Newton loop evaluates all three at the same point; a one-slot cache
    keyed on the iterate's bytes avoids recomputing the simplex projection.
    Mathematically identical to f_nu/grad_f/hess_f.
    """
    n_total = float(s.sum())
    mu0, sigma0_inv = params.mu0, params.sigma0_inv
    state = {"key": None, "pi": None, "lse": None}

    def stats(nu):
        key = nu.tobytes()
        if state["key"] != key:
            m = nu.max()
            e = np.exp(nu - m)
            tot = e.sum()
            state["key"] = key
            state["pi"] = e / tot
            state["lse"] = float(m) + float(np.log(tot))
        return state["pi"], state["lse"]

    def f(nu):
        _, lse = stats(nu)
        centered = nu - mu0
        return float(nu @ s) - n_total * lse - 0.5 * float(centered @ sigma0_inv @ centered)

    def grad(nu):
        pi, _ = stats(nu)
        return s - n_total * pi - sigma0_inv @ (nu - mu0)

    def hess(nu):
        pi, _ = stats(nu)
        return n_total * (np.outer(pi, pi) - np.diag(pi)) - sigma0_inv

    return f, grad, hess


def update_q_nu(
    expected_counts,
    params: ModelParams,
    nu_init,
    newton_config: NewtonConfig | None = None,
):
    """Newton-maximize f_nu and return (nu_hat, nu_cov, converged).

    ``nu_cov`` is the inverse of the negated Hessian at the mode. If that
    inverse is numerically singular it is repaired with an escalating ridge
    and a RuntimeWarning is emitted.
    """
    s = _total_counts(expected_counts)
    if not np.all(np.isfinite(s)) or np.any(s < 0):
        raise ValueError("expected counts must be finite and non-negative")
    f, grad, hess = _make_objective(s, params)
    result = maximize_concave(f, grad, hess, nu_init, newton_config)
    nu_cov = _invert_neg_hessian(result.hessian)
    return result.x, nu_cov, result.converged


def _invert_neg_hessian(hessian: np.ndarray) -> np.ndarray:
    k = hessian.shape[0]
    ridge = 0.0
    scale = max(1.0, float(np.abs(hessian).max()))
    while True:
        try:
            chol = scipy.linalg.cho_factor(-hessian + ridge * np.eye(k), lower=True)
            cov = scipy.linalg.cho_solve(chol, np.eye(k))
            return 0.5 * (cov + cov.T)
        except scipy.linalg.LinAlgError:
            ridge = 1e-10 * scale if ridge == 0.0 else ridge * 10.0
            warnings.warn(
                f"negated Hessian not positive definite; repairing with ridge {ridge:g}",
                RuntimeWarning,
                stacklevel=2,
            )
            if ridge > 1e6 * scale:
                raise


def _bag_arrays(record: RecordBags):
    """Split each sparse bag into aligned (token_index, count) arrays."""
    indices, counts = [], []
    for bag in record.bags:
        idx = np.fromiter(bag.keys(), dtype=np.intp, count=len(bag))
        cnt = np.fromiter(bag.values(), dtype=float, count=len(bag))
        indices.append(idx)
        counts.append(cnt)
    return indices, counts


def _responsibilities(indices, counts, nu_hat, params: ModelParams):
    """Closed-form q(z) per distinct token plus per-type expected counts.

    q(z=k | token v of type m) is the k-softmax of eta(nu_hat) + log_beta; the
    logsumexp part of eta is constant across k and cancels, so nu_hat is used
    directly. Returns per-type (K, n_m) matrices and the (M, K) expected
    counts.
    """
    k = params.num_phenotypes
    resp = []
    expected = np.zeros((params.num_types, k))
    nu_col = nu_hat[:, None]
    for m, (idx, cnt) in enumerate(zip(indices, counts)):
        if idx.size == 0:
            resp.append(np.zeros((k, 0)))
            continue
        if idx.min() < 0 or idx.max() >= params.log_beta[m].shape[1]:
            raise ValueError(f"token index out of range for type {m}")
        logits = params.log_beta[m][:, idx] + nu_col
        logits -= logits.max(axis=0, keepdims=True)
        q = np.exp(logits)
        q /= q.sum(axis=0, keepdims=True)
        resp.append(q)
        expected[m] = q @ cnt
    return resp, expected


def update_q_z(record: RecordBags, nu_hat, params: ModelParams):
    """Responsibility update for every distinct token of every type.

    Returns (responsibilities, expected_counts): per type a map from distinct
    token index to its K-vector q(z), and the (M, K) matrix of count-weighted
    responsibility sums, which conserves the record's per-type token totals.
    """
    nu_hat = np.asarray(nu_hat, dtype=float)
    if len(record.bags) != params.num_types:
        raise ValueError("record has a different number of types than the model")
    indices, counts = _bag_arrays(record)
    resp, expected = _responsibilities(indices, counts, nu_hat, params)
    dict_view = [
        {int(v): resp[m][:, j] for j, v in enumerate(idx)}
        for m, idx in enumerate(indices)
    ]
    return dict_view, expected


def infer_document(
    record: RecordBags,
    params: ModelParams,
    tol: float = 1e-4,
    max_outer: int = 100,
    nu_init=None,
    newton_config: NewtonConfig | None = None,
) -> DocPosterior:
    """Coordinate ascent between q(z) and q(nu) for one record.

    Starts the mode at ``nu_init`` (prior mean by default; training passes the
    previous EM iteration's mode as a warm start) and stops when the mode moves
    less than ``tol`` in sup-norm or ``max_outer`` rounds elapse. Deterministic:
    no randomness anywhere in the updates.
    """
    if len(record.bags) != params.num_types:
        raise ValueError("record has a different number of types than the model")
    indices, counts = _bag_arrays(record)
    nu_hat = np.array(params.mu0 if nu_init is None else nu_init, dtype=float)

    converged = False
    newton_ok = True
    iterations = 0
    resp, expected = _responsibilities(indices, counts, nu_hat, params)
    for iterations in range(1, max_outer + 1):
        nu_new, _, newton_ok = update_q_nu(expected, params, nu_hat, newton_config)
        delta = float(np.abs(nu_new - nu_hat).max())
        nu_hat = nu_new
        resp, expected = _responsibilities(indices, counts, nu_hat, params)
        if delta <= tol:
            converged = True
            break

    # Covariance from the Hessian at the final mode with the final expected
    # counts, so the returned fields are mutually consistent.
    nu_cov = _invert_neg_hessian(hess_f(nu_hat, expected, params))

    return DocPosterior(
        nu_hat=nu_hat,
        nu_cov=nu_cov,
        token_indices=indices,
        token_counts=counts,
        resp=resp,
        expected_counts=expected,
        proportions=softmax(nu_hat),
        converged=converged and newton_ok,
        iterations=iterations,
    )


def elbo(record: RecordBags, posterior: DocPosterior, params: ModelParams) -> float:
    """Variational objective E_q[log p(nu, z, x)] + H[q] for one record.

    The Gaussian entropy and prior cross-entropy are exact. The expectation of
    logsumexp(nu) uses its second-order expansion at the mode,
    ``logsumexp(nu_hat) + tr((diag(pi) - pi pi') cov) / 2``; the zeroth-order
    version overshoots the log evidence (see module note). Used as a
    convergence diagnostic; per-record convergence itself is declared on mode
    movement.
    """
    k = params.num_phenotypes
    nu_hat, nu_cov = posterior.nu_hat, posterior.nu_cov
    if nu_hat.shape != (k,):
        raise ValueError("posterior dimension does not match params")
    if len(record.bags) != params.num_types:
        raise ValueError("record has a different number of types than the model")
    for bag, cnt in zip(record.bags, posterior.token_counts):
        if len(bag) != cnt.size or sum(bag.values()) != cnt.sum():
            raise ValueError("posterior was not computed for this record")
    centered = nu_hat - params.mu0

    sign, logdet_prior = np.linalg.slogdet(params.sigma0)
    if sign <= 0:
        raise ValueError("sigma0 must be positive definite")
    e_log_prior = -0.5 * (
        k * np.log(2.0 * np.pi)
        + logdet_prior
        + float(np.sum(params.sigma0_inv * nu_cov))
        + float(centered @ params.sigma0_inv @ centered)
    )

    s = _total_counts(posterior.expected_counts)
    pi_hat = softmax(nu_hat)
    lse_correction = 0.5 * float(np.sum((np.diag(pi_hat) - np.outer(pi_hat, pi_hat)) * nu_cov))
    e_eta = nu_hat - (log_sum_exp(nu_hat) + lse_correction)
    e_log_assign = float(e_eta @ s)

    e_log_tokens = 0.0
    entropy_z = 0.0
    for m in range(params.num_types):
        idx = posterior.token_indices[m]
        if idx.size == 0:
            continue
        cnt = posterior.token_counts[m]
        q = posterior.resp[m]
        e_log_tokens += float(cnt @ (q * params.log_beta[m][:, idx]).sum(axis=0))
        qlogq = np.where(q > 0.0, q * np.log(np.where(q > 0.0, q, 1.0)), 0.0)
        entropy_z -= float(cnt @ qlogq.sum(axis=0))

    sign, logdet_cov = np.linalg.slogdet(nu_cov)
    if sign <= 0:
        raise ValueError("posterior covariance must be positive definite")
    entropy_nu = 0.5 * (k * (np.log(2.0 * np.pi) + 1.0) + logdet_cov)

    return e_log_prior + e_log_assign + e_log_tokens + entropy_nu + entropy_z
