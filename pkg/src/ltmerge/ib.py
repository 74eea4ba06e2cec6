"""Clustering-based Information Bottleneck estimators.

Everything here works on float64 numpy arrays.  Representations are
clustered into ``C`` clusters (``C`` = number of classes); soft assignments
are the softmax of negative squared distances to the centroids.  From those
we estimate the joint distributions, the two mutual informations, the IB
loss, the separable variational bound (IBB), the data-only constant C0, and
the analytic gradient of IBB with respect to a merge mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import numeric_grad

LOG_FLOOR = 1e-12


class IBError(ValueError):
    """Invalid probability estimate or inconsistent estimator inputs."""


def safe_log(p) -> np.ndarray:
    return np.log(np.maximum(p, LOG_FLOOR))


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return pts.reshape(pts.shape[0], -1)


def sq_dists(points, centroids) -> np.ndarray:
    """(n, C) squared euclidean distances, accumulated in a fixed order."""
    x = _as_points(points)
    c = _as_points(centroids)
    if x.shape[1] != c.shape[1]:
        raise IBError(f"point dimension {x.shape[1]} != centroid dimension {c.shape[1]}")
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


# ---------------------------------------------------------------- clustering


def kmeans(points, C: int, rng: np.random.Generator, max_iter: int = 50,
           tol: float = 1e-6) -> np.ndarray:
    """k-means++ seeding followed by Lloyd iterations.

    Stops when the relative change in inertia drops below ``tol`` or after
    ``max_iter`` iterations.  A cluster that empties is re-seeded with the
    point farthest from its current centroid.
    """
    x = _as_points(points)
    n = x.shape[0]
    if C < 1:
        raise IBError("need at least one cluster")
    if n < C:
        raise IBError(f"k-means needs at least {C} points, got {n}")

    centroids = np.empty((C, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = sq_dists(x, centroids[:1])[:, 0]
    for k in range(1, C):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids[k] = x[idx]
        closest = np.minimum(closest, sq_dists(x, centroids[k:k + 1])[:, 0])

    prev = None
    for _ in range(max_iter):
        d = sq_dists(x, centroids)
        assign = d.argmin(axis=1)
        for k in range(C):
            members = assign == k
            if members.any():
                centroids[k] = x[members].mean(axis=0)
            else:
                far = int(d[np.arange(n), assign].argmax())
                centroids[k] = x[far]
                assign[far] = k
        inertia = sq_dists(x, centroids).min(axis=1).sum()
        if prev is not None and abs(prev - inertia) <= tol * max(prev, 1e-300):
            break
        prev = inertia
    return centroids


def soft_assign(points, centroids) -> np.ndarray:
    """phi[i, a] = softmax_a(-||x_i - c_a||^2), row-stable.

    A single point (1-D input) returns a length-C vector.
    """
    arr = np.asarray(points, dtype=np.float64)
    single = arr.ndim == 1
    logits = -sq_dists(arr[None] if single else arr, centroids)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    phi = e / e.sum(axis=1, keepdims=True)
    return phi[0] if single else phi


# --------------------------------------------------------------- estimation


@dataclass
class IBProbs:
    joint_tx: np.ndarray  # P(X~ in a, X in b)
    joint_ty: np.ndarray  # P(X~ in a, Y = y)
    p_t: np.ndarray
    p_x: np.ndarray
    p_y: np.ndarray


def _check_assignments(phi, name):
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim != 2:
        raise IBError(f"{name} must be an (n, C) matrix")
    if (phi < 0).any() or not np.allclose(phi.sum(axis=1), 1.0, atol=1e-9):
        raise IBError(f"{name} rows must be probability vectors")
    return phi


def one_hot(labels, C: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise IBError(f"labels must lie in [0, {C})")
    out = np.zeros((labels.size, C))
    out[np.arange(labels.size), labels] = 1.0
    return out


def estimate_probs(phi_t, phi_x, labels, num_classes: int | None = None) -> IBProbs:
    phi_t = _check_assignments(phi_t, "merged-token assignments")
    phi_x = _check_assignments(phi_x, "input assignments")
    labels = np.asarray(labels, dtype=np.int64)
    n = phi_t.shape[0]
    if phi_x.shape[0] != n or labels.shape != (n,):
        raise IBError("assignment and label counts differ")
    C = num_classes or phi_t.shape[1]
    y = one_hot(labels, C)
    joint_tx = phi_t.T @ phi_x / n
    joint_ty = phi_t.T @ y / n
    return IBProbs(joint_tx, joint_ty, phi_t.mean(axis=0), phi_x.mean(axis=0), y.mean(axis=0))


def mutual_info(joint) -> float:
    """I = sum J log(J / (row * col)) in nats, with 0 log 0 = 0."""
    J = np.asarray(joint, dtype=np.float64)
    if (J < 0).any():
        raise IBError("joint has negative entries")
    if abs(J.sum() - 1.0) > 1e-9:
        raise IBError(f"joint sums to {J.sum()!r}, not 1")
    row = J.sum(axis=1, keepdims=True)
    col = J.sum(axis=0, keepdims=True)
    nz = J > 0
    ratio = J[nz] / (row * col)[nz]
    return float(max(np.sum(J[nz] * np.log(ratio)), 0.0))


def ib_loss(probs: IBProbs) -> float:
    return mutual_info(probs.joint_tx) - mutual_info(probs.joint_ty)


def update_Q(phi_t, labels, num_classes: int | None = None) -> np.ndarray:
    """Q[a, y] = P(X~ in a | Y = y) estimated from soft assignments."""
    phi_t = _check_assignments(phi_t, "merged-token assignments")
    C = num_classes or phi_t.shape[1]
    y = one_hot(labels, C)
    counts = y.sum(axis=0)
    if (counts == 0).any():
        raise IBError(f"classes without samples: {np.flatnonzero(counts == 0).tolist()}")
    return (phi_t.T @ y) / counts


def c0_const(phi_x) -> float:
    """(1/n^2) sum_ij sum_b phi(X_i,b) log phi(X_j,b), in O(nC)."""
    phi_x = np.asarray(phi_x, dtype=np.float64)
    return float(np.dot(phi_x.mean(axis=0), safe_log(phi_x).mean(axis=0)))


def neg_entropy(phi_x) -> np.ndarray:
    """sum_b phi(X_i,b) log phi(X_i,b) per row."""
    phi_x = np.asarray(phi_x, dtype=np.float64)
    return (phi_x * safe_log(phi_x)).sum(axis=1)


def psi(phi_x, labels, Q) -> np.ndarray:
    """psi[i, a] = sum_b phi log phi - log Q(a | y_i), shape (n, C)."""
    labels = np.asarray(labels, dtype=np.int64)
    logQ = safe_log(Q)
    return neg_entropy(phi_x)[:, None] - logQ[:, labels].T


def psi_prior(phi_x, prior, Q) -> np.ndarray:
    """Label-free psi: the log Q term averaged under the class prior."""
    expected = safe_log(Q) @ np.asarray(prior, dtype=np.float64)
    return neg_entropy(phi_x)[:, None] - expected[None, :]


def ibb_terms(phi_t, phi_x, labels, Q) -> np.ndarray:
    """Per-sample contributions to IBB; their mean is the bound."""
    phi_t = np.asarray(phi_t, dtype=np.float64)
    return (phi_t * psi(phi_x, labels, Q)).sum(axis=1)


def ibb_value(phi_t, phi_x, labels, Q) -> float:
    return float(ibb_terms(phi_t, phi_x, labels, Q).mean())


def ibb_bound(merged, phi_x, labels, state: "ClusterState") -> float:
    """IBB for merged tokens (n, P, D) under the frozen statistics of ``state``."""
    if state is None:
        raise IBError("IBB needs a populated ClusterState")
    phi_t = soft_assign(_as_points(merged), state.merged_centroids)
    return ibb_value(phi_t, phi_x, labels, state.Q)


def info_x_upper(phi_t, phi_x) -> float:
    """Upper bound on I(X~, X) obtained from the log-sum inequality."""
    phi_t = np.asarray(phi_t, dtype=np.float64)
    first = float((phi_t.sum(axis=1) * neg_entropy(phi_x)).mean())
    return first - c0_const(phi_x)


def info_y_lower(phi_t, labels, Q) -> float:
    """Lower bound on I(X~, Y) for any valid variational Q."""
    phi_t = np.asarray(phi_t, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    return float((phi_t * safe_log(Q)[:, labels].T).sum(axis=1).mean())


# ------------------------------------------------------------ cluster state


@dataclass
class ClusterState:
    merged_centroids: np.ndarray  # (C, P*D)
    input_centroids: np.ndarray  # (C, flat input dim)
    Q: np.ndarray  # (C, C), columns sum to one
    prior: np.ndarray  # (C,)
    epoch: int = -1

    @property
    def C(self) -> int:
        return self.Q.shape[0]

    def validate(self):
        if self.merged_centroids.shape[0] != self.C or self.input_centroids.shape[0] != self.C:
            raise IBError("centroid counts must equal the class count")
        if (self.Q < 0).any() or not np.allclose(self.Q.sum(axis=0), 1.0, atol=1e-9):
            raise IBError("Q columns must be probability vectors")
        return self


def fit_state(merged, phi_x, labels, input_centroids, C: int, rng, epoch: int = -1) -> ClusterState:
    """Cluster merged tokens and estimate Q and the class prior."""
    pts = _as_points(merged)
    centroids = kmeans(pts, C, rng)
    phi_t = soft_assign(pts, centroids)
    prior = one_hot(labels, C).mean(axis=0)
    return ClusterState(centroids, np.asarray(input_centroids, dtype=np.float64),
                        update_Q(phi_t, labels, C), prior, epoch).validate()


# ----------------------------------------------------------------- gradient


def s_gamma_zeta(merged, centroids):
    """Rescaled S, gamma and zeta for each sample.

    S[i, a] carries a shared per-sample factor exp(m_i) so the largest
    entry is 1; the combination S / gamma^2 * (gamma C_a - zeta) is
    invariant to that factor.
    """
    logits = -sq_dists(merged, centroids)
    logits -= logits.max(axis=1, keepdims=True)
    S = np.exp(logits)
    gamma = S.sum(axis=1)
    zeta = S @ _as_points(centroids)
    return S, gamma, zeta


def mask_direction(merged, centroids, psi_mat) -> np.ndarray:
    """M_i = sum_a S_ia / gamma_i^2 (gamma_i C_a - zeta_i) psi_ia, shape (n, P*D).

    This is the gradient of sample i's IBB term with respect to its
    flattened merged tokens, divided by two.
    """
    c = _as_points(centroids)
    S, gamma, zeta = s_gamma_zeta(merged, c)
    w = S / gamma[:, None] ** 2 * psi_mat
    # sum_a w_ia (gamma_i C_a - zeta_i)
    return gamma[:, None] * (w @ c) - w.sum(axis=1)[:, None] * zeta


def merge_batch(G, Z) -> np.ndarray:
    """X~_i = G_i^T Z_i for a shared (N, P) or per-sample (n, N, P) mask."""
    G = np.asarray(G, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    if G.ndim == 2:
        if G.shape[0] != Z.shape[1]:
            raise IBError(f"mask rows {G.shape[0]} != token count {Z.shape[1]}")
        return np.einsum("np,bnd->bpd", G, Z)
    if G.shape[:2] != Z.shape[:2]:
        raise IBError("mask batch/tokens do not match Z")
    return np.einsum("bnp,bnd->bpd", G, Z)


def ibb_of_mask(G, Z, phi_x, labels, centroids, Q) -> float:
    merged = merge_batch(G, Z)
    return ibb_value(soft_assign(_as_points(merged), centroids), phi_x, labels, Q)


def ibb_grad(G, Z, phi_x, labels, centroids, Q) -> np.ndarray:
    """Analytic gradient of IBB with respect to a shared (N, P) mask.

    grad = (2/n) sum_i sum_a Z_i S_ia/gamma_i^2 (gamma_i C_a - zeta_i)^T psi_ia
    with centroids and Q held fixed.
    """
    G = np.asarray(G, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    n, N, D = Z.shape
    if G.ndim != 2 or G.shape[0] != N:
        raise IBError(f"mask shape {G.shape} incompatible with Z {Z.shape}")
    P = G.shape[1]
    merged = merge_batch(G, Z)
    M = mask_direction(merged, centroids, psi(phi_x, labels, Q)).reshape(n, P, D)
    return 2.0 / n * np.einsum("bnd,bpd->np", Z, M)


def fd_grad(fn, G, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``fn(G)`` over every entry of G."""
    if step <= 0:
        raise ValueError("step must be positive")
    return numeric_grad(fn, G, step)


# ------------------------------------------------------------ random probes


@dataclass
class GradProbe:
    G: np.ndarray
    Z: np.ndarray
    phi_x: np.ndarray
    labels: np.ndarray
    centroids: np.ndarray
    Q: np.ndarray

    def value(self, G=None) -> float:
        return ibb_of_mask(self.G if G is None else G, self.Z, self.phi_x, self.labels,
                           self.centroids, self.Q)

    def grad(self) -> np.ndarray:
        return ibb_grad(self.G, self.Z, self.phi_x, self.labels, self.centroids, self.Q)


def _random_simplex(rng, rows, C, sharpness=1.0):
    logits = rng.normal(scale=sharpness, size=(rows, C))
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def random_probe(rng: np.random.Generator, n_max=16, N_max=8, P_max=4, C_max=3, D_max=4) -> GradProbe:
    """A small random instance on which soft assignments are genuinely soft."""
    n = int(rng.integers(2, n_max + 1))
    N = int(rng.integers(2, N_max + 1))
    P = int(rng.integers(1, min(P_max, N) + 1))
    C = int(rng.integers(2, C_max + 1))
    D = int(rng.integers(1, D_max + 1))
    G = _random_simplex(rng, P, N).T  # columns convex
    Z = rng.normal(scale=0.6, size=(n, N, D))
    merged = merge_batch(G, Z).reshape(n, -1)
    # centroids near the data so assignments overlap
    centroids = merged[rng.choice(n, size=C, replace=n < C)] + rng.normal(scale=0.3, size=(C, P * D))
    labels = np.arange(n) % C
    rng.shuffle(labels)
    phi_x = _random_simplex(rng, n, C, sharpness=2.0)
    Q = _random_simplex(rng, C, C).T
    return GradProbe(G, Z, phi_x, labels, centroids, Q)


@dataclass
class GradCheckResult:
    trials: int
    max_rel_err: float
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def grad_rel_err(analytic, numeric, atol: float = 1e-8) -> float:
    """max |a - f| / max(|f|, atol) over entries."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), atol)))


def gradcheck(trials: int, seed: int, step: float = 1e-5, rtol: float = 1e-5,
              atol: float = 1e-8) -> GradCheckResult:
    """Compare ibb_grad with central differences on random probes.

    An entry passes when |analytic - numeric| <= rtol * max(|numeric|, atol/rtol);
    the reported error is the relative error with an absolute floor.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    failures = []
    for t in range(trials):
        probe = random_probe(rng)
        a = probe.grad()
        f = fd_grad(probe.value, probe.G, step)
        err = np.abs(a - f)
        ok = np.all(err <= np.maximum(rtol * np.abs(f), atol))
        rel = grad_rel_err(a, f, atol / rtol)
        worst = max(worst, rel)
        if not ok:
            failures.append((t, rel))
    return GradCheckResult(trials, worst, failures)
