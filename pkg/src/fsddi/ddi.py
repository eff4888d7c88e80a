"""Deep domain isolation: clustering samples in class-gradient space.

Pipeline (:func:`deep_domain_isolation`):

1. the server draws a random subset of parameter coordinates (pruning);
2. every client computes, for each class present in each of its samples,
   the gradient of the class-restricted loss, keeps the selected
   coordinates and scales the result to unit length;
3. per class, a diagonal Gaussian mixture is fitted by federated EM in
   which clients only return per-component sufficient statistics;
4. clients upload per-class posterior membership vectors;
5. the server builds a Bhattacharyya similarity between samples over the
   classes they share and runs spectral clustering on it.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import eigh
from scipy.special import logsumexp
from sklearn.cluster import KMeans
from sklearn.metrics import silhouette_score

from .errors import DegenerateGradientError, FsddiError, StageError
from .metrics import rand_index
from .nn import backward_from_tape, class_mask_weights, validate_indices
from .rng import derive_seed, stream

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6


class EMMonotonicityError(FsddiError, ArithmeticError):
    pass


@dataclass
class GmmFitConfig:
    M: int = 2
    max_rounds: int = 60
    tol: float = 1e-6
    var_floor: float = VAR_FLOOR
    init_scale: float = 0.5
    monotonic_tol: float = 1e-8
    n_init: int = 5

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.n_init < 1:
            raise ValueError("n_init must be >= 1")


@dataclass
class GmmModel:
    class_id: int
    weights: np.ndarray  # (M,)
    means: np.ndarray  # (M, dim)
    variances: np.ndarray  # (M, dim)
    history: list = field(default_factory=list)
    reseeded: list = field(default_factory=list)

    @property
    def M(self):
        return self.weights.size

    @property
    def dim(self):
        return self.means.shape[1]

    def log_joint(self, x):
        """``log pi_m + log N(x | mu_m, diag var_m)`` for rows of ``x``: ``(n, M)``."""
        x = np.atleast_2d(x)
        n, dim = x.shape
        out = np.empty((n, self.M))
        const = dim * math.log(2 * math.pi)
        for m in range(self.M):
            diff = x - self.means[m]
            quad = (diff * diff / self.variances[m]).sum(axis=1)
            out[:, m] = (math.log(self.weights[m]) if self.weights[m] > 0 else -np.inf) - 0.5 * (
                quad + np.log(self.variances[m]).sum() + const)
        return out


@dataclass
class ClassGradients:
    """Unit-norm class gradients held by one client for one class."""

    class_id: int
    sample_ids: np.ndarray
    vectors: np.ndarray


@dataclass
class Clustering:
    sample_ids: np.ndarray
    labels: np.ndarray
    M: int
    provenance: str = "ddi"

    def assignments(self):
        return {int(s): int(c) for s, c in zip(self.sample_ids, self.labels)}

    def cluster_sizes(self):
        return np.bincount(self.labels, minlength=self.M)

    @property
    def degenerate(self):
        return bool((self.cluster_sizes() == 0).any())

    def label_of(self, sample_ids):
        lut = self.assignments()
        return np.array([lut[int(s)] for s in np.atleast_1d(sample_ids)], dtype=np.int64)

    def compacted(self):
        """Drop empty clusters and renumber the rest consecutively."""
        sizes = self.cluster_sizes()
        keep = np.flatnonzero(sizes > 0)
        remap = np.full(self.M, -1, dtype=np.int64)
        remap[keep] = np.arange(keep.size)
        return Clustering(self.sample_ids.copy(), remap[self.labels], int(keep.size),
                          self.provenance)

    def to_json(self, alpha=None, rand_vs_domain=None, per_class_rand=None):
        return {
            "M": int(self.M),
            "alpha": alpha,
            "provenance": self.provenance,
            "assignments": {str(int(s)): int(c) for s, c in zip(self.sample_ids, self.labels)},
            "rand_index_vs_domain": rand_vs_domain,
            "per_class_rand": {str(k): v for k, v in (per_class_rand or {}).items()},
        }

    @classmethod
    def from_json(cls, obj):
        items = sorted((int(k), int(v)) for k, v in obj["assignments"].items())
        ids = np.array([k for k, _ in items], dtype=np.int64)
        labels = np.array([v for _, v in items], dtype=np.int64)
        return cls(ids, labels, int(obj["M"]), obj.get("provenance", "ddi"))


# ------------------------------------------------------------ gradients

def prune_indices(p, alpha, seed=0):
    """``ceil(alpha * p)`` sorted distinct coordinates, identical for every client."""
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    k = math.ceil(round(alpha * p, 9))
    if k >= p:
        return np.arange(p)
    rng = stream(seed, "pruning", p)
    return np.sort(rng.choice(p, size=k, replace=False))


def raw_class_gradients(params, client, classes):
    """Unnormalized class-masked gradients for every sample of one client.

    Returns ``{c: (sample_ids, raw (n_c, p))}`` covering only samples that
    contain class ``c``.
    """
    net = params.network
    per_class = {c: ([], []) for c in classes}
    for i, sid in enumerate(client.sample_ids):
        mask = client.targets[i]
        present = [c for c in classes if (mask == c).any()]
        if not present:
            continue
        tape = net.forward(params.values, client.images[i][None], mode="eval")
        for c in present:
            g = backward_from_tape(tape, mask[None], class_mask_weights(mask, c)[None])
            per_class[c][0].append(int(sid))
            per_class[c][1].append(g)
    out = {}
    for c, (ids, grads) in per_class.items():
        p = params.size
        out[c] = (np.array(ids, dtype=np.int64),
                  np.array(grads) if grads else np.zeros((0, p)))
    return out


def normalize_class_gradients(raw, indices=None, class_id=None):
    """Slice ``raw`` rows to ``indices`` (if any) and scale to unit norm.

    Rows that are exactly zero cannot be normalized; they are dropped and
    their positions returned.
    """
    ids, mat = raw
    if indices is not None:
        idx = validate_indices(indices, mat.shape[1])
        mat = np.ascontiguousarray(mat[:, idx])
    norms = np.linalg.norm(mat, axis=1)
    keep = norms > 0
    dropped = ids[~keep]
    if dropped.size:
        log.warning("class %s: dropping %d sample(s) with zero gradient", class_id, dropped.size)
    return ClassGradients(class_id, ids[keep], mat[keep] / norms[keep, None]), dropped


def collect_class_gradients(params, clients, classes, indices=None, raw_cache=None):
    """Per client, ``{class: ClassGradients}`` on the unit hypersphere.

    ``raw_cache`` (a list parallel to ``clients``) reuses unnormalized
    gradients from an earlier call, e.g. to compare pruning fractions.
    """
    result, dropped = [], {}
    for k, client in enumerate(clients):
        raw = raw_cache[k] if raw_cache is not None else raw_class_gradients(params, client, classes)
        per = {}
        for c in classes:
            cg, lost = normalize_class_gradients(raw[c], indices, c)
            per[c] = cg
            if lost.size:
                dropped.setdefault(c, []).extend(lost.tolist())
        result.append(per)
    return result, dropped


# ------------------------------------------------------------ federated EM

def _client_moments(x):
    return x.shape[0], x.sum(axis=0), (x * x).sum(axis=0)


def _client_estep(gmm, x):
    """Sufficient statistics a client returns for one EM round."""
    if x.shape[0] == 0:
        M, dim = gmm.M, gmm.dim
        return dict(N=np.zeros(M), S1=np.zeros((M, dim)), S2=np.zeros((M, dim)), ll=0.0,
                    worst=(np.inf, None))
    lj = gmm.log_joint(x)
    lse = logsumexp(lj, axis=1)
    r = np.exp(lj - lse[:, None])
    worst = int(np.argmin(lse))
    return dict(N=r.sum(axis=0), S1=r.T @ x, S2=r.T @ (x * x), ll=float(lse.sum()),
                worst=(float(lse[worst]), x[worst]))


def fed_gmm_fit(client_vectors, config=None, seed=0, class_id=0):
    """Fit a diagonal GMM by EM where the server only sees summed statistics.

    ``client_vectors`` is a list of ``(n_k, dim)`` arrays; a one-element
    list is the centralized fit. The pooled log-likelihood is recorded in
    ``model.history`` and must not decrease between rounds.
    """
    cfg = config or GmmFitConfig()
    xs = [np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in client_vectors]
    dims = {x.shape[1] for x in xs if x.size}
    if len(dims) != 1:
        raise ValueError("clients disagree on vector dimension or hold no data")
    dim = dims.pop()
    xs = [x if x.size else np.zeros((0, dim)) for x in xs]
    M = cfg.M
    # one pass of global moments
    n_tot, s1, s2 = 0, np.zeros(dim), np.zeros(dim)
    for x in xs:
        n, a, b = _client_moments(x)
        n_tot += n
        s1 += a
        s2 += b
    if n_tot < M:
        raise ValueError(f"need at least M={M} vectors, have {n_tot}")
    mean = s1 / n_tot
    var = np.maximum(s2 / n_tot - mean * mean, cfg.var_floor)
    best = None
    for restart in range(1 if M == 1 else cfg.n_init):
        rng = stream(seed, "gmm", class_id, restart)
        means = mean + cfg.init_scale * np.sqrt(var) * rng.standard_normal((M, dim))
        if M == 1:
            means = mean[None].copy()
        gmm = _em(xs, GmmModel(class_id, np.full(M, 1.0 / M), means, np.tile(var, (M, 1))),
                  cfg, var, n_tot)
        # restarts share nothing but the summed statistics, so the choice stays federated;
        # near ties keep the earlier restart so rounding cannot flip the pick
        if best is None or gmm.history[-1] > best.history[-1] + 1e-9 * max(1.0, abs(best.history[-1])):
            best = gmm
    return best


def _em(xs, gmm, cfg, var, n_tot):
    M, dim, class_id = gmm.M, gmm.dim, gmm.class_id
    prev = None
    skip_check = False
    for it in range(cfg.max_rounds + 1):
        stats = [_client_estep(gmm, x) for x in xs]
        Nm = np.zeros(M)
        S1 = np.zeros((M, dim))
        S2 = np.zeros((M, dim))
        ll = 0.0
        for s in stats:
            Nm += s["N"]
            S1 += s["S1"]
            S2 += s["S2"]
            ll += s["ll"]
        gmm.history.append(ll)
        if prev is not None and not skip_check:
            if ll < prev - cfg.monotonic_tol * max(1.0, abs(prev)):
                raise EMMonotonicityError(
                    f"class {class_id}: log-likelihood fell from {prev!r} to {ll!r} at round {it}")
        if prev is not None and not skip_check and ll - prev < cfg.tol * max(1.0, abs(prev)):
            break
        if it == cfg.max_rounds:
            break
        skip_check = False
        prev = ll
        empty = Nm < 1e-12 * n_tot
        safe = np.where(empty, 1.0, Nm)
        new_means = S1 / safe[:, None]
        new_vars = np.maximum(S2 / safe[:, None] - new_means ** 2, cfg.var_floor)
        weights = Nm / Nm.sum()
        if empty.any():
            # re-seed from the worst-explained sample anywhere in the federation
            worst_val, worst_x = min((s["worst"] for s in stats), key=lambda w: w[0])
            for m in np.flatnonzero(empty):
                log.warning("class %s: component %d emptied at round %d; re-seeding", class_id,
                            m, it)
                new_means[m] = worst_x
                new_vars[m] = var
                weights[m] = 1.0 / M
                gmm.reseeded.append((it, int(m)))
            weights = weights / weights.sum()
            skip_check = True
        gmm.weights, gmm.means, gmm.variances = weights, new_means, new_vars
    return gmm


def membership(gmm, vectors):
    """Posterior component probabilities, computed in log space: ``(n, M)``."""
    lj = gmm.log_joint(np.atleast_2d(vectors))
    return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))


# ------------------------------------------------------------ similarity

def bhattacharyya(p, q):
    return float(np.sqrt(np.asarray(p) * np.asarray(q)).sum())


def similarity(memb_i, memb_j):
    """Mean Bhattacharyya coefficient over the classes two samples share.

    ``memb_i`` / ``memb_j`` map class id -> membership vector. No shared
    class gives 0.
    """
    common = sorted(set(memb_i) & set(memb_j))
    if not common:
        return 0.0
    return sum(bhattacharyya(memb_i[c], memb_j[c]) for c in common) / len(common)


@dataclass
class SimilarityMatrix:
    sample_ids: np.ndarray
    values: np.ndarray


def similarity_matrix(memberships, sample_ids):
    """Pairwise similarity from ``{class: (ids, memberships (n_c, M))}``."""
    sample_ids = np.asarray(sample_ids, dtype=np.int64)
    N = sample_ids.size
    pos = {int(s): i for i, s in enumerate(sample_ids)}
    num = np.zeros((N, N))
    count = np.zeros((N, N))
    for c in sorted(memberships):
        ids, S = memberships[c]
        if len(ids) == 0:
            continue
        rows = np.array([pos[int(s)] for s in ids], dtype=np.intp)
        A = np.zeros((N, S.shape[1]))
        A[rows] = np.sqrt(S)
        present = np.zeros(N)
        present[rows] = 1.0
        num += A @ A.T
        count += np.outer(present, present)
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = np.where(count > 0, num / np.maximum(count, 1), 0.0)
    sim = np.clip(0.5 * (sim + sim.T), 0.0, 1.0)
    return SimilarityMatrix(sample_ids, sim)


# ------------------------------------------------------------ spectral step

def spectral_embedding(S, M):
    S = np.asarray(S, dtype=np.float64)
    N = S.shape[0]
    S = S.copy()
    deg = S.sum(axis=1)
    isolated = deg <= 0
    S[isolated, isolated] = 1.0  # isolates connect to themselves only
    deg = S.sum(axis=1)
    dinv = 1.0 / np.sqrt(deg)
    L = np.eye(N) - dinv[:, None] * S * dinv[None, :]
    L = 0.5 * (L + L.T)
    vals, vecs = eigh(L, subset_by_index=[0, min(M, N) - 1])
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    emb = vecs / np.where(norms > 0, norms, 1.0)
    return emb, isolated, vals


def spectral_cluster(S, M, seed=0, n_init=20, max_iter=300):
    """Normalized-Laplacian spectral clustering with k-means++ on the embedding."""
    values = S.values if isinstance(S, SimilarityMatrix) else np.asarray(S)
    N = values.shape[0]
    if M <= 1 or N == 0:
        return np.zeros(N, dtype=np.int64)
    emb, isolated, _ = spectral_embedding(values, M)
    core = ~isolated if (~isolated).sum() >= M else np.ones(N, dtype=bool)
    km = KMeans(n_clusters=M, init="k-means++", n_init=n_init, max_iter=max_iter,
                random_state=derive_seed(seed, "kmeans"))
    km.fit(emb[core])
    labels = np.empty(N, dtype=np.int64)
    labels[core] = km.labels_
    if (~core).any():
        d = ((emb[~core, None, :] - km.cluster_centers_[None]) ** 2).sum(axis=2)
        labels[~core] = d.argmin(axis=1)
    return labels


# ------------------------------------------------------------ end to end

@dataclass
class DDIResult:
    clustering: Clustering
    gmms: dict
    memberships: dict
    similarity: SimilarityMatrix
    diagnostics: dict
    raw_cache: Optional[list] = None


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name attached
        raise StageError(name, exc) from exc


def deep_domain_isolation(params, clients, M=2, alpha=1.0, gmm_config=None, seed=0,
                          classes=None, exclude=(), domains=None, raw_cache=None,
                          keep_raw=False):
    """Cluster every training sample of ``clients`` into ``M`` groups.

    ``clients`` are :class:`~fsddi.fed.ClientData` with masks as targets.
    ``domains`` (sample id -> hidden domain) is only read to fill the
    diagnostics.
    """
    gcfg = gmm_config or GmmFitConfig(M=M)
    if gcfg.M != M:
        gcfg = GmmFitConfig(**{**gcfg.__dict__, "M": M})
    if classes is None:
        n_cls = params.arch.get("num_classes", 5)
        classes = [c for c in range(n_cls) if c not in set(exclude)]
    p = params.size
    indices = None if alpha >= 1 else _stage("prune_indices", prune_indices, p, alpha, seed)
    if raw_cache is None:
        raw_cache = _stage("collect_class_gradients",
                           lambda: [raw_class_gradients(params, c, classes) for c in clients])
    per_client, dropped = _stage("collect_class_gradients", collect_class_gradients, params,
                                 clients, classes, indices, raw_cache)
    gmms, memberships = {}, {}
    for c in classes:
        vecs = [pc[c].vectors for pc in per_client]
        n_c = sum(v.shape[0] for v in vecs)
        if n_c < M:
            log.warning("class %s has %d vectors (< M); skipped", c, n_c)
            continue
        gmm = _stage(f"fed_gmm_fit[class {c}]", fed_gmm_fit, vecs, gcfg, seed, c)
        gmms[c] = gmm
        # each client uploads M numbers per (sample, class)
        ids = np.concatenate([pc[c].sample_ids for pc in per_client])
        S = np.concatenate([membership(gmm, pc[c].vectors) if pc[c].vectors.shape[0]
                            else np.zeros((0, M)) for pc in per_client])
        memberships[c] = (ids, S)
    all_ids = np.concatenate([cl.sample_ids for cl in clients])
    sim = _stage("similarity", similarity_matrix, memberships, all_ids)
    labels = _stage("spectral_cluster", spectral_cluster, sim, M, seed)
    clustering = Clustering(all_ids, labels, M, "ddi")
    diag = {"alpha": alpha, "dim": int(p if indices is None else indices.size),
            "normalization": "after_pruning", "dropped": {str(k): len(v) for k, v in dropped.items()},
            "em_rounds": {str(c): len(g.history) - 1 for c, g in gmms.items()}}
    if M > 1 and len(all_ids) > M:
        dist = 1.0 - sim.values
        np.fill_diagonal(dist, 0.0)
        try:
            diag["silhouette"] = float(silhouette_score(dist, labels, metric="precomputed"))
        except ValueError:
            diag["silhouette"] = float("nan")
        diag["no_isolatable_domains"] = not diag["silhouette"] >= 0.05
    if domains is not None:
        dom = np.array([domains[int(s)] for s in all_ids])
        diag["rand_index_vs_domain"] = rand_index(labels, dom)
        per_class = {}
        for c, (ids, S) in memberships.items():
            if len(ids) >= 2:
                per_class[c] = rand_index(S.argmax(axis=1), np.array([domains[int(s)] for s in ids]))
        diag["per_class_rand"] = per_class
    return DDIResult(clustering, gmms, memberships, sim, diag, raw_cache if keep_raw else None)
