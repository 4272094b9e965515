"""Feature adapters mapping H-dim semantic embeddings to the recommender
dimension d.

Five architectures: PCA projection alone, a linear layer, a two-layer MLP,
product quantization followed by a linear layer, and a dense-gated mixture
of experts. PCA may additionally run as a frozen pre-processing step in
front of any trainable architecture. PCA and PQ are fitted once on the item
table, frozen, and persisted; only linear / MLP / MoE / gate parameters
receive gradients.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

ARCHITECTURES = ("pca_only", "linear", "mlp", "pq", "moe")


def default_d_pca(input_dim: int) -> int:
    return 128 if input_dim >= 512 else input_dim // 2


@dataclass
class AdapterSpec:
    architecture: str
    input_dim: int
    d: int = 64
    use_pca_preprocess: bool = False
    d_pca: int | None = None
    experts: int = 8
    pq_m: int = 8
    pq_k: int | None = None
    pq_iters: int = 25
    pq_restarts: int = 3

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown adapter architecture {self.architecture!r}; "
                             f"expected one of {ARCHITECTURES}")
        if self.architecture == "pca_only":
            if self.use_pca_preprocess:
                raise ValueError("pca_only has no trainable parts; "
                                 "use_pca_preprocess does not apply")
            if self.d_pca is None:
                self.d_pca = self.d
            if self.d != self.d_pca:
                raise ValueError(f"pca_only requires d == d_pca, got d={self.d}, d_pca={self.d_pca}")
        elif self.use_pca_preprocess:
            if self.d_pca is None:
                self.d_pca = default_d_pca(self.input_dim)
            if not self.d_pca < self.input_dim:
                raise ValueError(f"PCA pre-processing requires d_pca < input_dim, "
                                 f"got {self.d_pca} >= {self.input_dim}")
        if self.experts < 1:
            raise ValueError(f"experts must be >= 1, got {self.experts}")

    @property
    def needs_pca(self) -> bool:
        return self.architecture == "pca_only" or self.use_pca_preprocess


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PcaTransform:
    """Centered projection onto the top principal directions.

    components rows are orthonormal, in descending eigenvalue order, with
    the sign convention that each row's first nonzero coordinate is
    positive.
    """

    mean: np.ndarray          # (H,)
    components: np.ndarray    # (d_pca, H)
    eigenvalues: np.ndarray   # (d_pca,)

    @property
    def d_pca(self):
        return self.components.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Project vectors (last axis H) onto the components."""
        return ((x - self.mean) @ self.components.T).astype(np.float32)

    def reconstruct(self, z: np.ndarray) -> np.ndarray:
        return (z @ self.components + self.mean).astype(np.float32)

    def to_entries(self, prefix="pca"):
        return {f"{prefix}.mean": self.mean,
                f"{prefix}.components": self.components,
                f"{prefix}.eigenvalues": self.eigenvalues}

    @classmethod
    def from_entries(cls, entries, prefix="pca"):
        return cls(mean=entries[f"{prefix}.mean"],
                   components=entries[f"{prefix}.components"],
                   eigenvalues=entries[f"{prefix}.eigenvalues"])


def fit_pca(rows: np.ndarray, d_pca: int) -> PcaTransform:
    """Fit PCA via SVD of the centered table.

    Args:
        rows: (N, H) training table, N >= 2.
        d_pca: number of components, at most min(N-1, H).

    Eigenvalues are the sample covariance eigenvalues (ddof=1). Components
    beyond the numerical rank get zero eigenvalues with a warning.
    """
    n, h = rows.shape
    if n < 2:
        raise ValueError(f"PCA needs at least 2 rows, got {n}")
    if not 1 <= d_pca <= min(n - 1, h):
        raise ValueError(f"d_pca must be in [1, min(N-1, H)] = [1, {min(n - 1, h)}], got {d_pca}")
    mean = rows.mean(axis=0, dtype=np.float64)
    centered = rows.astype(np.float64) - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    eigenvalues = (s ** 2) / (n - 1)
    tol = s[0] * max(n, h) * np.finfo(np.float64).eps if s[0] > 0 else 0.0
    rank = int(np.sum(s > tol))
    if d_pca > rank:
        warnings.warn(f"requested d_pca={d_pca} exceeds numerical rank {rank}; "
                      f"trailing eigenvalues set to zero")
        eigenvalues[rank:] = 0.0
    components = vt[:d_pca].copy()
    for row in components:
        nz = np.nonzero(np.abs(row) > 1e-12)[0]
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    return PcaTransform(mean=mean.astype(np.float32),
                        components=components.astype(np.float32),
                        eigenvalues=eigenvalues[:d_pca].astype(np.float32))


def apply_pca(transform: PcaTransform, x: np.ndarray) -> np.ndarray:
    return transform.apply(x)


# ---------------------------------------------------------------------------
# product quantization


@dataclass
class PqCodebooks:
    """Per-subspace k-means codebooks plus the training assignments."""

    m: int
    k: int
    codebooks: np.ndarray   # (M, K, H/M)
    codes: np.ndarray       # (N, M) int32

    @property
    def sub_dim(self):
        return self.codebooks.shape[2]

    def to_entries(self, prefix="pq"):
        entries = {f"{prefix}.codebook.{i}": self.codebooks[i] for i in range(self.m)}
        entries[f"{prefix}.codes"] = self.codes.astype(np.float32)
        return entries

    @classmethod
    def from_entries(cls, entries, prefix="pq"):
        i = 0
        books = []
        while f"{prefix}.codebook.{i}" in entries:
            books.append(entries[f"{prefix}.codebook.{i}"])
            i += 1
        codebooks = np.stack(books)
        codes = entries[f"{prefix}.codes"].astype(np.int32)
        return cls(m=codebooks.shape[0], k=codebooks.shape[1],
                   codebooks=codebooks, codes=codes)


def _kmeans_pp_init(sub: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = sub.shape[0]
    centroids = np.empty((k, sub.shape[1]), dtype=np.float64)
    centroids[0] = sub[rng.integers(n)]
    d2 = np.sum((sub - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = sub[idx]
        d2 = np.minimum(d2, np.sum((sub - centroids[j]) ** 2, axis=1))
    return centroids


def _assign(sub: np.ndarray, centroids: np.ndarray):
    # squared distances in float64; argmin breaks ties by lowest index
    d2 = (np.sum(sub ** 2, axis=1)[:, None]
          - 2.0 * sub @ centroids.T
          + np.sum(centroids ** 2, axis=1)[None, :])
    codes = np.argmin(d2, axis=1)
    return codes, d2[np.arange(sub.shape[0]), codes]


def _lloyd(sub: np.ndarray, k: int, iters: int, rng: np.random.Generator):
    n = sub.shape[0]
    centroids = _kmeans_pp_init(sub, k, rng)
    codes, dist = _assign(sub, centroids)
    for _ in range(iters):
        for j in range(k):
            members = codes == j
            if members.any():
                centroids[j] = sub[members].mean(axis=0)
            else:
                # empty cluster: re-seed to the point farthest from its centroid
                far = int(np.argmax(dist))
                centroids[j] = sub[far]
        centroids = centroids.astype(np.float32).astype(np.float64)
        codes, dist = _assign(sub, centroids)
    return centroids.astype(np.float32), codes.astype(np.int32), float(dist.sum())


def fit_pq(rows: np.ndarray, m: int, k: int, iters: int = 25, seed: int = 0,
           restarts: int = 3) -> PqCodebooks:
    """Fit per-subspace k-means codebooks.

    Each subspace runs k-means++ initialization plus `iters` Lloyd
    iterations, `restarts` times with rng streams seeded by
    (seed, subspace, restart), keeping the restart with the lowest
    quantization error. Centroids are stored as float32; each Lloyd update
    rounds to float32 before re-assigning so the stored codebook and the
    final assignments agree exactly.

    Args:
        rows: (N, H) table with H divisible by m and k <= N.
    """
    n, h = rows.shape
    if h % m != 0:
        raise ValueError(f"dim {h} not divisible by {m} subspaces")
    if not 1 <= k <= n:
        raise ValueError(f"centroid count must be in [1, N={n}], got {k}")
    sub_dim = h // m
    codebooks = np.empty((m, k, sub_dim), dtype=np.float32)
    codes = np.empty((n, m), dtype=np.int32)
    data = rows.astype(np.float64)
    for i in range(m):
        sub = data[:, i * sub_dim:(i + 1) * sub_dim]
        best = None
        for r in range(restarts):
            rng = np.random.default_rng((seed, i, r))
            cents, assign, obj = _lloyd(sub, k, iters, rng)
            if best is None or obj < best[2]:
                best = (cents, assign, obj)
        codebooks[i], codes[:, i] = best[0], best[1]
    return PqCodebooks(m=m, k=k, codebooks=codebooks, codes=codes)


def pq_objective(cb: PqCodebooks, rows: np.ndarray) -> float:
    """Total squared quantization error of `rows` under the codebooks."""
    recon = apply_pq(cb, rows)
    return float(np.sum((rows.astype(np.float64) - recon.astype(np.float64)) ** 2))


def apply_pq(cb: PqCodebooks, x: np.ndarray) -> np.ndarray:
    """Reconstruct vectors from their nearest centroids (ties to the lowest
    centroid index), subspace by subspace."""
    single = x.ndim == 1
    X = np.atleast_2d(x).astype(np.float64)
    sub_dim = cb.sub_dim
    out = np.empty_like(X, dtype=np.float32)
    for i in range(cb.m):
        sub = X[:, i * sub_dim:(i + 1) * sub_dim]
        codes, _ = _assign(sub, cb.codebooks[i].astype(np.float64))
        out[:, i * sub_dim:(i + 1) * sub_dim] = cb.codebooks[i][codes]
    return out[0] if single else out


# ---------------------------------------------------------------------------
# trainable maps


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class LinearMap:
    def __init__(self, in_dim, out_dim, rng, name):
        self.w = ad.Parameter(_uniform_init(rng, (in_dim, out_dim), in_dim), f"{name}.w")
        self.b = ad.Parameter(np.zeros(out_dim, dtype=np.float32), f"{name}.b")

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)

    def params(self):
        return [self.w, self.b]


class MlpMap:
    """Two linear layers with a relu between; hidden width equals the
    output width."""

    def __init__(self, in_dim, out_dim, rng, name):
        self.l1 = LinearMap(in_dim, out_dim, rng, f"{name}.l1")
        self.l2 = LinearMap(out_dim, out_dim, rng, f"{name}.l2")

    def __call__(self, x):
        return self.l2(ad.relu(self.l1(x)))

    def params(self):
        return self.l1.params() + self.l2.params()


class MoeMap:
    """Dense softmax mixture over single-linear experts."""

    def __init__(self, in_dim, out_dim, experts, rng, name):
        self.experts = [LinearMap(in_dim, out_dim, rng, f"{name}.expert.{e}")
                        for e in range(experts)]
        self.gate = LinearMap(in_dim, len(self.experts), rng, f"{name}.gate")

    def gate_weights(self, x: ad.Tensor) -> ad.Tensor:
        return ad.softmax(self.gate(x), axis=-1)

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        weights = self.gate_weights(x)
        out = None
        for e, expert in enumerate(self.experts):
            w_e = ad.narrow(weights, -1, e, e + 1)
            term = ad.mul(expert(x), w_e)
            out = term if out is None else ad.add(out, term)
        return out

    def params(self):
        ps = []
        for ex in self.experts:
            ps.extend(ex.params())
        return ps + self.gate.params()


def make_trainable_adapter(spec: AdapterSpec, in_dim: int, rng, name="adapter"):
    """Build the trainable part for a spec (None for pca_only)."""
    if spec.architecture == "pca_only":
        return None
    if spec.architecture == "linear" or spec.architecture == "pq":
        return LinearMap(in_dim, spec.d, rng, f"{name}.linear")
    if spec.architecture == "mlp":
        return MlpMap(in_dim, spec.d, rng, f"{name}.mlp")
    return MoeMap(in_dim, spec.d, spec.experts, rng, f"{name}.moe")


# ---------------------------------------------------------------------------
# pipeline


class AdapterPipeline:
    """Frozen pre-processing (PCA and/or PQ reconstruction) followed by the
    trainable architecture. `adapted_table()` maps the whole item table and
    is the single transform used at both fit and inference time."""

    def __init__(self, spec: AdapterSpec, base: np.ndarray, pca, pq, trainable):
        self.spec = spec
        self.base = base.astype(np.float32)       # (N, base_dim), frozen
        self.pca = pca
        self.pq = pq
        self.trainable = trainable
        self._base_tensor = ad.Tensor(self.base)

    @property
    def out_dim(self):
        return self.spec.d_pca if self.trainable is None else self.spec.d

    def adapted_table(self) -> ad.Tensor:
        if self.trainable is None:
            return self._base_tensor
        return self.trainable(self._base_tensor)

    def transform(self, x: np.ndarray) -> np.ndarray:
        """Map new vectors through the full frozen+trainable chain (no tape)."""
        z = x
        if self.pca is not None:
            z = self.pca.apply(z)
        if self.pq is not None:
            z = apply_pq(self.pq, z)
        if self.trainable is None:
            return z.astype(np.float32)
        return self.trainable(ad.Tensor(np.atleast_2d(z))).data

    def params(self):
        return [] if self.trainable is None else self.trainable.params()

    def frozen_entries(self):
        entries = {}
        if self.pca is not None:
            entries.update(self.pca.to_entries())
        if self.pq is not None:
            entries.update(self.pq.to_entries())
        return entries


def build_adapter_pipeline(spec: AdapterSpec, rows: np.ndarray, init_rng,
                           fit_seed: int = 0, frozen_entries=None) -> AdapterPipeline:
    """Fit (or restore) the frozen parts on the item table and create the
    trainable part.

    Args:
        rows: (N, H) item table; PCA/PQ are fitted on it.
        init_rng: numpy Generator for trainable-weight initialization.
        fit_seed: seed for the PQ k-means streams.
        frozen_entries: previously persisted PCA/PQ entries to restore
            instead of refitting.
    """
    if rows.shape[1] != spec.input_dim:
        raise ValueError(f"table dim {rows.shape[1]} does not match spec input_dim {spec.input_dim}")
    pca = pq = None
    base = rows
    if spec.needs_pca:
        if frozen_entries and "pca.mean" in frozen_entries:
            pca = PcaTransform.from_entries(frozen_entries)
        else:
            pca = fit_pca(rows, spec.d_pca)
        base = pca.apply(base)
    if spec.architecture == "pq":
        k = spec.pq_k if spec.pq_k else min(256, max(1, rows.shape[0] // 4))
        if frozen_entries and "pq.codebook.0" in frozen_entries:
            pq = PqCodebooks.from_entries(frozen_entries)
        else:
            pq = fit_pq(base, spec.pq_m, k, iters=spec.pq_iters, seed=fit_seed,
                        restarts=spec.pq_restarts)
        base = pq.codebooks[np.arange(pq.m)[None, :], pq.codes].reshape(base.shape[0], -1)
    trainable = make_trainable_adapter(spec, base.shape[1], init_rng)
    return AdapterPipeline(spec, base, pca, pq, trainable)
