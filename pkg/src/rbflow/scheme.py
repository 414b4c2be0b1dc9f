"""Batch schemes: coverings of the neurons, sampling laws and design levers.

A scheme is a law over subsets of ``{0, ..., p-1}``.  Sampling returns boolean
masks; the masked field reweights each active neuron by ``1 / pi_i`` so that its
expectation equals the full field.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, EnumerationError, ShapeError
from .field import NeuronField

# Largest number of batches that exact enumeration will visit.
MAX_ENUMERATION = 2**20


class SchemeKind(str, enum.Enum):
    EXPLICIT = "explicit"
    SINGLE = "single"
    DROP_ONE = "drop_one"
    PICK_ONE = "pick_one"
    BALANCED = "balanced"
    DISJOINT = "disjoint"
    ALL_SUBSETS = "all_subsets"
    BERNOULLI = "bernoulli"


CANONICAL_KINDS = (
    SchemeKind.SINGLE,
    SchemeKind.DROP_ONE,
    SchemeKind.PICK_ONE,
    SchemeKind.BALANCED,
    SchemeKind.DISJOINT,
    SchemeKind.ALL_SUBSETS,
    SchemeKind.BERNOULLI,
)


@dataclass(frozen=True)
class NeuronStats:
    mu: float
    sigma2: float


def realization_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent stream for realization ``index``: ``SeedSequence([master_seed, index])``."""
    return np.random.default_rng([int(master_seed), int(index)])


@dataclass(frozen=True, eq=False)
class BatchScheme:
    """A covering of ``[p]`` by batches together with their sampling law.

    Use the class-method constructors (``single``, ``drop_one``, ...).  Batches are
    zero-based index sets.  ``balanced`` samples uniformly among all r-subsets;
    ``disjoint`` partitions ``[p]`` into consecutive blocks of size ``r``.
    """

    kind: SchemeKind
    p: int
    r: int | None = None
    q_B: float | None = None
    batches: tuple[tuple[int, ...], ...] | None = None
    q: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", SchemeKind(self.kind))
        if self.p < 1:
            raise DomainError("p must be positive")
        k = self.kind
        if k in (SchemeKind.BALANCED, SchemeKind.DISJOINT):
            if self.r is None or not 1 <= self.r <= self.p:
                raise DomainError("batch size r must lie in [1, p]")
            if k is SchemeKind.DISJOINT and self.p % self.r:
                raise DomainError("disjoint batches need r to divide p")
        if k is SchemeKind.BERNOULLI and (self.q_B is None or not 0.0 < self.q_B <= 1.0):
            raise DomainError("q_B must lie in (0, 1]")
        if k is SchemeKind.EXPLICIT:
            self._check_explicit()

    def _check_explicit(self):
        if self.batches is None or self.q is None or len(self.batches) != len(self.q):
            raise ShapeError("explicit schemes need one probability per batch")
        q = np.asarray(self.q, dtype=float)
        if np.any(q <= 0) or np.any(q > 1) or abs(q.sum() - 1.0) > 1e-12:
            raise DomainError("q must be a probability vector with entries in (0, 1]")
        covered = set()
        for b in self.batches:
            if len(b) == 0:
                raise DomainError("explicit batches must be nonempty")
            if len(set(b)) != len(b):
                raise DomainError("duplicate index inside a batch")
            if min(b) < 0 or max(b) >= self.p:
                raise IndexError("batch index out of range")
            covered.update(b)
        if len(covered) != self.p:
            raise DomainError("batches do not cover every neuron")

    # -- constructors ------------------------------------------------------

    @classmethod
    def explicit(cls, p, batches, q=None):
        batches = tuple(tuple(int(i) for i in b) for b in batches)
        if q is None:
            q = [1.0 / len(batches)] * len(batches)
        return cls(SchemeKind.EXPLICIT, p, batches=batches, q=tuple(float(v) for v in q))

    @classmethod
    def single(cls, p):
        return cls(SchemeKind.SINGLE, p)

    @classmethod
    def drop_one(cls, p):
        if p < 2:
            raise DomainError("drop-one needs p >= 2")
        return cls(SchemeKind.DROP_ONE, p)

    @classmethod
    def pick_one(cls, p):
        return cls(SchemeKind.PICK_ONE, p)

    @classmethod
    def balanced(cls, p, r):
        return cls(SchemeKind.BALANCED, p, r=int(r))

    @classmethod
    def disjoint(cls, p, r):
        return cls(SchemeKind.DISJOINT, p, r=int(r))

    @classmethod
    def all_subsets(cls, p):
        return cls(SchemeKind.ALL_SUBSETS, p)

    @classmethod
    def bernoulli(cls, p, q_B):
        return cls(SchemeKind.BERNOULLI, p, q_B=float(q_B))

    @classmethod
    def from_dict(cls, doc: dict) -> BatchScheme:
        kind = SchemeKind(doc["kind"])
        p = int(doc["p"])
        if kind is SchemeKind.EXPLICIT:
            return cls.explicit(p, doc["batches"], doc.get("q"))
        return cls(kind, p, r=doc.get("r"), q_B=doc.get("q_B"))

    def to_dict(self) -> dict:
        doc = {"kind": self.kind.value, "p": self.p}
        if self.r is not None:
            doc["r"] = self.r
        if self.q_B is not None:
            doc["q_B"] = self.q_B
        if self.batches is not None:
            doc["batches"] = [list(b) for b in self.batches]
            doc["q"] = list(self.q)
        return doc

    # -- basic quantities --------------------------------------------------

    @property
    def n_batches(self) -> int:
        p, k = self.p, self.kind
        if k is SchemeKind.EXPLICIT:
            return len(self.batches)
        if k is SchemeKind.SINGLE:
            return 1
        if k in (SchemeKind.DROP_ONE, SchemeKind.PICK_ONE):
            return p
        if k is SchemeKind.BALANCED:
            return math.comb(p, self.r)
        if k is SchemeKind.DISJOINT:
            return p // self.r
        if k is SchemeKind.BERNOULLI and self.q_B == 1.0:
            return 1
        return 2**p

    def inclusion_probs(self) -> np.ndarray:
        """``pi_i = sum_{B_j containing i} q_j`` for every neuron."""
        p, k = self.p, self.kind
        if k is SchemeKind.EXPLICIT:
            pi = np.zeros(p)
            for b, qj in zip(self.batches, self.q):
                pi[list(b)] += qj
            return pi
        value = {
            SchemeKind.SINGLE: 1.0,
            SchemeKind.DROP_ONE: 1.0 - 1.0 / p if p > 1 else 1.0,
            SchemeKind.PICK_ONE: 1.0 / p,
            SchemeKind.ALL_SUBSETS: 0.5,
            SchemeKind.BERNOULLI: self.q_B,
        }.get(k)
        if value is None:
            value = self.r / p
        return np.full(p, value)

    def inclusion_prob(self, i: int) -> float:
        if not 0 <= i < self.p:
            raise IndexError(f"neuron index {i} out of range for p={self.p}")
        return float(self.inclusion_probs()[i])

    @property
    def pi_min(self) -> float:
        return float(self.inclusion_probs().min())

    @property
    def mean_batch_size(self) -> float:
        return float(self.inclusion_probs().sum())

    def sum_inv_q(self) -> float:
        """``sum_j 1 / q_j`` (closed forms for canonical kinds, never enumerated)."""
        p, k = self.p, self.kind
        if k is SchemeKind.EXPLICIT:
            return float(sum(1.0 / v for v in self.q))
        if k is SchemeKind.SINGLE:
            return 1.0
        if k in (SchemeKind.DROP_ONE, SchemeKind.PICK_ONE):
            return float(p * p)
        if k is SchemeKind.BALANCED:
            return float(math.comb(p, self.r)) ** 2
        if k is SchemeKind.DISJOINT:
            return (p / self.r) ** 2
        if k is SchemeKind.ALL_SUBSETS:
            return 2.0 ** (2 * p)
        qb = self.q_B
        if qb == 1.0:
            return 1.0
        return (qb * (1.0 - qb)) ** (-p)

    # -- enumeration -------------------------------------------------------

    def enumerate(self) -> tuple[np.ndarray, np.ndarray]:
        """All batches with positive probability as ``(masks (n_b, p) bool, q (n_b,))``."""
        n_b = self.n_batches
        if n_b > MAX_ENUMERATION:
            raise EnumerationError(f"{self.kind.value} with p={self.p} has {n_b} batches; use closed forms or sampling")
        p, k = self.p, self.kind
        if k is SchemeKind.EXPLICIT:
            masks = np.zeros((n_b, p), dtype=bool)
            for j, b in enumerate(self.batches):
                masks[j, list(b)] = True
            return masks, np.asarray(self.q, dtype=float)
        if k is SchemeKind.SINGLE or (k is SchemeKind.BERNOULLI and self.q_B == 1.0):
            return np.ones((1, p), dtype=bool), np.ones(1)
        if k is SchemeKind.DROP_ONE:
            return ~np.eye(p, dtype=bool), np.full(p, 1.0 / p)
        if k is SchemeKind.PICK_ONE:
            return np.eye(p, dtype=bool), np.full(p, 1.0 / p)
        if k is SchemeKind.BALANCED:
            masks = np.zeros((n_b, p), dtype=bool)
            for j, c in enumerate(itertools.combinations(range(p), self.r)):
                masks[j, list(c)] = True
            return masks, np.full(n_b, 1.0 / n_b)
        if k is SchemeKind.DISJOINT:
            masks = np.repeat(np.eye(n_b, dtype=bool), self.r, axis=1)
            return masks, np.full(n_b, 1.0 / n_b)
        # all subsets in binary order: bit i of j says whether neuron i is active
        j = np.arange(n_b)[:, None]
        masks = ((j >> np.arange(p)) & 1).astype(bool)
        if k is SchemeKind.ALL_SUBSETS:
            return masks, np.full(n_b, 1.0 / n_b)
        size = masks.sum(axis=1)
        q = self.q_B**size * (1.0 - self.q_B) ** (p - size)
        return masks, q

    # -- sampling ----------------------------------------------------------

    def sample_masks(self, rng: np.random.Generator, size: int | tuple = ()) -> np.ndarray:
        """Draw i.i.d. active sets as boolean masks of shape ``size + (p,)``."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape, dtype=int))
        p, k = self.p, self.kind
        if k is SchemeKind.SINGLE:
            masks = np.ones((n, p), dtype=bool)
        elif k is SchemeKind.EXPLICIT:
            table, q = self.enumerate()
            masks = table[rng.choice(len(q), size=n, p=q)]
        elif k is SchemeKind.DROP_ONE:
            masks = np.ones((n, p), dtype=bool)
            masks[np.arange(n), rng.integers(p, size=n)] = False
        elif k is SchemeKind.PICK_ONE:
            masks = np.zeros((n, p), dtype=bool)
            masks[np.arange(n), rng.integers(p, size=n)] = True
        elif k is SchemeKind.BALANCED:
            # ranks of i.i.d. uniforms give a uniformly random permutation
            order = np.argsort(rng.random((n, p)), axis=1)
            masks = np.zeros((n, p), dtype=bool)
            np.put_along_axis(masks, order[:, : self.r], True, axis=1)
        elif k is SchemeKind.DISJOINT:
            block = rng.integers(p // self.r, size=n)
            masks = (np.arange(p) // self.r)[None, :] == block[:, None]
        elif k is SchemeKind.ALL_SUBSETS:
            masks = rng.random((n, p)) < 0.5
        else:
            masks = rng.random((n, p)) < self.q_B
        return masks.reshape(shape + (p,))

    def sample_batch(self, rng: np.random.Generator) -> np.ndarray:
        """One active set as sorted neuron indices."""
        return np.flatnonzero(self.sample_masks(rng))

    def mask_weights(self, masks) -> np.ndarray:
        """Horvitz-Thompson weights ``mask_i / pi_i``."""
        return np.asarray(masks, dtype=float) / self.inclusion_probs()

    # -- masked field and design levers -----------------------------------

    def masked_eval(self, field: NeuronField, active, x, theta) -> np.ndarray:
        """``sum_{i in active} f_i(x) / pi_i``."""
        active = np.asarray(active, dtype=int).ravel()
        if active.size and (active.min() < 0 or active.max() >= self.p):
            raise IndexError("active set not contained in [p]")
        mask = np.zeros(self.p, dtype=bool)
        mask[active] = True
        return field.eval(x, theta, self.mask_weights(mask))

    def _batch_fields(self, vals: np.ndarray, masks: np.ndarray) -> np.ndarray:
        # vals: (p, ...) per-neuron quantities -> (n_b, ...) reweighted batch sums
        w = masks / self.inclusion_probs()
        return np.tensordot(w, vals, axes=(1, 0))

    def _enumerated_variance(self, vals: np.ndarray) -> float:
        masks, q = self.enumerate()
        full = vals.sum(axis=0)
        total = 0.0
        step = max(1, 2**22 // max(1, self.p * full.size))
        for s in range(0, len(q), step):
            dev = self._batch_fields(vals, masks[s : s + step]) - full
            total += float(q[s : s + step] @ (dev.reshape(dev.shape[0], -1) ** 2).sum(axis=1))
        return total

    def lambda_at(self, field: NeuronField, x, theta, method: str = "auto") -> float:
        """Masking variance ``sum_j q_j |F - F^(j)|^2`` at one state.

        ``method`` is ``"enumerate"``, ``"closed"`` (canonical kinds only) or
        ``"auto"`` (closed form when available, else enumeration).
        """
        if method == "auto":
            method = "enumerate" if self.kind is SchemeKind.EXPLICIT else "closed"
        if method == "enumerate":
            vals = field.neuron_values(x, theta)
            return self._enumerated_variance(vals)
        if method != "closed":
            raise ValueError(f"unknown method {method!r}")
        stats = self.neuron_stats(field, x, theta)
        return self.lambda_closed_form(stats)

    def lambda_closed_form(self, stats: NeuronStats) -> float:
        p, k, s2, mu = self.p, self.kind, stats.sigma2, stats.mu
        if k is SchemeKind.EXPLICIT:
            raise DomainError("explicit schemes have no closed form; enumerate")
        if k is SchemeKind.SINGLE:
            return 0.0
        if k is SchemeKind.DROP_ONE:
            return p * p / (p - 1) ** 2 * s2
        if k is SchemeKind.PICK_ONE:
            return p * p * s2
        if k in (SchemeKind.BALANCED, SchemeKind.DISJOINT):
            # for DISJOINT this is the average over uniformly random partitions
            if p == 1:
                return 0.0
            return p * p * (p - self.r) / ((p - 1) * self.r) * s2
        if k is SchemeKind.ALL_SUBSETS:
            return p * (s2 + mu * mu)
        return (1.0 - self.q_B) / self.q_B * p * (s2 + mu * mu)

    @staticmethod
    def neuron_stats(field: NeuronField, x, theta) -> NeuronStats:
        """Neuron-wise mean norm and variance, two-pass."""
        f = field.neuron_values(x, theta)
        mean = f.mean(axis=0)
        sigma2 = float(((f - mean) ** 2).sum(axis=-1).mean())
        return NeuronStats(mu=float(np.linalg.norm(mean)), sigma2=sigma2)

    def gamma_at(self, field: NeuronField, x, theta) -> float:
        """``sum_j q_j |dF/dx - dF^(j)/dx|_F^2`` (Frobenius norm)."""
        field._require_smooth()
        W, A, b = field.unpack(theta)
        x = np.asarray(x, dtype=float)
        s = field.activation.derivative((A @ x) + b)
        jac = s[:, None, None] * W[:, :, None] * A[:, None, :]
        return self._enumerated_variance(jac)

    def lambda_l1_estimate(self, field: NeuronField, control, x0, solver) -> float:
        """Trapezoid quadrature of ``t -> lambda_at(x_t, theta_t)`` along the full trajectory."""
        from .ode import integrate_full

        traj = integrate_full(field, control, x0, solver)
        vals = np.array([self.lambda_at(field, xt, control(t)) for t, xt in zip(traj.times, traj.states)])
        return float(np.trapezoid(vals, traj.times))

    def lambda_sup_estimate(self, field: NeuronField, control, x0, solver) -> float:
        from .ode import integrate_full

        traj = integrate_full(field, control, x0, solver)
        return max(self.lambda_at(field, xt, control(t)) for t, xt in zip(traj.times, traj.states))


def s_factor(lam_F_x, lam_F_0, T, lambda_l1, sum_inv_q, pi_min, x0_norm) -> float:
    """Convergence factor S in ``E sup |x - x_hat|^2 <= S h``."""
    if not pi_min > 0 or pi_min > 1:
        raise DomainError("pi_min must lie in (0, 1]")
    if not T > 0 or lambda_l1 < 0:
        raise DomainError("need T > 0 and a nonnegative Lambda norm")
    root = math.sqrt(T * lambda_l1)
    if lam_F_x == 0:
        return 2.0 * lam_F_0 / pi_min * root
    pref = 2.0 * lam_F_x / pi_min * math.exp(2.0 * lam_F_x * T / pi_min)
    return pref * (T * lambda_l1 * math.sqrt(sum_inv_q) + root * (x0_norm + lam_F_0 / lam_F_x))
