"""Function dictionaries: Gaussian RBFs on a tensor grid and monomials."""
from __future__ import annotations

import hashlib
import itertools
import json
import warnings

import numpy as np

COND_LIMIT = 1e10


class BasisError(ValueError):
    pass


def _as_points(x, dim):
    x = np.asarray(x, float)
    if x.ndim == 1:
        x = x.reshape(1, dim) if x.size == dim else x.reshape(-1, dim)
    return x


class GaussianRBF:
    """psi_k(x) = exp(-|x - c_k|^2 / (2 width^2)), unnormalized so psi_k(c_k) = 1."""

    kind = "gaussian_rbf"

    def __init__(self, centers, width: float, domain=None, check_width=True):
        self.centers = np.atleast_2d(np.asarray(centers, float))
        if self.centers.shape[0] == 1 and np.asarray(centers).ndim == 1:
            self.centers = self.centers.T
        self.width = float(width)
        if self.width <= 0:
            raise BasisError("RBF width must be positive")
        self.domain = None if domain is None else np.asarray(domain, float)
        if len(np.unique(self.centers, axis=0)) != len(self.centers):
            raise BasisError("RBF centers must be pairwise distinct")
        if check_width and len(self.centers) > 1:
            d = self.spacing()
            if not (d <= 3 * self.width * (1 + 1e-9) and 3 * self.width <= 1.5 * d * (1 + 1e-9)):
                raise BasisError(
                    f"width {self.width:g} violates d <= 3*width <= 1.5*d for spacing d={d:g}; "
                    "pass check_width=False to override")

    @classmethod
    def grid(cls, domain, counts, width=None, width_factor=0.5):
        """Uniform tensor grid of centers over a box.

        ``width`` defaults to ``width_factor * d`` with d the smallest grid
        spacing; 0.5 is the largest width the spacing rule allows.
        """
        domain = np.asarray(domain, float)
        counts = np.broadcast_to(np.asarray(counts, int), (domain.shape[0],))
        axes = [np.linspace(lo, hi, n) for (lo, hi), n in zip(domain, counts)]
        centers = np.array(list(itertools.product(*axes)))
        spacing = min((hi - lo) / (n - 1) for (lo, hi), n in zip(domain, counts) if n > 1)
        if width is None:
            width = width_factor * spacing
        return cls(centers, width, domain=domain)

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def K(self) -> int:
        return self.centers.shape[0]

    def spacing(self) -> float:
        diff = self.centers[:, None, :] - self.centers[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        return float(dist.min())

    def __call__(self, x) -> np.ndarray:
        """Evaluate at points: (..., dim) -> (N, K)."""
        x = _as_points(x, self.dim)
        # |x - c|^2 = |x|^2 - 2 x.c + |c|^2, clipped against round-off
        sq = ((x ** 2).sum(1)[:, None] - 2.0 * x @ self.centers.T
              + (self.centers ** 2).sum(1)[None, :])
        return np.exp(-np.maximum(sq, 0.0) / (2.0 * self.width ** 2))

    def eval(self, x):
        return self(x)

    def gradient(self, x) -> np.ndarray:
        """(N, K, dim) analytic gradients."""
        x = _as_points(x, self.dim)
        diff = self.centers[None, :, :] - x[:, None, :]
        return self(x)[:, :, None] * diff / self.width ** 2

    def sup_norms(self) -> np.ndarray:
        return np.ones(self.K)

    def gram_lambda(self) -> np.ndarray:
        """Closed-form integral of Psi Psi' over R^n."""
        diff = self.centers[:, None, :] - self.centers[None, :, :]
        sq = (diff ** 2).sum(-1)
        lam = (self.width * np.sqrt(np.pi)) ** self.dim * np.exp(-sq / (4 * self.width ** 2))
        cond = np.linalg.cond(lam)
        if cond > COND_LIMIT:
            raise BasisError(f"cond(Lambda) = {cond:.3g} > {COND_LIMIT:g}: reduce K or widen the RBFs")
        return lam

    def spec(self) -> dict:
        return {"kind": self.kind, "centers": self.centers.tolist(), "width": self.width,
                "domain": None if self.domain is None else self.domain.tolist()}

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.spec(), sort_keys=True).encode()).hexdigest()[:16]


class MonomialBasis:
    """phi_k(x) = prod_j x_j^{alpha_kj} for a list of exponent multi-indices."""

    kind = "monomial"

    def __init__(self, exponents, domain=None):
        self.exponents = np.atleast_2d(np.asarray(exponents, int))
        if len({tuple(e) for e in self.exponents}) != len(self.exponents):
            raise BasisError("monomial multi-indices must be distinct")
        if (self.exponents < 0).any():
            raise BasisError("negative exponents are not monomials")
        self.domain = None if domain is None else np.asarray(domain, float)

    @classmethod
    def total_degree(cls, dim: int, max_degree: int, min_degree: int = 0, domain=None):
        """All monomials with min_degree <= |alpha| <= max_degree, graded order."""
        exps = []
        for deg in range(min_degree, max_degree + 1):
            for alpha in itertools.product(range(deg, -1, -1), repeat=dim):
                if sum(alpha) == deg:
                    exps.append(alpha)
        return cls(exps, domain=domain)

    @property
    def dim(self) -> int:
        return self.exponents.shape[1]

    @property
    def K(self) -> int:
        return self.exponents.shape[0]

    def labels(self, names=None) -> list[str]:
        names = names or [f"x{j + 1}" for j in range(self.dim)]
        out = []
        for alpha in self.exponents:
            parts = [n if a == 1 else f"{n}^{a}" for n, a in zip(names, alpha) if a]
            out.append("*".join(parts) or "1")
        return out

    def index_of(self, alpha) -> int:
        hits = np.where((self.exponents == np.asarray(alpha)).all(1))[0]
        if not len(hits):
            raise KeyError(alpha)
        return int(hits[0])

    def __call__(self, x) -> np.ndarray:
        x = _as_points(x, self.dim)
        return np.prod(x[:, None, :] ** self.exponents[None, :, :], axis=-1)

    def eval(self, x):
        return self(x)

    def gradient(self, x) -> np.ndarray:
        x = _as_points(x, self.dim)
        out = np.zeros((x.shape[0], self.K, self.dim))
        for j in range(self.dim):
            e = self.exponents.copy()
            coef = e[:, j].astype(float)
            e[:, j] = np.maximum(e[:, j] - 1, 0)
            out[:, :, j] = coef * np.prod(x[:, None, :] ** e[None], axis=-1)
        return out

    def sup_norms(self) -> np.ndarray:
        if self.domain is None:
            raise BasisError("monomial sup-norms need a bounded domain")
        corner = np.abs(self.domain).max(axis=1)
        return np.prod(corner[None, :] ** self.exponents, axis=1)

    def gram_lambda(self):
        raise BasisError("no closed-form Gram matrix for monomials; use gram_empirical")

    def spec(self) -> dict:
        return {"kind": self.kind, "exponents": self.exponents.tolist(),
                "domain": None if self.domain is None else self.domain.tolist()}

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.spec(), sort_keys=True).encode()).hexdigest()[:16]


def box_volume(domain) -> float:
    domain = np.asarray(domain, float)
    return float(np.prod(domain[:, 1] - domain[:, 0]))


def gram_empirical(basis, samples, domain=None) -> np.ndarray:
    """Volume-scaled Monte Carlo estimate of the integral of Psi Psi' over a box."""
    samples = np.asarray(samples, float)
    if samples.size == 0:
        raise BasisError("gram_empirical needs at least one sample")
    samples = _as_points(samples, basis.dim)
    if samples.shape[0] < basis.K:
        warnings.warn("fewer samples than basis functions; Gram estimate is rank deficient")
    domain = basis.domain if domain is None else domain
    vol = 1.0 if domain is None else box_volume(domain)
    P = basis(samples)
    return vol * (P.T @ P) / samples.shape[0]


def cost_projection_d(basis, q, samples, weights=None, domain=None) -> np.ndarray:
    """Estimate of the integral of q(x) Psi(x) dx.

    With ``weights`` the samples are treated as quadrature nodes; otherwise
    as uniform Monte Carlo samples over the basis domain.
    """
    samples = np.asarray(samples, float)
    if samples.size == 0:
        raise BasisError("cost_projection_d needs at least one sample")
    samples = _as_points(samples, basis.dim)
    qv = np.asarray(q(samples), float).reshape(-1)
    P = basis(samples)
    if weights is None:
        domain = basis.domain if domain is None else domain
        vol = 1.0 if domain is None else box_volume(domain)
        weights = np.full(samples.shape[0], vol / samples.shape[0])
    return P.T @ (np.asarray(weights) * qv)


def basis_from_spec(spec: dict, domain=None):
    """Build a basis from its config/JSON form.

    Gaussian RBF: {"kind": "gaussian_rbf", "counts": [..], "width": w | null,
    "width_factor": f} or explicit {"centers": .., "width": ..}.
    Monomial: {"kind": "monomial", "max_degree": p, "min_degree": q} or
    explicit {"exponents": ..}.
    """
    kind = spec["kind"]
    dom = spec.get("domain", domain)
    if kind == "gaussian_rbf":
        if "centers" in spec:
            return GaussianRBF(spec["centers"], spec["width"], domain=dom,
                               check_width=spec.get("check_width", True))
        return GaussianRBF.grid(dom, spec["counts"], width=spec.get("width"),
                                width_factor=spec.get("width_factor", 0.5))
    if kind == "monomial":
        if "exponents" in spec:
            return MonomialBasis(spec["exponents"], domain=dom)
        dim = np.asarray(dom).shape[0]
        return MonomialBasis.total_degree(dim, spec["max_degree"], spec.get("min_degree", 0), domain=dom)
    raise BasisError(f"unknown basis kind {kind!r}")
