"""Exact entropy and mutual information over finite joint tables (nats).

Also checks the conditional graph-text MI decomposition, the
deterministic-encoder upper bound and the data-processing inequality on
enumerable joints, and provides a binned plug-in estimator for continuous
samples.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.decomposition import PCA
from sklearn.metrics import mutual_info_score

from rglm.errors import EstimationError, ParameterError, PreconditionError

logger = logging.getLogger(__name__)

NORM_TOL = 1e-12
PIPELINE_VARS = ("G", "s_G", "s_T", "x")


@dataclass(frozen=True, eq=False)
class JointDistribution:
    """Dense probability table; axis ``i`` is variable ``names[i]``."""

    names: tuple[str, ...]
    pmf: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "pmf", np.asarray(self.pmf, dtype=np.float64))
        self.validate()

    def validate(self) -> None:
        if self.pmf.ndim != len(self.names) or len(set(self.names)) != len(self.names):
            raise ParameterError(f"JointDistribution: {len(self.names)} names for a {self.pmf.ndim}-D table")
        if np.any(self.pmf < 0) or not np.all(np.isfinite(self.pmf)):
            raise ParameterError("JointDistribution: probabilities must be finite and nonnegative")
        if abs(self.pmf.sum() - 1.0) > NORM_TOL:
            raise ParameterError(f"JointDistribution: table sums to {self.pmf.sum():.15f}, not 1")

    @property
    def alphabets(self) -> dict[str, int]:
        return dict(zip(self.names, self.pmf.shape))

    def axes(self, variables: str | Sequence[str]) -> tuple[int, ...]:
        variables = (variables,) if isinstance(variables, str) else tuple(variables)
        missing = [v for v in variables if v not in self.names]
        if missing:
            raise ParameterError(f"JointDistribution: unknown variable(s) {missing}")
        return tuple(self.names.index(v) for v in dict.fromkeys(variables))

    def marginal(self, variables: str | Sequence[str]) -> np.ndarray:
        keep = self.axes(variables)
        drop = tuple(i for i in range(self.pmf.ndim) if i not in keep)
        return self.pmf.sum(axis=drop)


def _entropy_of(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def entropy(J: JointDistribution, variables: str | Sequence[str]) -> float:
    if isinstance(variables, (list, tuple)) and not variables:
        return 0.0
    return _entropy_of(J.marginal(variables))


def _union(*groups) -> list[str]:
    out: list[str] = []
    for g in groups:
        out.extend([g] if isinstance(g, str) else list(g))
    return list(dict.fromkeys(out))


def conditional_entropy(J: JointDistribution, X, Y) -> float:
    return entropy(J, _union(X, Y)) - entropy(J, Y)


def mutual_information(J: JointDistribution, X, Y) -> float:
    return entropy(J, X) + entropy(J, Y) - entropy(J, _union(X, Y))


def conditional_mi(J: JointDistribution, X, Y, Z) -> float:
    """``I(X; Y | Z) = H(X,Z) + H(Y,Z) - H(X,Y,Z) - H(Z)``."""
    return entropy(J, _union(X, Z)) + entropy(J, _union(Y, Z)) - entropy(J, _union(X, Y, Z)) - entropy(J, Z)


# ----------------------------------------------------------------------
# Identity and bound checks
# ----------------------------------------------------------------------
@dataclass
class DecompositionTerms:
    conditional: float
    graph: float
    text_given_graph: float
    text: float

    @property
    def rhs(self) -> float:
        return self.graph + self.text_given_graph - self.text

    @property
    def residual(self) -> float:
        return abs(self.conditional - self.rhs)


def decomposition_terms(J: JointDistribution, x: str = "x", s_g: str = "s_G", s_t: str = "s_T") -> DecompositionTerms:
    return DecompositionTerms(
        conditional=conditional_mi(J, x, s_g, s_t),
        graph=mutual_information(J, x, s_g),
        text_given_graph=conditional_mi(J, x, s_t, s_g),
        text=mutual_information(J, x, s_t),
    )


def verify_decomposition(J: JointDistribution, x: str = "x", s_g: str = "s_G", s_t: str = "s_T") -> float:
    """``|I(x;s_G|s_T) - (I(x;s_G) + I(x;s_T|s_G) - I(x;s_T))|``."""
    return decomposition_terms(J, x, s_g, s_t).residual


@dataclass(frozen=True, eq=False)
class PipelineJoint:
    """Joint over ``(G, s_G, s_T, x)`` with ``s_G = f(G)`` almost surely."""

    joint: JointDistribution
    f: np.ndarray

    def validate(self) -> None:
        if self.joint.names[:2] != PIPELINE_VARS[:2] or set(self.joint.names) != set(PIPELINE_VARS):
            raise PreconditionError(f"PipelineJoint: variables must be {PIPELINE_VARS}")
        p_gs = self.joint.marginal(["G", "s_G"])
        allowed = np.zeros_like(p_gs, dtype=bool)
        allowed[np.arange(len(self.f)), self.f] = True
        leak = p_gs[~allowed].sum()
        if leak > 0:
            raise PreconditionError(f"PipelineJoint: P(s_G != f(G)) = {leak:.3e}")


def pipeline_joint(p_g: np.ndarray, f: Sequence[int], p_t_given_g: np.ndarray,
                   p_x_given_gt: np.ndarray, n_s: int | None = None) -> PipelineJoint:
    """Compose ``p(G) 1[s_G = f(G)] p(s_T | G) p(x | G, s_T)``."""
    f = np.asarray(f, dtype=np.int64)
    p_g = np.asarray(p_g, dtype=np.float64)
    n_s = int(f.max()) + 1 if n_s is None else n_s
    det = np.zeros((len(p_g), n_s))
    det[np.arange(len(p_g)), f] = 1.0
    table = np.einsum("g,gs,gt,gtx->gstx", p_g, det, np.asarray(p_t_given_g), np.asarray(p_x_given_gt))
    return PipelineJoint(JointDistribution(PIPELINE_VARS, table), f)


def verify_upper_bound(P: PipelineJoint) -> float:
    """``I(G; s_G) - I(x; s_G | s_T)``; nonnegative for deterministic encoders."""
    P.validate()
    J = P.joint
    return mutual_information(J, "G", "s_G") - conditional_mi(J, "x", "s_G", "s_T")


def markov_chain(p_x: np.ndarray, p_y_given_x: np.ndarray, p_z_given_y: np.ndarray) -> JointDistribution:
    table = np.einsum("x,xy,yz->xyz", p_x, p_y_given_x, p_z_given_y)
    return JointDistribution(("X", "Y", "Z"), table)


def verify_dpi(J: JointDistribution, X: str = "X", Y: str = "Y", Z: str = "Z") -> float:
    """``I(X;Y) - I(X;Z)`` for a chain ``X -> Y -> Z``."""
    return mutual_information(J, X, Y) - mutual_information(J, X, Z)


# ----------------------------------------------------------------------
# Random instances
# ----------------------------------------------------------------------
def _normalize(table: np.ndarray) -> np.ndarray:
    # renormalize after Dirichlet draws so the sum is 1 to machine precision
    return table / table.sum()


def random_joint(rng: np.random.Generator, sizes: Sequence[int],
                 names: Sequence[str] = ("x", "s_G", "s_T")) -> JointDistribution:
    """Dirichlet(1) draw over the full product table."""
    flat = rng.dirichlet(np.ones(int(np.prod(sizes))))
    return JointDistribution(tuple(names), _normalize(flat.reshape(tuple(sizes))))


def random_conditional(rng: np.random.Generator, rows: int | tuple[int, ...], cols: int) -> np.ndarray:
    shape = (rows,) if isinstance(rows, int) else tuple(rows)
    return rng.dirichlet(np.ones(cols), size=shape)


def random_pipeline(rng: np.random.Generator, max_g: int = 8, max_alphabet: int = 4) -> PipelineJoint:
    n_g = int(rng.integers(2, max_g + 1))
    n_s = int(rng.integers(1, min(n_g, max_alphabet) + 1))
    n_t = int(rng.integers(2, max_alphabet + 1))
    n_x = int(rng.integers(2, max_alphabet + 1))
    f = rng.integers(0, n_s, size=n_g)
    p_g = rng.dirichlet(np.ones(n_g))
    return pipeline_joint(p_g, f, random_conditional(rng, n_g, n_t), random_conditional(rng, (n_g, n_t), n_x), n_s)


def random_chain(rng: np.random.Generator, max_alphabet: int = 6) -> JointDistribution:
    nx_, ny, nz = (int(v) for v in rng.integers(2, max_alphabet + 1, size=3))
    return markov_chain(rng.dirichlet(np.ones(nx_)), random_conditional(rng, nx_, ny), random_conditional(rng, ny, nz))


@dataclass
class OracleReport:
    instances: int = 0
    max_residual: float = 0.0
    min_slack: float = float("inf")
    failures: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "instances": self.instances,
            "max_residual": self.max_residual,
            "min_slack": self.min_slack,
            "failures": self.failures,
        }


def run_oracle_suite(rng: np.random.Generator, decompositions: int = 1000, pipelines: int = 200,
                     chains: int = 200, tol: float = 1e-12) -> OracleReport:
    """Randomized identity/bound checks over enumerable joints."""
    report = OracleReport()
    for i in range(decompositions):
        sizes = rng.integers(2, 5, size=3)
        residual = verify_decomposition(random_joint(rng, sizes))
        report.max_residual = max(report.max_residual, residual)
        if residual >= tol:
            report.failures.append({"check": "decomposition", "instance": i, "value": residual})
    for kind, count, make, check in (
        ("upper_bound", pipelines, random_pipeline, verify_upper_bound),
        ("dpi", chains, random_chain, verify_dpi),
    ):
        for i in range(count):
            slack = check(make(rng))
            report.min_slack = min(report.min_slack, slack)
            if slack < -tol:
                report.failures.append({"check": kind, "instance": i, "value": slack})
    report.instances = decompositions + pipelines + chains
    logger.info("Oracle: %d instances, max_residual=%.2e min_slack=%.2e failures=%d",
                report.instances, report.max_residual, report.min_slack, len(report.failures))
    return report


# ----------------------------------------------------------------------
# Continuous diagnostic
# ----------------------------------------------------------------------
def _principal_projection(samples: np.ndarray, side: str) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    if not np.any(samples.std(axis=0) > 0):
        raise EstimationError(f"binned_mi_estimate: side {side} has zero variance")
    if samples.shape[1] == 1:
        return samples[:, 0] - samples[:, 0].mean()
    return PCA(n_components=1).fit_transform(samples)[:, 0]


def _bin_labels(values: np.ndarray, bins: int) -> np.ndarray:
    """Equal-width bin index per value, with the same edges as ``np.histogram``."""
    edges = np.histogram_bin_edges(values, bins=bins)
    return np.digitize(values, edges[1:-1])


def binned_mi_estimate(a: np.ndarray, b: np.ndarray, bins: int = 8, min_samples: int = 1000) -> float:
    """Plug-in MI of the equal-width binned joint of the top principal projections.

    Biased upward at small sample sizes; meant for relative comparisons.
    """
    if bins < 2:
        raise ParameterError(f"binned_mi_estimate: bins must be >= 2, got {bins}")
    if len(a) != len(b):
        raise ParameterError(f"binned_mi_estimate: {len(a)} vs {len(b)} samples")
    if len(a) < min_samples:
        raise EstimationError(f"binned_mi_estimate: need >= {min_samples} paired samples, got {len(a)}")
    pa, pb = _principal_projection(a, "A"), _principal_projection(b, "B")
    return max(0.0, float(mutual_info_score(_bin_labels(pa, bins), _bin_labels(pb, bins))))


def binned_entropy(a: np.ndarray, bins: int = 8) -> float:
    counts, _ = np.histogram(_principal_projection(a, "A"), bins=bins)
    return _entropy_of(counts / counts.sum())
