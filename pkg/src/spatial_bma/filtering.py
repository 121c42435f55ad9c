"""Eigenvector spatial filtering.

Candidate eigenvectors come from the doubly centred, symmetrised weight
matrix. A greedy forward search then adds the candidate that pulls the
residual Moran z-score closest to zero until the residuals no longer show
positive spatial autocorrelation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericalError
from .moran import ResidualMoranMoments, as_dense, design_basis, normal_p_value

DEFAULT_COHERENCE = 0.25
DEFAULT_STOP_P = 0.10
_RANK_TOL = 1e-8


@dataclass(frozen=True)
class EigenCandidates:
    matrix_id: str
    eigenvalues: np.ndarray  # all n, descending
    eigenvectors: np.ndarray  # n x n, columns match eigenvalues
    coherence: np.ndarray  # eigenvalue / max eigenvalue
    retained: tuple[int, ...]

    @property
    def vectors(self) -> np.ndarray:
        return self.eigenvectors[:, list(self.retained)]


@dataclass(frozen=True)
class SelectionStep:
    index: int | None
    z: float
    p_value: float
    note: str = ""


@dataclass(frozen=True)
class EigenFilterSet:
    matrix_id: str
    selected: tuple[int, ...]
    vectors: np.ndarray = field(repr=False)  # n x len(selected)
    eigenvalues: tuple[float, ...]
    final_z: float
    final_p: float
    stop_p: float
    exhausted: bool
    trace: tuple[SelectionStep, ...]

    @property
    def size(self) -> int:
        return len(self.selected)

    def to_dict(self, include_vectors: bool = True) -> dict:
        out = {
            "matrix_id": self.matrix_id,
            "selected": list(self.selected),
            "eigenvalues": list(self.eigenvalues),
            "final_z": self.final_z,
            "final_p": self.final_p,
            "stop_p": self.stop_p,
            "exhausted": self.exhausted,
            "trace": [
                {"index": s.index, "z": s.z, "p": s.p_value, "note": s.note} for s in self.trace
            ],
        }
        if include_vectors:
            out["vectors"] = self.vectors.T.tolist()
        return out

    def to_json(self, include_vectors: bool = True) -> str:
        return json.dumps(self.to_dict(include_vectors), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "EigenFilterSet":
        if "vectors" not in d:
            raise ConfigurationError(f"filter set {d.get('matrix_id')!r} has no stored vectors")
        vecs = np.asarray(d["vectors"], dtype=float).T
        trace = tuple(SelectionStep(s["index"], s["z"], s["p"], s.get("note", "")) for s in d["trace"])
        n = vecs.shape[0] if vecs.ndim == 2 else 0
        return cls(d["matrix_id"], tuple(d["selected"]), vecs.reshape(n, len(d["selected"])),
                   tuple(d["eigenvalues"]), d["final_z"], d["final_p"], d["stop_p"],
                   d["exhausted"], trace)

    @classmethod
    def from_json(cls, text: str) -> "EigenFilterSet":
        return cls.from_dict(json.loads(text))


def center_transform(W) -> np.ndarray:
    """C ((W + W') / 2) C with C the centring projector."""
    W = as_dense(W)
    U = 0.5 * (W + W.T)
    # C U C without forming C
    U = U - U.mean(axis=0, keepdims=True)
    U = U - U.mean(axis=1, keepdims=True)
    return 0.5 * (U + U.T)


def _centred_basis(n: int) -> np.ndarray:
    """Orthonormal basis of the complement of the constant vector (Helmert)."""
    H = np.zeros((n, n - 1))
    for j in range(1, n):
        H[:j, j - 1] = 1.0
        H[j, j - 1] = -j
        H[:, j - 1] /= np.sqrt(j * (j + 1.0))
    return H


def eigen_candidates(omega, coherence_threshold: float = DEFAULT_COHERENCE,
                     matrix_id: str = "") -> EigenCandidates:
    """Full eigendecomposition of ``omega`` and the positive-side screen.

    The decomposition is carried out on the centred subspace so that every
    eigenvector except the trailing constant one sums to zero exactly up to
    rounding, even inside degenerate zero eigenspaces.
    """
    omega = np.asarray(omega, dtype=float)
    n = omega.shape[0]
    H = _centred_basis(n)
    try:
        vals, vecs = np.linalg.eigh(H.T @ omega @ H)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed for matrix {matrix_id!r}: {exc}") from exc
    order = np.argsort(-vals, kind="stable")
    vals = vals[order]
    vecs = H @ vecs[:, order]
    vals = np.append(vals, 0.0)
    vecs = np.hstack([vecs, np.full((n, 1), 1.0 / np.sqrt(n))])
    # sign: first clearly nonzero component positive
    for j in range(n):
        col = vecs[:, j]
        k = np.flatnonzero(np.abs(col) > 1e-10)
        if k.size and col[k[0]] < 0:
            vecs[:, j] = -col
    top = vals[0]
    # eigenvalues within rounding of zero do not count as positive
    tiny = _RANK_TOL * max(1.0, float(np.abs(vals).max()))
    if top > tiny:
        coherence = vals / top
        retained = tuple(int(i) for i in np.flatnonzero(coherence >= coherence_threshold) if vals[i] > tiny)
    else:
        coherence = np.full(n, -np.inf)
        retained = ()
    return EigenCandidates(matrix_id, vals, vecs, coherence, retained)


def select_filters(y, X, candidates: EigenCandidates, W, stop_p: float = DEFAULT_STOP_P,
                   max_vectors: int | None = None) -> EigenFilterSet:
    """Greedy forward selection of eigenvectors against residual Moran's I.

    ``X`` is the covariate matrix (or ``None`` for an intercept-only
    baseline). Each step adds the candidate that minimises |z| of the
    residual Moran statistic (normal approximation) and the search stops once
    the one-sided p-value exceeds ``stop_p``. If the candidates run out, no
    candidate improves |z|, or the design would leave too few residual
    degrees of freedom, the result is flagged ``exhausted``.
    """
    y = np.asarray(y, dtype=float).ravel()
    n = y.size
    Wd = as_dense(W)
    Q = design_basis(X, n)
    if max_vectors is None:
        # keep at least 3 residual degrees of freedom for the g-prior posterior
        max_vectors = n - Q.shape[1] - 3
    mom = ResidualMoranMoments(Wd, Q)
    resid = y - Q @ (Q.T @ y)
    ee = float(resid @ resid)
    if ee <= 0:
        raise NumericalError("outcome is fully explained by the design")

    def zscore(r, rr, mean, var):
        I = mom.scale * float(r @ Wd @ r) / rr
        return (I - mean) / np.sqrt(var)

    mean, var = mom.moments()
    z = zscore(resid, ee, mean, var)
    p = normal_p_value(z)
    trace = [SelectionStep(None, float(z), p, "start")]
    selected: list[int] = []
    remaining = list(candidates.retained)
    exhausted = False

    while p <= stop_p:
        if not remaining or len(selected) >= max_vectors:
            exhausted = True
            break
        best = None
        collinear = []
        for idx in remaining:
            v = candidates.eigenvectors[:, idx]
            q = v - mom.Q @ (mom.Q.T @ v)
            norm = np.linalg.norm(q)
            if norm < _RANK_TOL:
                collinear.append(idx)
                continue
            q = q / norm
            r = resid - (q @ y) * q
            rr = float(r @ r)
            if rr <= 0:
                collinear.append(idx)
                continue
            m_c, v_c = mom.extended_moments(q)
            z_c = zscore(r, rr, m_c, v_c)
            if best is None or abs(z_c) < abs(best[1]):
                best = (idx, z_c, q, r, rr)
        for idx in collinear:
            trace.append(SelectionStep(idx, float(z), p, "skipped: collinear with design"))
            remaining.remove(idx)
        if best is None or abs(best[1]) >= abs(z):
            exhausted = True
            break
        idx, z, q, resid, ee = best
        mom = mom.extend(q)
        p = normal_p_value(z)
        selected.append(idx)
        remaining.remove(idx)
        trace.append(SelectionStep(idx, float(z), p))

    if exhausted:
        trace.append(SelectionStep(None, float(z), p, "exhausted"))
    return EigenFilterSet(
        matrix_id=candidates.matrix_id,
        selected=tuple(selected),
        vectors=candidates.eigenvectors[:, selected].copy(),
        eigenvalues=tuple(float(candidates.eigenvalues[i]) for i in selected),
        final_z=float(z),
        final_p=float(p),
        stop_p=stop_p,
        exhausted=exhausted,
        trace=tuple(trace),
    )


def build_filter_set(y, X, W, matrix_id: str = "", coherence_threshold: float = DEFAULT_COHERENCE,
                     stop_p: float = DEFAULT_STOP_P) -> EigenFilterSet:
    cands = eigen_candidates(center_transform(W), coherence_threshold, matrix_id)
    return select_filters(y, X, cands, W, stop_p)
