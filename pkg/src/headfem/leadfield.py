"""EEG and linearized EIT lead fields from the assembled CEM system.

Both modalities share the transfer matrix T = A^-1 B and the dense
electrode-level response M = C - B' T.  The EEG lead field is

    L = -R M^-1 (T' G)

(equivalent to R (B' A^-1 B - C)^-1 B' A^-1 G), and the nonlinear EIT
forward map is y = R M^-1 I.  Differentiating the forward map around the
background conductivity gives one lead-field column per conductivity DOF,

    dy/ds_m = -R M^-1 T' K_m u,   u = A^-1 B M^-1 I,

where K_m is the unit-conductivity volume stiffness restricted to the
DOF's elements with the grounded row and column zeroed (those entries are
pinned and do not vary with sigma).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import CurrentPatternError, DofError, SingularSystemError
from .fem import stiffness_blocks
from .solver import PcgConfig, pcg_solve, transfer_matrix


@dataclass(frozen=True)
class LeadField:
    """Dense measurement-per-DOF matrix with its DOF geometry.

    EEG: volts per unit dipole moment (A m), one column per source
    component.  EIT: volts per unit conductivity change (S/m), rows are
    the electrode voltages stacked over current patterns, and the
    background data/conductivity snapshot ride along.
    """

    matrix: np.ndarray
    positions: np.ndarray
    orientations: np.ndarray | None
    modality: str
    n_patterns: int = 1
    background_sigma: np.ndarray | None = None
    background_data: np.ndarray | None = None

    @property
    def n_electrodes(self):
        return self.matrix.shape[0] // self.n_patterns

    @property
    def n_dofs(self):
        return self.matrix.shape[1]


@dataclass(frozen=True)
class EitDofMap:
    """Conductivity degrees of freedom: disjoint element sets with centers.

    The element sets partition the perturbable region; a DOF value is a
    uniform conductivity offset on its support.
    """

    element_sets: tuple
    centers: np.ndarray

    def __post_init__(self):
        for k, es in enumerate(self.element_sets):
            if len(es) == 0:
                raise DofError(f"DOF {k} has an empty element set")

    @property
    def n_dofs(self):
        return len(self.element_sets)


def build_dof_map(mesh, compartments, n_dofs, seed=0):
    """Partition the perturbable elements into ``n_dofs`` nearest-center sets.

    Centers are drawn volume-weighted without replacement from the element
    centroids of the given compartments, so every center claims at least
    its own element and no DOF comes out empty.
    """
    cand = np.flatnonzero(np.isin(mesh.labels, np.asarray(compartments)))
    if cand.size == 0:
        raise DofError("no mesh elements in the perturbable compartments")
    n_dofs = int(n_dofs)
    if not (1 <= n_dofs <= cand.size):
        raise DofError(f"need 1 <= n_dofs <= {cand.size}, got {n_dofs}")
    rng = np.random.default_rng(seed)
    vols = mesh.volumes[cand]
    chosen = rng.choice(cand, size=n_dofs, replace=False, p=vols / vols.sum())
    centroids = mesh.centroids()
    centers = centroids[chosen]
    d = np.linalg.norm(centroids[cand][:, None, :] - centers[None, :, :], axis=2)
    owner = np.argmin(d, axis=1)
    sets = tuple(cand[owner == k] for k in range(n_dofs))
    return EitDofMap(element_sets=sets, centers=centers)


def electrode_response(sys, cfg=PcgConfig(), threads=1):
    """Transfer matrix T = A^-1 B and the symmetric response M = C - B' T."""
    T = transfer_matrix(sys.A, sys.B, cfg, threads=threads)
    M = sys.C.toarray() - sys.B.T @ T
    M = 0.5 * (M + M.T)  # exact symmetry; B' A^-1 B is symmetric up to solver tolerance
    return T, M


def _solve_response(M, rhs):
    try:
        lu, piv = sla.lu_factor(M)
    except (ValueError, sla.LinAlgError) as exc:
        raise SingularSystemError(f"electrode response factorization failed: {exc}")
    if np.any(np.abs(np.diag(lu)) < 1e-300):
        raise SingularSystemError("electrode response matrix is singular")
    return sla.lu_solve((lu, piv), rhs)


def eeg_leadfield(sys, cfg=PcgConfig(), threads=1):
    """EEG lead field L = -R M^-1 (T' G); columns are zero-mean by
    construction of R."""
    if sys.G is None or sys.G.shape[1] == 0:
        raise SingularSystemError("system has no source matrix G")
    T, M = electrode_response(sys, cfg, threads=threads)
    TtG = np.asarray((sys.G.T @ T).T if sp.issparse(sys.G) else sys.G.T @ T)
    L = -(sys.R @ _solve_response(M, TtG))
    src = sys.source_space
    return LeadField(matrix=L,
                     positions=src.positions if src is not None else None,
                     orientations=src.orientations if src is not None else None,
                     modality="eeg")


def check_current_patterns(currents, n_electrodes):
    """Validate zero-sum injection patterns, shape (L,) or (L, P)."""
    I = np.asarray(currents, dtype=float)
    if I.ndim == 1:
        I = I[:, None]
    if I.shape[0] != n_electrodes:
        raise CurrentPatternError(
            f"pattern length {I.shape[0]} != electrode count {n_electrodes}")
    norms = np.linalg.norm(I, axis=0)
    if np.any(norms == 0):
        return I
    bad = np.abs(I.sum(axis=0)) > 1e-12 * np.maximum(norms, 1e-300)
    if np.any(bad):
        raise CurrentPatternError(
            f"current pattern(s) {np.flatnonzero(bad).tolist()} do not sum to zero")
    return I


def adjacent_pair_patterns(n_electrodes, amplitude=1.0):
    """Default injection protocol: pattern k puts +amplitude on electrode k
    and -amplitude on electrode k+1 (L-1 patterns)."""
    I = np.zeros((n_electrodes, n_electrodes - 1))
    for k in range(n_electrodes - 1):
        I[k, k] = amplitude
        I[k + 1, k] = -amplitude
    return I


def eit_forward(sys, currents, cfg=PcgConfig(), tm=None, threads=1):
    """Electrode voltages y = R M^-1 I for zero-sum current patterns.

    ``tm`` reuses a precomputed ``electrode_response`` pair.  A single
    pattern returns a length-L vector, multiple patterns an (L, P) array.
    """
    I = check_current_patterns(currents, sys.n_electrodes)
    if tm is None:
        tm = electrode_response(sys, cfg, threads=threads)
    _, M = tm
    y = sys.R @ _solve_response(M, I)
    return y[:, 0] if np.asarray(currents).ndim == 1 else y


def _dof_sensitivities(sys, dofs, U, T):
    """Per-DOF electrode sensitivities q_{m,p} = T' K_m u_p for all patterns.

    Element-local products are evaluated in one vectorized sweep and
    scattered into the DOF bins, so the cost is one pass over the
    perturbable elements per pattern.
    """
    mesh = sys.mesh
    all_elems = np.concatenate([np.asarray(e) for e in dofs.element_sets])
    owner = np.concatenate([np.full(len(e), k) for k, e in enumerate(dofs.element_sets)])
    blocks = stiffness_blocks(mesh, sigma=1.0, elements=all_elems)  # (E,4,4)
    conn = mesh.tetra[all_elems]                                    # (E,4)
    # Grounding rows/columns are sigma-independent; zero their derivative.
    gmask = conn == sys.ground
    if gmask.any():
        blocks = blocks.copy()
        blocks[np.repeat(gmask[:, :, None], 4, axis=2)] = 0.0
        blocks[np.repeat(gmask[:, None, :], 4, axis=1)] = 0.0

    Tg = T[conn]                                                    # (E,4,L)
    P = U.shape[1]
    L = T.shape[1]
    Q = np.zeros((P, dofs.n_dofs, L))
    for p in range(P):
        ue = U[:, p][conn]                                          # (E,4)
        s = np.einsum("eij,ej->ei", blocks, ue)                     # K_m u per element
        contrib = np.einsum("eil,ei->el", Tg, s)                    # (E,L)
        np.add.at(Q[p], owner, contrib)
    return Q


def eit_leadfield(sys, dofs, currents, cfg=PcgConfig(), threads=1):
    """Linearized EIT lead field around the mesh conductivity.

    Column m stacks dy/ds_m over all current patterns; the background data
    y_bg (same stacking) and conductivity snapshot are stored on the
    result.  Solves: one per electrode for T plus one per pattern for
    u_p = A^-1 B M^-1 I_p.
    """
    I = check_current_patterns(currents, sys.n_electrodes)
    T, M = electrode_response(sys, cfg, threads=threads)
    V = _solve_response(M, I)                    # M^-1 I, (L, P)
    y_bg = sys.R @ V

    BV = np.asarray(sys.B @ V)
    P = I.shape[1]
    U = np.empty((sys.A.shape[0], P))
    for p in range(P):
        U[:, p], _, _ = pcg_solve(sys.A, BV[:, p], cfg)

    Q = _dof_sensitivities(sys, dofs, U, T)      # (P, m, L)
    cols = np.empty((P * sys.n_electrodes, dofs.n_dofs))
    for p in range(P):
        cols[p * sys.n_electrodes:(p + 1) * sys.n_electrodes, :] = \
            -(sys.R @ _solve_response(M, Q[p].T))
    return LeadField(matrix=cols, positions=dofs.centers, orientations=None,
                     modality="eit", n_patterns=P,
                     background_sigma=np.array(sys.mesh.sigma, copy=True),
                     background_data=y_bg.T.ravel())
