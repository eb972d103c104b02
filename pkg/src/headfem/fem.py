"""Complete-electrode-model system assembly on tetrahedral meshes.

Assembles the blocks of the electrode-potential system

    [ A  -B ] [ z ]   [ -G x ]
    [ -B' C ] [ v ] = [   I  ]

with linear nodal (P1) basis functions: the stiffness matrix ``A``
(conductivity volume term plus electrode contact terms, grounded at one
boundary node), the electrode coupling blocks ``B`` and ``C``, the
zero-mean projector ``R`` and the source matrix ``G`` built from lowest
order H(div) face functions (the 4-function Whitney stencil per source
element).  All P1 integrals have closed forms, so no numerical quadrature
is involved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import AssemblyError, ElectrodeError, LocationError


# ---------------------------------------------------------------------------
# element geometry

def element_gradients(mesh):
    """Volumes and P1 basis gradients, shape (m,) and (m, 4, 3)."""
    p = mesh.nodes[mesh.tetra]
    jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]],
                   axis=2)                       # columns are edge vectors
    vols = np.linalg.det(jac) / 6.0
    inv = np.linalg.inv(jac)                     # rows are grad(lambda_1..3)
    grads = np.empty((len(p), 4, 3))
    grads[:, 1:, :] = inv
    grads[:, 0, :] = -inv.sum(axis=1)
    return vols, grads


def _sigma_tensors(sigma):
    """(m, 6) rows (s11, s22, s33, s12, s13, s23) as (m, 3, 3) tensors."""
    t = np.empty((len(sigma), 3, 3))
    t[:, 0, 0] = sigma[:, 0]
    t[:, 1, 1] = sigma[:, 1]
    t[:, 2, 2] = sigma[:, 2]
    t[:, 0, 1] = t[:, 1, 0] = sigma[:, 3]
    t[:, 0, 2] = t[:, 2, 0] = sigma[:, 4]
    t[:, 1, 2] = t[:, 2, 1] = sigma[:, 5]
    return t


def _check_conductivity(sigma):
    if sigma.ndim == 1:
        if np.any(sigma < 0):
            raise AssemblyError("negative scalar conductivity")
        return
    t = _sigma_tensors(sigma)
    # Sylvester's criterion on every 3x3 tensor.
    d1 = t[:, 0, 0]
    d2 = t[:, 0, 0] * t[:, 1, 1] - t[:, 0, 1] ** 2
    d3 = np.linalg.det(t)
    if np.any(d1 <= 0) or np.any(d2 <= 0) or np.any(d3 <= 0):
        raise AssemblyError("conductivity tensor row is not positive definite")


def stiffness_blocks(mesh, sigma=None, elements=None):
    """Per-element 4x4 stiffness blocks V * grad_i . sigma grad_j.

    ``sigma=None`` uses the mesh conductivity; a scalar uses that uniform
    value (``sigma=1.0`` gives the unit-conductivity blocks that appear in
    the conductivity derivative of ``A``).  ``elements`` restricts the
    computation to a subset.
    """
    vols, grads = element_gradients(mesh)
    if elements is not None:
        vols = vols[elements]
        grads = grads[elements]
    if np.any(vols <= 0):
        raise AssemblyError("non-positive element volume")
    if sigma is None:
        sigma = mesh.sigma if elements is None else mesh.sigma[elements]
    if np.isscalar(sigma):
        return np.einsum("eik,ejk->eij", grads, grads) * (vols * sigma)[:, None, None]
    sigma = np.asarray(sigma, dtype=float)
    _check_conductivity(sigma)
    if sigma.ndim == 1:
        return np.einsum("eik,ejk->eij", grads, grads) * (vols * sigma)[:, None, None]
    tens = _sigma_tensors(sigma)
    return np.einsum("eik,ekl,ejl->eij", grads, tens, grads) * vols[:, None, None]


def _scatter_blocks(blocks, connectivity, n):
    """Sum (e, k, k) blocks into an n x n CSR matrix."""
    k = connectivity.shape[1]
    rows = np.repeat(connectivity, k, axis=1).ravel()
    cols = np.tile(connectivity, (1, k)).ravel()
    mat = sp.coo_matrix((blocks.ravel(), (rows, cols)), shape=(n, n))
    return mat.tocsr()


def volume_stiffness(mesh, sigma=None, elements=None):
    """Conductivity volume stiffness without electrode or grounding terms."""
    blocks = stiffness_blocks(mesh, sigma=sigma, elements=elements)
    conn = mesh.tetra if elements is None else mesh.tetra[elements]
    return _scatter_blocks(blocks, conn, mesh.n_nodes)


# ---------------------------------------------------------------------------
# electrodes

def triangle_areas(nodes, triangles):
    p = nodes[triangles]
    return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]),
                                axis=1)


class ElectrodeSet:
    """Surface electrodes as disjoint sets of boundary triangles.

    Parameters
    ----------
    mesh : TetMesh
    triangle_ids : sequence of int arrays
        Indices into ``mesh.boundary_triangles()[0]``, one array per
        electrode; the sets must be disjoint.
    impedances : float or sequence
        Contact impedance per electrode (Ohm).
    """

    def __init__(self, mesh, triangle_ids, impedances):
        bfaces, _ = mesh.boundary_triangles()
        n_el = len(triangle_ids)
        imp = np.broadcast_to(np.asarray(impedances, dtype=float), (n_el,)).copy()
        if np.any(imp <= 0):
            raise ElectrodeError("contact impedances must be positive")
        seen = np.concatenate([np.asarray(t, dtype=np.int64) for t in triangle_ids]) \
            if n_el else np.array([], dtype=np.int64)
        if seen.size != len(np.unique(seen)):
            raise ElectrodeError("electrode triangle sets overlap")
        if seen.size and (seen.min() < 0 or seen.max() >= len(bfaces)):
            raise ElectrodeError("electrode triangle index outside the boundary")

        areas_all = triangle_areas(mesh.nodes, bfaces)
        self.triangle_ids = tuple(np.asarray(t, dtype=np.int64) for t in triangle_ids)
        self.triangles = tuple(bfaces[t] for t in self.triangle_ids)
        self.triangle_areas = tuple(areas_all[t] for t in self.triangle_ids)
        self.areas = np.array([a.sum() for a in self.triangle_areas])
        if np.any(self.areas <= 0):
            raise ElectrodeError("electrode with zero covered area")
        self.impedances = imp
        self.count = n_el

    @classmethod
    def from_centers(cls, mesh, centers, radius, impedances):
        """Cover each electrode by the boundary triangles whose centroid lies
        within ``radius`` of its center; conflicts go to the nearest center."""
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        bfaces, _ = mesh.boundary_triangles()
        cent = mesh.nodes[bfaces].mean(axis=1)
        d = np.linalg.norm(cent[:, None, :] - centers[None, :, :], axis=2)
        nearest = np.argmin(d, axis=1)
        covered = d[np.arange(len(cent)), nearest] <= radius
        ids = [np.flatnonzero(covered & (nearest == k)) for k in range(len(centers))]
        for k, t in enumerate(ids):
            if t.size == 0:
                raise ElectrodeError(
                    f"electrode {k} at {centers[k]} covers no boundary triangle "
                    f"within radius {radius}")
        return cls(mesh, ids, impedances)

    @property
    def node_set(self):
        if self.count == 0:
            return np.array([], dtype=np.int64)
        return np.unique(np.concatenate([t.ravel() for t in self.triangles]))

    def __len__(self):
        return self.count


_SURF_MASS = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


def ground_node(mesh, electrodes):
    """Lowest-index boundary node not covered by any electrode."""
    free = np.setdiff1d(mesh.boundary_nodes(), electrodes.node_set)
    if free.size == 0:
        raise AssemblyError("electrodes cover every boundary node; "
                            "cannot choose a grounding node")
    return int(free[0])


def assemble_A(mesh, electrodes, ground=True):
    """Grounded CEM stiffness matrix (volume + electrode contact terms).

    a_ij = int sigma grad psi_i . grad psi_j dV
         + sum_l 1/(Z_l A_l) int_{e_l} psi_i psi_j dS

    afterwards row and column ``i'`` of the grounding node are replaced by
    the identity row, which makes the matrix positive definite.
    """
    A = volume_stiffness(mesh).tolil()
    for tris, areas, z, a_l in zip(electrodes.triangles, electrodes.triangle_areas,
                                   electrodes.impedances, electrodes.areas):
        scale = 1.0 / (z * a_l)
        for tri, at in zip(tris, areas):
            A[np.ix_(tri, tri)] += scale * at * _SURF_MASS
    A = A.tocsr()
    if ground and electrodes.count:
        i = ground_node(mesh, electrodes)
        A = _ground(A, i)
    return A


def _ground(A, i):
    A = A.tolil()
    A[i, :] = 0.0
    A[:, i] = 0.0
    A[i, i] = 1.0
    return A.tocsr()


def assemble_B_C_R(mesh, electrodes):
    """Electrode coupling blocks.

    With the contact impedance density Z_l A_l used in the stiffness
    electrode term, the matching couplings are

        b_il = 1/(Z_l A_l) int_{e_l} psi_i dS,   c_ll = 1/Z_l,

    so Z_l is the total contact resistance of electrode l and the column
    sums of B equal diag(C) (nodal partition of unity).  R = I - (1/L) 11'
    is the zero-mean projector on electrode voltages.
    """
    n, L = mesh.n_nodes, electrodes.count
    if L == 0:
        raise ElectrodeError("no electrodes defined")
    rows, cols, vals = [], [], []
    for l, (tris, areas, z, a_l) in enumerate(zip(electrodes.triangles,
                                                  electrodes.triangle_areas,
                                                  electrodes.impedances,
                                                  electrodes.areas)):
        if areas.sum() <= 0:
            raise ElectrodeError(f"electrode {l} has zero covered area")
        contrib = np.repeat(areas / (3.0 * z * a_l), 3)
        rows.append(tris.ravel())
        cols.append(np.full(tris.size, l, dtype=np.int64))
        vals.append(contrib)
    B = sp.coo_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, L)).tocsr()
    C = sp.diags(1.0 / electrodes.impedances, format="csr")
    R = np.eye(L) - np.full((L, L), 1.0 / L)
    return B, C, R


# ---------------------------------------------------------------------------
# H(div) source model

@dataclass(frozen=True)
class SourceModel:
    """Whitney (lowest-order H(div) face function) stencil per source element.

    For every source element the 4 global face functions of its faces are
    recorded with their adjoining elements.  Each face function has unit
    flux along the canonical face normal and constant divergence
    ``sign / V`` on each adjoining element, with opposite signs across the
    shared face.

    Attributes
    ----------
    source_elements : (S,) element index per source
    adjoining : (S, 4, 2) adjoining element per (source, face), -1 if none
    signs : (S, 4, 2) float direction of the canonical normal w.r.t. the
        element's outward normal (0 where there is no second element)
    volumes : (S, 4, 2) adjoining element volumes
    moments : (S, 4, 3) dipole moment of each face function
    """

    source_elements: np.ndarray
    adjoining: np.ndarray
    signs: np.ndarray
    volumes: np.ndarray
    moments: np.ndarray


def _face_incidence(mesh):
    faces = mesh.element_faces()
    key = np.sort(faces, axis=1)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    owners = np.repeat(np.arange(mesh.n_elements), 4)
    order = np.argsort(inv, kind="stable")
    counts = np.bincount(inv, minlength=len(uniq))
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    face_elems = np.full((len(uniq), 2), -1, dtype=np.int64)
    face_elems[:, 0] = owners[order[starts]]
    second = counts == 2
    face_elems[second, 1] = owners[order[starts[second] + 1]]
    return uniq, inv, face_elems


def build_source_model(mesh, elements):
    """Assemble the Whitney face stencil for the given source elements."""
    elements = np.asarray(elements, dtype=np.int64)
    uniq, inv, face_elems = _face_incidence(mesh)
    inv4 = inv.reshape(-1, 4)

    centroids = mesh.centroids()
    vols = mesh.volumes
    S = len(elements)
    adjoining = np.full((S, 4, 2), -1, dtype=np.int64)
    signs = np.zeros((S, 4, 2))
    volumes = np.zeros((S, 4, 2))
    moments = np.zeros((S, 4, 3))

    for s, e in enumerate(elements):
        for j in range(4):
            fid = inv4[e, j]
            fnodes = uniq[fid]
            fc = mesh.nodes[fnodes].mean(axis=0)
            ncanon = np.cross(mesh.nodes[fnodes[1]] - mesh.nodes[fnodes[0]],
                              mesh.nodes[fnodes[2]] - mesh.nodes[fnodes[0]])
            for slot, k in enumerate(face_elems[fid]):
                if k < 0:
                    continue
                opposite = np.setdiff1d(mesh.tetra[k], fnodes)[0]
                sgn = 1.0 if ncanon @ (fc - mesh.nodes[opposite]) > 0 else -1.0
                adjoining[s, j, slot] = k
                signs[s, j, slot] = sgn
                volumes[s, j, slot] = vols[k]
                # moment of w restricted to k: sign * (centroid_k - a_k) / 3
                moments[s, j] += sgn * (centroids[k] - mesh.nodes[opposite]) / 3.0
    return SourceModel(source_elements=elements, adjoining=adjoining,
                       signs=signs, volumes=volumes, moments=moments)


def whitney_source_matrix(mesh, elements):
    """Raw face-function source matrix: 4 columns per source element.

    g_{i,f} accumulates sign/4 over the nodes of every element adjoining
    face f (int psi_i dV = V/4 and div w = sign / V).
    """
    model = build_source_model(mesh, elements)
    S = len(model.source_elements)
    rows, cols, vals = [], [], []
    for s in range(S):
        for j in range(4):
            col = 4 * s + j
            for slot in range(2):
                k = model.adjoining[s, j, slot]
                if k < 0:
                    continue
                rows.append(mesh.tetra[k])
                cols.append(np.full(4, col, dtype=np.int64))
                vals.append(np.full(4, model.signs[s, j, slot] / 4.0))
    G = sp.coo_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(mesh.n_nodes, 4 * S)).tocsr()
    return G, model


def locate_elements(mesh, points, tol=1e-9):
    """Element containing each point (nearest-centroid candidates, then a
    barycentric test).  Raises LocationError for points outside the mesh."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    tree = cKDTree(mesh.centroids())
    k = min(mesh.n_elements, 32)
    _, cand = tree.query(points, k=k)
    cand = np.asarray(cand, dtype=np.int64).reshape(len(points), k)
    vols, grads = element_gradients(mesh)
    out = np.full(len(points), -1, dtype=np.int64)
    scale = tol * np.max(np.ptp(mesh.nodes, axis=0))
    for i, p in enumerate(points):
        for e in cand[i]:
            # lambda_k(p) = lambda_k(p0) + grad_k . (p - p0); using vertex 0
            lam = grads[e] @ (p - mesh.nodes[mesh.tetra[e, 0]])
            lam[0] += 1.0
            if np.all(lam >= -scale) and np.all(lam <= 1.0 + scale):
                out[i] = e
                break
        if out[i] < 0:
            raise LocationError(f"point {p} lies outside the mesh")
    return out


def assemble_G(mesh, sources):
    """Source matrix with columns combined according to the source mode.

    Unconstrained mode emits 3 columns per source (pattern: position 1
    xyz, position 2 xyz, ...), each the minimum-norm combination of the
    element's 4 face functions whose dipole moment equals the unit axis
    dipole.  Constrained mode projects that combination onto the source
    normal, one column per source.
    """
    if sources.element_ids is not None:
        elements = np.asarray(sources.element_ids, dtype=np.int64)
        if elements.size and (elements.min() < 0 or elements.max() >= mesh.n_elements):
            raise LocationError("source element index outside the mesh")
    else:
        elements = locate_elements(mesh, sources.positions)
    G_w, model = whitney_source_matrix(mesh, elements)

    S = len(elements)
    n_comp = sources.n_components
    blocks = []
    for s in range(S):
        M = model.moments[s].T                      # 3 x 4
        coeff, *_ = np.linalg.lstsq(M, np.eye(3), rcond=None)   # 4 x 3
        if sources.mode == "constrained":
            coeff = coeff @ sources.orientations[s]
            blocks.append(sp.csr_matrix(coeff[:, None]))
        else:
            blocks.append(sp.csr_matrix(coeff))
    W = sp.block_diag(blocks, format="csr")
    G = (G_w @ W).tocsr()
    assert G.shape == (mesh.n_nodes, n_comp * S)
    return G


# ---------------------------------------------------------------------------
# assembled system

@dataclass(frozen=True)
class CemSystem:
    """Assembled CEM blocks plus the context needed to reassemble them."""

    mesh: object
    electrodes: ElectrodeSet
    A: sp.csr_matrix
    B: sp.csr_matrix
    C: sp.csr_matrix
    R: np.ndarray
    ground: int
    G: sp.csr_matrix | None = None
    source_space: object | None = None

    @property
    def n_electrodes(self):
        return self.electrodes.count


def assemble_cem_system(mesh, electrodes, sources=None):
    """Assemble all CEM blocks for a mesh/electrode pair (EEG needs
    ``sources`` for the right-hand-side matrix G)."""
    A = assemble_A(mesh, electrodes)
    B, C, R = assemble_B_C_R(mesh, electrodes)
    G = assemble_G(mesh, sources) if sources is not None else None
    return CemSystem(mesh=mesh, electrodes=electrodes, A=A, B=B, C=C, R=R,
                     ground=ground_node(mesh, electrodes), G=G,
                     source_space=sources)
