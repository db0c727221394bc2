"""
Fine-Scale Reference Solvers and Dataset Generation

Mimetic solvers on a Cartesian fine complex with a circular material
inclusion, used to produce coarse training samples.

Edge value convention: an edge value is the flux F . n |e| with n the edge
tangent rotated clockwise, so x-edges carry downward flux and y-edges carry
rightward flux. delta_1 is then the outward cell divergence and
(delta_1^T phi)_e = phi_left - phi_right of the edge's two cells.

    - Darcy: cell potentials phi, edge fluxes F, two-point flux with
      harmonic-mean coefficients, pure flux boundary data, phi pinned at cell 0.
    - Magnetostatics: nodal field B = mu J with J from the nodal curl
      equation, edge potential A with A = 0 on the boundary and div A = 0.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve
from scipy.spatial import cKDTree

from src.api.schemas import CaseSpec, MaterialSpec
from src.core.coarsen import CoarseMap, block_partition, build_coarse, greedy_partition, restrict
from src.core.complex import ChainComplex, Cochain, boundary_mask, build_cartesian_complex
from src.core.model import BoundaryCondition, Pin
from src.core.train import Sample

logger = logging.getLogger("ddec-reference")

COMPATIBILITY_TOLERANCE = 1e-10


def mu_alpha(x: np.ndarray, mat: MaterialSpec) -> np.ndarray:
    """alpha inside the inclusion (distance to center < radius), 1 elsewhere. Accepts one point or an (n, 2) array."""
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    inside = np.linalg.norm(pts - np.asarray(mat.center), axis=1) < mat.radius
    values = np.where(inside, mat.alpha, 1.0)
    return values if np.ndim(x) > 1 else float(values[0])


def _edge_geometry(c: ChainComplex) -> Tuple[np.ndarray, np.ndarray]:
    """Lengths and clockwise-rotated unit normals of every edge."""
    tangents = c.delta[0].astype(float) @ c.positions
    lengths = np.linalg.norm(tangents, axis=1)
    unit = tangents / lengths[:, None]
    normals = np.column_stack([unit[:, 1], -unit[:, 0]])
    return lengths, normals


def boundary_flux(c: ChainComplex, mean_flux: Tuple[float, float]) -> np.ndarray:
    """Edge values F . n |e| of a uniform flux field, zero off the boundary."""
    lengths, normals = _edge_geometry(c)
    values = (normals @ np.asarray(mean_flux, dtype=float)) * lengths
    return np.where(boundary_mask(c, 1), values, 0.0)


def solve_darcy_fine(
    c: ChainComplex,
    mat: MaterialSpec,
    g: np.ndarray,
    f: Optional[np.ndarray] = None,
) -> Tuple[Cochain, Cochain]:
    """
    Solve F + mu grad phi = 0, div F = f with prescribed boundary fluxes.

    Args:
        c: Fine 2D complex.
        mat: Material.
        g: Edge values; only boundary entries are used.
        f: Integrated cell sources (zero when omitted).

    Returns:
        (phi at level 2, F at level 1)

    Raises:
        ValueError: If sum(f) differs from the net boundary outflow.
    """
    n_cells, n_edges = c.counts[2], c.counts[1]
    f = np.zeros(n_cells) if f is None else np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    d1 = c.delta[1].astype(float).tocsc()
    bmask = boundary_mask(c, 1)
    outflow = float(np.sum(np.asarray(d1.sum(axis=0)).ravel()[bmask] * g[bmask]))
    if abs(outflow - f.sum()) > COMPATIBILITY_TOLERANCE * (1.0 + np.abs(g).sum() + np.abs(f).sum()):
        raise ValueError(f"Incompatible Darcy data: boundary outflow {outflow:.6g} != total source {f.sum():.6g}")

    centers = c.cell_centroids(2)
    mu = mu_alpha(centers, mat)
    lengths, _ = _edge_geometry(c)
    interior = np.flatnonzero(~bmask)
    trans = np.zeros(n_edges)
    for e in interior:
        cells = d1.indices[d1.indptr[e]:d1.indptr[e + 1]]
        a, b = cells
        mu_h = 2.0 * mu[a] * mu[b] / (mu[a] + mu[b])
        dist = np.linalg.norm(centers[a] - centers[b])
        trans[e] = mu_h * lengths[e] / dist

    d_int = d1[:, interior]
    system = (d_int @ sp.diags(trans[interior]) @ d_int.T).tolil()
    rhs = f - d1[:, np.flatnonzero(bmask)] @ g[bmask]
    system[0, :] = 0.0
    system[0, 0] = 1.0
    rhs[0] = 0.0
    phi = spsolve(system.tocsr(), rhs)
    if not np.all(np.isfinite(phi)):
        raise ValueError("Darcy fine system is singular")

    flux = np.where(bmask, g, 0.0)
    flux[interior] = trans[interior] * (d_int.T @ phi)
    return Cochain(2, phi), Cochain(1, flux)


def solve_magnetostatics_fine(
    c: ChainComplex,
    mat: MaterialSpec,
    g: float,
    f: Optional[np.ndarray] = None,
) -> Tuple[Cochain, Cochain]:
    """
    Solve curl J = f, B = mu J with boundary field B = g, then recover the
    edge potential A (zero on boundary edges, delta_1 A = 0) whose nodal
    divergence delta_0^T A reproduces B at interior nodes.

    Args:
        c: Fine 2D complex.
        mat: Material.
        g: Boundary field value.
        f: Edge source of the curl equation (zero when omitted).

    Returns:
        (B at level 0, A at level 1)
    """
    n_nodes, n_edges = c.counts[0], c.counts[1]
    d0 = c.delta[0].astype(float).tocsr()
    f = np.zeros(n_edges) if f is None else np.asarray(f, dtype=float)
    mu = mu_alpha(c.positions, mat)
    bnodes = boundary_mask(c, 0)
    inner = np.flatnonzero(~bnodes)

    # nodal J: normal equations of delta_0 J = f inside, J = g / mu on the boundary
    lap = (d0.T @ d0).tolil()
    rhs = d0.T @ f
    for i in np.flatnonzero(bnodes):
        lap[i, :] = 0.0
        lap[i, i] = 1.0
        rhs[i] = g / mu[i]
    current = spsolve(lap.tocsr(), rhs)
    field_b = mu * current

    # gauge solve: A = delta_0 chi with chi = 0 on the boundary
    gauge = (d0[:, inner].T @ d0[:, inner]).tocsc()
    chi = np.zeros(n_nodes)
    chi[inner] = spsolve(gauge, field_b[inner])
    potential = d0 @ chi
    if not (np.all(np.isfinite(field_b)) and np.all(np.isfinite(potential))):
        raise ValueError("Magnetostatics fine system is singular")
    return Cochain(0, field_b), Cochain(1, potential)


def profile(
    c: ChainComplex,
    level: int,
    values: np.ndarray,
    y: float = 0.5,
    n_samples: int = 200,
    x_range: Tuple[float, float] = (0.0, 1.0),
) -> List[Dict[str, float]]:
    """
    Nearest-centroid samples of a cochain along the horizontal line at height y.

    Consecutive samples hitting the same cell are collapsed, so each row is
    one cell: its centroid coordinates, index and value.
    """
    centroids = c.cell_centroids(level)
    values = np.asarray(values, dtype=float)
    xs = np.linspace(x_range[0], x_range[1], n_samples)
    _, nearest = cKDTree(centroids).query(np.column_stack([xs, np.full_like(xs, y)]))
    rows = []
    for idx in nearest:
        if rows and rows[-1]["index"] == idx:
            continue
        rows.append({
            "x": float(centroids[idx, 0]),
            "y": float(centroids[idx, 1]),
            "index": int(idx),
            "value": float(values[idx]),
        })
    return rows


@dataclass
class GeneratedCase:
    """
    Everything produced for one case: complexes, coarsening, samples and fine fields.

    fine_fields follows spec.alphas; held-out coefficients only yield samples.
    """
    spec: CaseSpec
    fine: ChainComplex
    coarse: ChainComplex
    cmap: CoarseMap
    samples: List[Sample] = field(default_factory=list)
    fine_fields: List[Dict[str, np.ndarray]] = field(default_factory=list)
    held_out_samples: List[Sample] = field(default_factory=list)

    @property
    def k(self) -> int:
        return problem_level(self.spec.case)


def fine_profile_rows(case: GeneratedCase, y: float = 0.5, n_samples: int = 200) -> List[Dict[str, float]]:
    """Profile rows of every fine reference solution, tagged with alpha and field name ('w' or 'u')."""
    rows = []
    for alpha, fields in zip(case.spec.alphas, case.fine_fields):
        for name, level in (("w", case.k - 1), ("u", case.k)):
            for row in profile(case.fine, level, fields[name], y, n_samples):
                rows.append({"alpha": float(alpha), "field": name, **row})
    return rows


def problem_level(case: str) -> int:
    """Level of the unknown u: cells for Darcy, edges for magnetostatics."""
    return 1 if case == "magneto" else 2


def partition_labels(fine: ChainComplex, spec: CaseSpec) -> np.ndarray:
    if spec.partitioner == "greedy":
        return greedy_partition(fine, spec.parts * spec.parts, spec.seed)
    return block_partition(fine, spec.parts, spec.parts)


def observation_mask(n_w: int, n_u: int, mode: str) -> np.ndarray:
    """Observed state indices for mode 'both', 'w' or 'u'."""
    if mode == "w":
        return np.arange(n_w)
    if mode == "u":
        return np.arange(n_w, n_w + n_u)
    return np.arange(n_w + n_u)


def coarse_sample(
    case: str,
    coarse: ChainComplex,
    w: np.ndarray,
    u: np.ndarray,
    source: np.ndarray,
    mode: str = "both",
    label: str = "",
) -> Sample:
    """
    Build the coarse training sample for restricted fields.

    Darcy: flux BCs on every boundary coarse edge and the potential of
    partition 0 pinned to its data value. Magnetostatics: field BCs on
    boundary coarse nodes and zero potential on boundary coarse edges.
    """
    k = problem_level(case)
    bcs = []
    pin = None
    if case == "magneto":
        bcs += [BoundaryCondition(0, int(i), float(w[i])) for i in np.flatnonzero(boundary_mask(coarse, 0))]
        bcs += [BoundaryCondition(1, int(i), 0.0) for i in np.flatnonzero(boundary_mask(coarse, 1))]
    else:
        bcs += [BoundaryCondition(1, int(i), float(w[i])) for i in np.flatnonzero(boundary_mask(coarse, 1))]
        pin = Pin(0, float(u[0]))
    state = np.concatenate([w, u])
    mask = observation_mask(coarse.counts[k - 1], coarse.counts[k], mode)
    return Sample(bcs=bcs, source=source, data=state[mask], mask=mask, pin=pin, label=label)


def solve_case_fine(spec: CaseSpec, fine: ChainComplex, alpha: float) -> Dict[str, np.ndarray]:
    """Fine solve for one alpha; returns named fields (w, u, source) at their levels."""
    mat = spec.material.model_copy(update={"alpha": alpha})
    if spec.case == "magneto":
        field_b, potential = solve_magnetostatics_fine(fine, mat, g=alpha)
        return {"w": field_b.values, "u": potential.values, "source": np.zeros(fine.counts[1])}
    mean = (1.0, 0.0) if spec.case == "d1" else (alpha, 0.0)
    phi, flux = solve_darcy_fine(fine, mat, boundary_flux(fine, mean))
    return {"w": flux.values, "u": phi.values, "source": np.zeros(fine.counts[2])}


def _solve_and_restrict(case: GeneratedCase, alpha: float) -> Tuple[Sample, Dict[str, np.ndarray]]:
    spec, k = case.spec, case.k
    fields = solve_case_fine(spec, case.fine, alpha)
    w = restrict(case.cmap, Cochain(k - 1, fields["w"])).values
    u = restrict(case.cmap, Cochain(k, fields["u"])).values
    source = restrict(case.cmap, Cochain(k, fields["source"])).values
    sample = coarse_sample(spec.case, case.coarse, w, u, source, spec.observe, label=f"alpha={alpha:g}")
    logger.info("%s alpha=%g: fine %s -> coarse %s", spec.case, alpha, case.fine.counts, case.coarse.counts)
    return sample, fields


def generate_dataset(spec: CaseSpec) -> GeneratedCase:
    """
    Fine solve for every alpha, restriction to the coarse complex, and one
    Sample per alpha. Held-out coefficients get the same treatment but land
    in held_out_samples.
    """
    fine = build_cartesian_complex(spec.fine, spec.fine)
    coarse, cmap = build_coarse(fine, partition_labels(fine, spec))
    result = GeneratedCase(spec=spec, fine=fine, coarse=coarse, cmap=cmap)
    for alpha in spec.alphas:
        sample, fields = _solve_and_restrict(result, alpha)
        result.samples.append(sample)
        result.fine_fields.append(fields)
    for alpha in spec.held_out:
        sample, _ = _solve_and_restrict(result, alpha)
        result.held_out_samples.append(sample)
    return result
