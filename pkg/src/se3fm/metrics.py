"""Structure comparison and evaluation metrics.

Comparisons assume positional residue correspondence (equal lengths); the
template-match score maximizes over rigid superpositions only, refined
iteratively from three deterministic seed fragments. Secondary structure
comes from phi/psi windows over standard Ramachandran regions.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .backbone import ATOM_CA, backbone_dihedrals
from .coupling import solve_assignment
from .errors import DataError

SS_WEIGHTS = {"H": 1.0, "C": 0.5, "E": 2.0}


@dataclass
class SecondaryConfig:
    """Dihedral windows in degrees and minimum run lengths."""

    helix_phi: tuple = (-100.0, -30.0)
    helix_psi: tuple = (-80.0, -5.0)
    strand_phi: tuple = (-170.0, -70.0)
    strand_psi: tuple = (80.0, 180.0)
    strand_psi_wrap: tuple = (-180.0, -170.0)
    helix_min_run: int = 4
    strand_min_run: int = 3


def _as_ca(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 3 and x.shape[1:] == (4, 3):
        return x[:, ATOM_CA]
    if x.ndim == 2 and x.shape[1] == 3:
        return x
    raise DataError(f"expected (N, 3) or (N, 4, 3) coordinates, got {x.shape}")


def kabsch_rmsd(a, b):
    """Minimum RMSD over rigid motions and the transform (R, t) with R@b+t ~ a."""
    a = _as_ca(a)
    b = _as_ca(b)
    if a.shape != b.shape:
        raise DataError("point sets differ in shape")
    if a.shape[0] < 3:
        raise DataError("need at least 3 points for superposition")
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    h = (b - cb).T @ (a - ca)
    u, s, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    corr = np.diag([1.0, 1.0, d])
    rot = vt.T @ corr @ u.T
    t = ca - rot @ cb
    moved = b @ rot.T + t
    rmsd = float(np.sqrt(np.mean(np.sum((moved - a) ** 2, axis=1))))
    return rmsd, (rot, t)


def tm_d0(length):
    """Length-normalization distance, clamped below at 0.5 A."""
    return max(0.5, 1.24 * np.cbrt(length - 15.0) - 1.8)


def tm_score(a, b, max_iter=20):
    """Fixed-correspondence template-match score in (0, 1].

    Superposition is refined by iterating Kabsch on the residues currently
    within 2*d0, starting from three seed fragments (full, first half, last
    half); the best final score is returned.
    """
    a = _as_ca(a)
    b = _as_ca(b)
    if a.shape != b.shape:
        raise DataError("template-match score needs equal-length structures")
    n = a.shape[0]
    if n < 3:
        raise DataError("need at least 3 residues")
    d0 = tm_d0(n)
    half = n // 2
    seeds = [np.arange(n)]
    if half >= 3:
        seeds.append(np.arange(half))
        seeds.append(np.arange(n - half, n))
    best = 0.0
    for seed in seeds:
        subset = seed
        for _ in range(max_iter):
            _, (rot, t) = kabsch_rmsd(a[subset], b[subset])
            d = np.linalg.norm(b @ rot.T + t - a, axis=1)
            score = float(np.mean(1.0 / (1.0 + (d / d0) ** 2)))
            best = max(best, score)
            new_subset = np.nonzero(d < 2.0 * d0)[0]
            if new_subset.size < 3 or np.array_equal(new_subset, subset):
                break
            subset = new_subset
    return best


def assign_secondary(atoms, cfg: SecondaryConfig = SecondaryConfig()):
    """Per-residue H/E/C labels from phi/psi windows; termini are coil."""
    atoms = np.asarray(atoms, dtype=float)
    n = atoms.shape[0]
    if n < 4:
        raise DataError("secondary-structure assignment needs at least 4 residues")
    dihedrals = np.degrees(backbone_dihedrals(atoms))
    phi, psi = dihedrals[:, 0], dihedrals[:, 1]

    def in_window(x, lo_hi):
        return (x > lo_hi[0]) & (x < lo_hi[1])

    valid = np.isfinite(phi) & np.isfinite(psi)
    helix_ok = valid & in_window(phi, cfg.helix_phi) & in_window(psi, cfg.helix_psi)
    strand_ok = valid & in_window(phi, cfg.strand_phi) & (
        in_window(psi, cfg.strand_psi) | in_window(psi, cfg.strand_psi_wrap)
    )
    labels = ["C"] * n

    def mark_runs(ok, label, min_run):
        i = 0
        while i < n:
            if not ok[i]:
                i += 1
                continue
            j = i
            while j < n and ok[j]:
                j += 1
            if j - i >= min_run:
                for k in range(i, j):
                    labels[k] = label
            i = j

    mark_runs(helix_ok, "H", cfg.helix_min_run)
    mark_runs(strand_ok, "E", cfg.strand_min_run)
    return "".join(labels)


def diversity_reward(ss, weights=None, entropy_sign=1.0):
    """Weighted-entropy reward over secondary-structure fractions.

    With the default sign the term is (1 + sum p log p), which is largest for
    pure compositions; flip `entropy_sign` to reward mixes instead.
    """
    if len(ss) < 1:
        raise DataError("empty secondary-structure string")
    weights = SS_WEIGHTS if weights is None else weights
    n = len(ss)
    reward_scale = 0.0
    entropy = 0.0
    for label in ("H", "C", "E"):
        p = ss.count(label) / n
        reward_scale += p * weights[label]
        if p > 0.0:
            entropy += p * math.log(p)
    return reward_scale * (1.0 + entropy_sign * entropy)


def greedy_cluster(structures, tm_threshold=0.5):
    """Leader clustering in input order; returns (count, assignments)."""
    leaders = []
    assignments = []
    for s in structures:
        placed = False
        for ci, leader in enumerate(leaders):
            if tm_score(leader, s) >= tm_threshold:
                assignments.append(ci)
                placed = True
                break
        if not placed:
            leaders.append(s)
            assignments.append(len(leaders) - 1)
    return len(leaders), assignments


def novelty_stats(samples, reference, tm_cutoff=0.3):
    """(fraction of samples with max reference TM below cutoff, mean max TM)."""
    if not samples:
        raise DataError("no samples")
    if not reference:
        raise DataError("empty reference set")
    max_tms = []
    for s in samples:
        max_tms.append(max(tm_score(r, s) for r in reference))
    max_tms = np.asarray(max_tms)
    return float(np.mean(max_tms < tm_cutoff)), float(max_tms.mean())


def diversity_stats(samples):
    """Mean pairwise template-match score over unordered sample pairs."""
    if len(samples) < 2:
        raise DataError("need at least two samples")
    scores = [tm_score(a, b) for a, b in itertools.combinations(samples, 2)]
    return float(np.mean(scores))


@dataclass
class DesignabilityVerdict:
    scrmsd: float
    designable: bool
    motif_rmsd: float = None
    scaffold_rmsd: float = None


def sc_rmsd_eval(generated, refolds, motif_indices=None, scaffold_indices=None,
                 global_threshold=2.0, motif_threshold=1.0, scaffold_threshold=2.0):
    """Self-consistency verdict against externally produced refolds.

    scRMSD is the minimum aligned CA RMSD over refolds (strictly below the
    threshold to count). With motif/scaffold index sets each region is
    aligned independently and a refold must satisfy all three bounds at once.
    """
    gen = _as_ca(generated)
    if not refolds:
        raise DataError("need at least one refold")
    motif = scaffold = None
    if motif_indices is not None:
        motif = np.asarray(motif_indices, dtype=int)
        if motif.size != len(set(motif.tolist())):
            raise DataError("motif indices overlap")
        if motif.size and (motif.min() < 0 or motif.max() >= gen.shape[0]):
            raise DataError("motif index out of range")
    if scaffold_indices is not None:
        scaffold = np.asarray(scaffold_indices, dtype=int)
        if motif is not None and set(scaffold.tolist()) & set(motif.tolist()):
            raise DataError("motif and scaffold index sets overlap")
        if scaffold.size and (scaffold.min() < 0 or scaffold.max() >= gen.shape[0]):
            raise DataError("scaffold index out of range")
    best_global = math.inf
    best_motif = math.inf
    best_scaffold = math.inf
    designable = False
    for refold in refolds:
        ref = _as_ca(refold)
        g, _ = kabsch_rmsd(gen, ref)
        best_global = min(best_global, g)
        if motif is None:
            designable = designable or g < global_threshold
            continue
        m, _ = kabsch_rmsd(gen[motif], ref[motif])
        s, _ = kabsch_rmsd(gen[scaffold], ref[scaffold]) if scaffold is not None else (0.0, None)
        best_motif = min(best_motif, m)
        best_scaffold = min(best_scaffold, s)
        designable = designable or (
            g < global_threshold and m < motif_threshold and s < scaffold_threshold
        )
    if motif is None:
        return DesignabilityVerdict(best_global, designable)
    return DesignabilityVerdict(best_global, designable, best_motif, best_scaffold)


# ---------------------------------------------------------------------------
# Conformation-ensemble metrics

def pearson(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 2:
        raise DataError("pearson needs two equal-length vectors of size >= 2")
    sx, sy = x.std(), y.std()
    if sx == 0.0 or sy == 0.0:
        return 1.0 if np.array_equal(x, y) else float("nan")
    return float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy))


def _aligned_frames(frames, target):
    out = []
    for f in frames:
        _, (rot, t) = kabsch_rmsd(target, f)
        out.append(f @ rot.T + t)
    return np.stack(out)


def ensemble_rmsf(frames):
    """Per-residue fluctuation about the mean after aligning to the first frame."""
    frames = [_as_ca(f) for f in frames]
    if len(frames) < 2:
        raise DataError("ensemble metrics need at least two conformations")
    aligned = _aligned_frames(frames, frames[0])
    mean = aligned.mean(axis=0)
    return np.sqrt(np.mean(np.sum((aligned - mean) ** 2, axis=2), axis=0))


def pairwise_rmsd_vector(frames):
    frames = [_as_ca(f) for f in frames]
    return np.array([kabsch_rmsd(a, b)[0] for a, b in itertools.combinations(frames, 2)])


def wasserstein2_points(p, q):
    """Exact W2 between equal-size 2-D point clouds via optimal assignment."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise DataError("point clouds must have equal shapes")
    cost = np.sum((p[:, None, :] - q[None, :, :]) ** 2, axis=2)
    assign = solve_assignment(cost)
    return float(np.sqrt(assign.cost / p.shape[0]))


@dataclass
class EnsembleComparison:
    pairwise_rmsd_r: float
    rmsf_r: float
    pca_w2: float
    mean_pairwise_rmsd_a: float
    mean_pairwise_rmsd_b: float


def ensemble_stats(ensemble_a, ensemble_b) -> EnsembleComparison:
    """Compare a generated ensemble against a reference (ground-truth) one.

    Pairwise-RMSD correlation pairs the two ensembles' pair lists by index;
    the PCA basis comes from the reference ensemble only, and the projected
    clouds are compared with an exact 2-D W2 on equal-size subsamples.
    """
    frames_a = [_as_ca(f) for f in ensemble_a]
    frames_b = [_as_ca(f) for f in ensemble_b]
    if len(frames_a) < 2 or len(frames_b) < 2:
        raise DataError("ensemble metrics need at least two conformations")
    if frames_a[0].shape != frames_b[0].shape:
        raise DataError("ensembles must share residue count")

    pv_a = pairwise_rmsd_vector(frames_a)
    pv_b = pairwise_rmsd_vector(frames_b)
    r_pair = pearson(pv_a, pv_b) if pv_a.size == pv_b.size else float("nan")
    r_rmsf = pearson(ensemble_rmsf(frames_a), ensemble_rmsf(frames_b))

    # PCA basis from the reference: align to its mean structure, flatten
    aligned_b = _aligned_frames(frames_b, frames_b[0])
    mean_b = aligned_b.mean(axis=0)
    aligned_b = _aligned_frames(frames_b, mean_b)
    flat_b = aligned_b.reshape(len(frames_b), -1)
    center = flat_b.mean(axis=0)
    _, _, vt = np.linalg.svd(flat_b - center, full_matrices=False)
    comps = vt[:2]
    proj_b = (flat_b - center) @ comps.T
    aligned_a = _aligned_frames(frames_a, mean_b)
    proj_a = (aligned_a.reshape(len(frames_a), -1) - center) @ comps.T
    m = min(len(frames_a), len(frames_b))
    w2 = wasserstein2_points(proj_a[:m], proj_b[:m])
    return EnsembleComparison(
        pairwise_rmsd_r=r_pair,
        rmsf_r=r_rmsf,
        pca_w2=w2,
        mean_pairwise_rmsd_a=float(pv_a.mean()),
        mean_pairwise_rmsd_b=float(pv_b.mean()),
    )
