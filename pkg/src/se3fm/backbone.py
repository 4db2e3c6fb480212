"""Backbone parametrizations: heavy-atom coordinates, rigid frames, sequences.

Atom coordinate arrays have shape (N, 4, 3) with atom order N, CA, C, O.
The residue-local idealized geometry places CA at the origin; applying a
rigid frame to it reconstitutes the residue's heavy atoms.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .geometry import FrameChain, remove_com

ATOM_N, ATOM_CA, ATOM_C, ATOM_O = 0, 1, 2, 3
ATOM_NAMES = ("N", "CA", "C", "O")

# Alphabetical one-letter amino-acid order; index 20 is the mask token.
AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
MASK_TOKEN = 20
VOCAB_SIZE = 21

THREE_TO_ONE = {
    "ALA": "A", "CYS": "C", "ASP": "D", "GLU": "E", "PHE": "F",
    "GLY": "G", "HIS": "H", "ILE": "I", "LYS": "K", "LEU": "L",
    "MET": "M", "ASN": "N", "PRO": "P", "GLN": "Q", "ARG": "R",
    "SER": "S", "THR": "T", "VAL": "V", "TRP": "W", "TYR": "Y",
}
ONE_TO_THREE = {v: k for k, v in THREE_TO_ONE.items()}

# Residue-local coordinates (Angstrom) of the four heavy atoms, CA at origin.
# Standard literature residue geometry; overridable where a different
# idealization is wanted.
IDEAL_N = np.array([-0.5272, 1.3593, 0.0])
IDEAL_CA = np.array([0.0, 0.0, 0.0])
IDEAL_C = np.array([1.5233, 0.0, 0.0])
IDEAL_O = np.array([2.1421, -1.0620, 0.0])
IDEAL_RESIDUE = np.stack([IDEAL_N, IDEAL_CA, IDEAL_C, IDEAL_O])


def token_from_letter(letter):
    if letter == "X":
        return MASK_TOKEN
    idx = AMINO_ACIDS.find(letter)
    if idx < 0:
        raise DataError(f"unknown amino-acid letter {letter!r}")
    return idx


def letter_from_token(token):
    if token == MASK_TOKEN:
        return "X"
    return AMINO_ACIDS[token]


@dataclass
class SequenceRecord:
    """Token sequence over the 21-symbol vocabulary plus an observation mask.

    Invariant: a position is the mask token exactly when it is unobserved.
    """

    tokens: np.ndarray
    observed: np.ndarray = field(default=None)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=int)
        if self.observed is None:
            self.observed = self.tokens != MASK_TOKEN
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.tokens.shape != self.observed.shape or self.tokens.ndim != 1:
            raise DataError("tokens and observed must be matching 1-D arrays")
        if np.any((self.tokens < 0) | (self.tokens >= VOCAB_SIZE)):
            raise DataError("token out of vocabulary range")
        if np.any((self.tokens == MASK_TOKEN) != ~self.observed):
            raise DataError("mask-token/observed consistency violated")

    def __len__(self):
        return self.tokens.shape[0]

    def copy(self):
        return SequenceRecord(self.tokens.copy(), self.observed.copy())

    @classmethod
    def fully_masked(cls, n):
        return cls(np.full(n, MASK_TOKEN, dtype=int))

    @classmethod
    def from_letters(cls, letters):
        return cls(np.array([token_from_letter(c) for c in letters], dtype=int))

    def to_letters(self):
        return "".join(letter_from_token(t) for t in self.tokens)


def frames_to_atoms(chain: FrameChain, ideal=IDEAL_RESIDUE):
    """Apply each frame to the idealized residue: atom = rot @ ideal + trans."""
    atoms = np.einsum("nij,aj->nai", chain.rot, ideal)
    return atoms + chain.trans[:, None, :]


def atoms_to_frames(atoms) -> FrameChain:
    """Fit a rigid frame per residue by Gram-Schmidt on (N, CA, C).

    Translation is CA; the first basis vector follows C-CA, the second the
    orthogonalized N-CA direction. The result is recentered.
    """
    atoms = np.asarray(atoms, dtype=float)
    if atoms.ndim != 3 or atoms.shape[1:] != (4, 3):
        raise DataError(f"atoms must be (N, 4, 3), got {atoms.shape}")
    if not np.all(np.isfinite(atoms)):
        raise DataError("non-finite atom coordinates")
    ca = atoms[:, ATOM_CA]
    u1 = atoms[:, ATOM_C] - ca
    u2 = atoms[:, ATOM_N] - ca
    n1 = np.linalg.norm(u1, axis=-1)
    if np.any(n1 < 1e-8):
        raise DataError(f"degenerate residue (zero C-CA) at index {int(np.argmin(n1))}")
    e1 = u1 / n1[:, None]
    u2p = u2 - np.sum(u2 * e1, axis=-1, keepdims=True) * e1
    n2 = np.linalg.norm(u2p, axis=-1)
    if np.any(n2 < 1e-8):
        raise DataError(f"degenerate residue (collinear N, CA, C) at index {int(np.argmin(n2))}")
    e2 = u2p / n2[:, None]
    e3 = np.cross(e1, e2)
    rot = np.stack([e1, e2, e3], axis=-1)  # columns e1, e2, e3
    return remove_com(FrameChain(rot, ca))


def mask_sequence(seq: SequenceRecord, mode, rng=None, p=0.5, indices=None) -> SequenceRecord:
    """Return a masked copy of seq; the input is never modified.

    mode 'full' masks everything, 'none' nothing, 'bernoulli' masks the whole
    sequence with probability p (all-or-nothing), 'indices' masks exactly the
    given positions.
    """
    n = len(seq)
    if mode == "full":
        return SequenceRecord.fully_masked(n)
    if mode == "none":
        return seq.copy()
    if mode == "bernoulli":
        if rng is None:
            raise DataError("bernoulli masking needs an rng")
        if not 0.0 <= p <= 1.0:
            raise DataError(f"mask probability {p} outside [0, 1]")
        if rng.random() < p:
            return SequenceRecord.fully_masked(n)
        return seq.copy()
    if mode == "indices":
        idx = np.asarray(indices if indices is not None else [], dtype=int)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise DataError(f"mask index out of range for length {n}")
        tokens = seq.tokens.copy()
        tokens[idx] = MASK_TOKEN
        return SequenceRecord(tokens)
    raise DataError(f"unknown masking mode {mode!r}")


def dihedral(p0, p1, p2, p3):
    """Signed torsion angle (radians) of four points about the p1-p2 axis."""
    p0, p1, p2, p3 = (np.asarray(p, dtype=float) for p in (p0, p1, p2, p3))
    b0 = p0 - p1
    b1 = p2 - p1
    b2 = p3 - p2
    n1 = np.linalg.norm(b1)
    if n1 < 1e-8:
        raise DataError("degenerate torsion: coincident axis points")
    b1u = b1 / n1
    v = b0 - np.dot(b0, b1u) * b1u
    w = b2 - np.dot(b2, b1u) * b1u
    if np.linalg.norm(v) < 1e-8 or np.linalg.norm(w) < 1e-8:
        raise DataError("degenerate torsion: collinear points")
    x = np.dot(v, w)
    y = np.dot(np.cross(b1u, v), w)
    return float(np.arctan2(y, x))


def backbone_dihedrals(atoms):
    """Per-residue (phi, psi) in radians; undefined terminal entries are NaN."""
    atoms = np.asarray(atoms, dtype=float)
    n = atoms.shape[0]
    if n < 2:
        raise DataError("need at least two residues for dihedrals")
    out = np.full((n, 2), np.nan)
    for i in range(n):
        if i > 0:
            out[i, 0] = dihedral(
                atoms[i - 1, ATOM_C], atoms[i, ATOM_N], atoms[i, ATOM_CA], atoms[i, ATOM_C]
            )
        if i < n - 1:
            out[i, 1] = dihedral(
                atoms[i, ATOM_N], atoms[i, ATOM_CA], atoms[i, ATOM_C], atoms[i + 1, ATOM_N]
            )
    return out
