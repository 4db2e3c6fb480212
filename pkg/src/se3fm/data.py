"""Structure ingestion and curation: PDB text, filters, toy generators.

PDB handling is fixed-column, single chain, first model; the B-factor column
doubles as per-residue pLDDT on synthetic (predicted) structures, following
the AF2 file convention. The filtering pipeline applies, in order, global
accept/reject rules, per-residue confidence masking, and a compactness rule
standing in for a learned quality model.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import (
    ATOM_CA,
    ATOM_NAMES,
    MASK_TOKEN,
    ONE_TO_THREE,
    SequenceRecord,
    THREE_TO_ONE,
    atoms_to_frames,
    frames_to_atoms,
    token_from_letter,
)
from .errors import DataError

BACKBONE_GEOMETRY = {
    # bond lengths (A) and angles (deg) of the repeating backbone unit
    "n_ca": 1.458,
    "ca_c": 1.525,
    "c_n": 1.329,
    "n_ca_c": 111.2,
    "ca_c_n": 116.2,
    "c_n_ca": 121.7,
}

CANONICAL_DIHEDRALS = {
    "helix": (-57.0, -47.0),
    "sheet": (-120.0, 130.0),
}
TOY_KINDS = ("helix", "sheet", "hairpin", "mixed")


@dataclass
class StructureEntry:
    id: str
    atoms: np.ndarray
    seq: SequenceRecord
    plddt: np.ndarray = None
    provenance: str = "experimental"
    cluster: str = "c0"

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=float)
        n = self.atoms.shape[0]
        if self.atoms.shape != (n, 4, 3):
            raise DataError(f"entry {self.id}: atoms must be (N, 4, 3)")
        if len(self.seq) != n:
            raise DataError(f"entry {self.id}: sequence length mismatch")
        if self.provenance not in ("experimental", "synthetic"):
            raise DataError(f"entry {self.id}: bad provenance {self.provenance!r}")
        if self.provenance == "synthetic":
            if self.plddt is None:
                raise DataError(f"entry {self.id}: synthetic entries need pLDDT")
            self.plddt = np.asarray(self.plddt, dtype=float)
            if self.plddt.shape != (n,):
                raise DataError(f"entry {self.id}: pLDDT length mismatch")
        else:
            # experimental B-factors are resolution-era values, not confidences
            self.plddt = None

    def __len__(self):
        return self.atoms.shape[0]


@dataclass
class StructureDataset:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def lengths(self):
        return [len(e) for e in self.entries]

    def provenances(self):
        return [e.provenance for e in self.entries]


@dataclass
class FilterConfig:
    min_plddt_mean: float = 85.0
    max_plddt_std: float = 15.0
    residue_plddt_threshold: float = 70.0
    max_loop_fraction: float = 0.5
    min_residues: int = 60
    max_residues: int = 384
    rg_coeff: float = 2.5
    rg_exponent: float = 0.4


@dataclass
class FilterReport:
    n_input: int = 0
    n_accepted: int = 0
    reasons: dict = field(default_factory=dict)
    decisions: list = field(default_factory=list)  # (id, accepted, reason)

    def record(self, entry_id, accepted, reason):
        self.decisions.append((entry_id, accepted, reason))
        if accepted:
            self.n_accepted += 1
        else:
            self.reasons[reason] = self.reasons.get(reason, 0) + 1


# ---------------------------------------------------------------------------
# PDB text

def _format_atom_name(name):
    # columns 13-16; element-justified for the four backbone atoms
    return f" {name:<3s}"


def write_pdb(atoms, seq: SequenceRecord, residue_scalar=None, chain_id="A"):
    """Fixed-column ATOM records; residue_scalar lands in the B-factor column."""
    atoms = np.asarray(atoms, dtype=float)
    n = atoms.shape[0]
    if n and (atoms.max() > 9999.999 or atoms.min() < -999.999):
        raise DataError("coordinate overflows the 8.3 PDB column")
    scalars = np.zeros(n) if residue_scalar is None else np.asarray(residue_scalar, dtype=float)
    lines = ["REMARK generated backbone"]
    serial = 1
    for i in range(n):
        resname = "UNK" if seq.tokens[i] == MASK_TOKEN else ONE_TO_THREE[seq.to_letters()[i]]
        for a, atom_name in enumerate(ATOM_NAMES):
            x, y, z = atoms[i, a]
            lines.append(
                f"ATOM  {serial:5d} {_format_atom_name(atom_name)} {resname:<3s} {chain_id}"
                f"{i + 1:4d}    {x:8.3f}{y:8.3f}{z:8.3f}{1.0:6.2f}{scalars[i]:6.2f}"
                f"          {atom_name[0]:>2s}"
            )
            serial += 1
    if n:
        lines.append(f"TER   {serial:5d}      {resname:<3s} {chain_id}{n:4d}")
    lines.append("END")
    return "\n".join(lines) + "\n"


def parse_pdb(text):
    """Extract (atoms, sequence, per-residue B-factor) from one chain.

    Keeps the first model and first chain, first altloc per atom; terminal
    residues missing any of the four backbone atoms are dropped, interior
    ones raise.
    """
    residues = {}  # resseq -> {atom_name: (xyz, bfac)}
    resnames = {}
    order = []
    chain_seen = None
    model_done = False
    for line in text.splitlines():
        if line.startswith("ENDMDL"):
            model_done = True
        if model_done:
            break
        if not line.startswith("ATOM"):
            continue
        name = line[12:16].strip()
        if name not in ATOM_NAMES:
            continue
        altloc = line[16]
        chain = line[21]
        if chain_seen is None:
            chain_seen = chain
        if chain != chain_seen:
            continue
        resseq = int(line[22:26])
        if resseq not in residues:
            residues[resseq] = {}
            resnames[resseq] = line[17:20].strip()
            order.append(resseq)
        if name in residues[resseq]:
            continue  # first altloc wins
        xyz = (float(line[30:38]), float(line[38:46]), float(line[46:54]))
        bfac_str = line[60:66].strip()
        bfac = float(bfac_str) if bfac_str else 0.0
        residues[resseq][name] = (xyz, bfac)
    if not order:
        raise DataError("no ATOM records found")
    # drop incomplete terminal residues only
    while order and set(residues[order[0]]) != set(ATOM_NAMES):
        order.pop(0)
    while order and set(residues[order[-1]]) != set(ATOM_NAMES):
        order.pop()
    if not order:
        raise DataError("no complete residues after trimming termini")
    atoms = np.zeros((len(order), 4, 3))
    bfac = np.zeros(len(order))
    tokens = np.zeros(len(order), dtype=int)
    for i, resseq in enumerate(order):
        got = residues[resseq]
        if set(got) != set(ATOM_NAMES):
            missing = sorted(set(ATOM_NAMES) - set(got))
            raise DataError(f"residue {i} is missing backbone atom(s) {missing}")
        for a, atom_name in enumerate(ATOM_NAMES):
            atoms[i, a] = got[atom_name][0]
        bfac[i] = got["CA"][1]
        letter = THREE_TO_ONE.get(resnames[resseq])
        tokens[i] = MASK_TOKEN if letter is None else token_from_letter(letter)
    return atoms, SequenceRecord(tokens), bfac


# ---------------------------------------------------------------------------
# Filtering

def radius_of_gyration(ca):
    ca = np.asarray(ca, dtype=float)
    centered = ca - ca.mean(axis=0)
    return float(np.sqrt(np.mean(np.sum(centered**2, axis=1))))


def mask_low_plddt(plddt, threshold=70.0):
    """True where a residue's confidence is strictly below the threshold."""
    if plddt is None:
        raise DataError("entry has no pLDDT values")
    return np.asarray(plddt, dtype=float) < threshold


def compactness_proxy(entry: StructureEntry, cfg: FilterConfig = FilterConfig()):
    """Accept unless the radius of gyration exceeds the globularity bound."""
    rg = radius_of_gyration(entry.atoms[:, ATOM_CA])
    bound = cfg.rg_coeff * len(entry) ** cfg.rg_exponent
    if rg > bound:
        return False, f"radius-of-gyration {rg:.1f} > {bound:.1f}"
    return True, "ok"


def filter_global(entry: StructureEntry, cfg: FilterConfig = FilterConfig()):
    """Length bounds, synthetic confidence statistics, and loop fraction."""
    n = len(entry)
    if n < cfg.min_residues:
        return False, f"too short ({n} < {cfg.min_residues})"
    if n > cfg.max_residues:
        return False, f"too long ({n} > {cfg.max_residues})"
    if entry.provenance == "synthetic":
        mean = float(entry.plddt.mean())
        std = float(entry.plddt.std())
        if not mean > cfg.min_plddt_mean:
            return False, f"avg pLDDT {mean:.1f} not above {cfg.min_plddt_mean}"
        if not std < cfg.max_plddt_std:
            return False, f"pLDDT std {std:.1f} not below {cfg.max_plddt_std}"
    if n >= 4:
        from .metrics import assign_secondary

        labels = assign_secondary(entry.atoms)
        loop_fraction = labels.count("C") / n
        if loop_fraction > cfg.max_loop_fraction:
            return False, f"loop fraction {loop_fraction:.2f} > {cfg.max_loop_fraction}"
    return True, "ok"


def run_filter_pipeline(dataset: StructureDataset, cfg: FilterConfig = FilterConfig()):
    """Apply global filter then compactness; masking happens at training time.

    Returns (accepted entries, per-residue exclusion masks, report).
    """
    report = FilterReport(n_input=len(dataset))
    accepted = []
    masks = []
    for entry in dataset:
        ok, reason = filter_global(entry, cfg)
        if ok:
            ok, reason = compactness_proxy(entry, cfg)
        if ok:
            mask = (
                mask_low_plddt(entry.plddt, cfg.residue_plddt_threshold)
                if entry.provenance == "synthetic"
                else np.zeros(len(entry), dtype=bool)
            )
            accepted.append(entry)
            masks.append(mask)
            report.record(entry.id, True, "ok")
        else:
            report.record(entry.id, False, reason)
    return accepted, masks, report


# ---------------------------------------------------------------------------
# Manifests

def write_manifest(path, rows):
    """One entry per line: id, path, provenance, cluster (tab-separated)."""
    with open(path, "w") as fh:
        for row in rows:
            fh.write("\t".join(str(x) for x in row) + "\n")


def read_manifest(path):
    rows = []
    with open(path) as fh:
        for ln, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{path}:{ln + 1}: expected 4 tab-separated fields")
            rows.append(tuple(parts))
    return rows


def load_entry(entry_id, pdb_path, provenance, cluster):
    with open(pdb_path) as fh:
        atoms, seq, bfac = parse_pdb(fh.read())
    plddt = bfac if provenance == "synthetic" else None
    return StructureEntry(entry_id, atoms, seq, plddt, provenance, cluster)


# ---------------------------------------------------------------------------
# Toy structures

def _unit(v):
    return v / np.linalg.norm(v)


def _place_atom(a, b, c, bond, angle_deg, torsion_rad):
    """Extend the chain: position of D with given C-D bond, B-C-D angle, A-B-C-D torsion."""
    theta = math.radians(angle_deg)
    bc = _unit(c - b)
    n = _unit(np.cross(b - a, bc))
    m1 = np.cross(n, bc)
    d_local = bond * np.array(
        [-math.cos(theta), math.sin(theta) * math.cos(torsion_rad), math.sin(theta) * math.sin(torsion_rad)]
    )
    return c + d_local[0] * bc + d_local[1] * m1 + d_local[2] * n


def chain_from_dihedrals(phis, psis, omega_deg=180.0):
    """Build N/CA/C/O coordinates from per-residue (phi, psi) in radians.

    phi of the first residue and psi of the last are ignored (undefined).
    """
    phis = np.asarray(phis, dtype=float)
    psis = np.asarray(psis, dtype=float)
    n = phis.size
    if n < 2 or psis.size != n:
        raise DataError("need matching phi/psi arrays of length >= 2")
    g = BACKBONE_GEOMETRY
    atoms = np.zeros((n, 4, 3))
    # first residue in a canonical pose
    atoms[0, 0] = np.array([0.0, 0.0, 0.0])  # N
    atoms[0, 1] = np.array([g["n_ca"], 0.0, 0.0])  # CA
    ang = math.radians(g["n_ca_c"])
    atoms[0, 2] = atoms[0, 1] + g["ca_c"] * np.array([-math.cos(ang), math.sin(ang), 0.0])
    omega = math.radians(omega_deg)
    for i in range(1, n):
        n_next = _place_atom(
            atoms[i - 1, 0], atoms[i - 1, 1], atoms[i - 1, 2], g["c_n"], g["ca_c_n"], psis[i - 1]
        )
        ca_next = _place_atom(atoms[i - 1, 1], atoms[i - 1, 2], n_next, g["n_ca"], g["c_n_ca"], omega)
        c_next = _place_atom(atoms[i - 1, 2], n_next, ca_next, g["ca_c"], g["n_ca_c"], phis[i])
        atoms[i, 0], atoms[i, 1], atoms[i, 2] = n_next, ca_next, c_next
    # oxygens from each residue's fitted frame; fill placeholders first
    atoms[:, 3] = atoms[:, 2]
    chain = atoms_to_frames(atoms)
    rebuilt = frames_to_atoms(chain)
    atoms = atoms - atoms[:, ATOM_CA].mean(axis=0)
    atoms[:, 3] = atoms[:, 2] + (rebuilt[:, 3] - rebuilt[:, 2])
    return atoms


def toy_generate(kind, length, seed, jitter_deg=2.0):
    """Seeded hermetic structure: canonical dihedrals plus Gaussian jitter."""
    if kind not in TOY_KINDS:
        raise DataError(f"unknown toy kind {kind!r}")
    if length < 4:
        raise DataError("toy structures need length >= 4")
    rng = np.random.default_rng(seed)
    phis = np.zeros(length)
    psis = np.zeros(length)

    def fill(sl, phi_deg, psi_deg):
        phis[sl] = math.radians(phi_deg)
        psis[sl] = math.radians(psi_deg)

    if kind == "helix":
        fill(slice(None), *CANONICAL_DIHEDRALS["helix"])
    elif kind == "sheet":
        fill(slice(None), *CANONICAL_DIHEDRALS["sheet"])
    elif kind == "hairpin":
        half = (length - 2) // 2
        fill(slice(0, half), *CANONICAL_DIHEDRALS["sheet"])
        fill(slice(half, half + 2), 60.0, 30.0)  # tight turn
        fill(slice(half + 2, None), *CANONICAL_DIHEDRALS["sheet"])
    else:  # mixed
        third = length // 3
        fill(slice(0, third), *CANONICAL_DIHEDRALS["helix"])
        fill(slice(third, 2 * third), -150.0, 60.0)  # coil-ish
        fill(slice(2 * third, None), *CANONICAL_DIHEDRALS["sheet"])
    jitter = math.radians(jitter_deg)
    phis += rng.normal(scale=jitter, size=length)
    psis += rng.normal(scale=jitter, size=length)
    atoms = chain_from_dihedrals(phis, psis)
    tokens = rng.integers(0, 20, size=length)
    return atoms, SequenceRecord(tokens)
