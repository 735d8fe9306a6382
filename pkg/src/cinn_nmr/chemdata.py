"""Binary encodings of carbon skeletons and 13C peak lists.

Structures are upper-triangle adjacency codes over at most 17 carbons;
spectra are 1024 bins of 0.2 ppm, OR-compressed to a 128-bit code.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .numeric import RngStream

MAX_ATOMS = 17
N_PAIRS = MAX_ATOMS * (MAX_ATOMS - 1) // 2  # 136
GRID = 16
N_CHANNELS = 4
N_BINS = 1024
N_CODE = 128
GROUP = N_BINS // N_CODE  # 8
BIN_WIDTH = 0.2
TOP_SHIFT = 204.6
AROMATIC_OFFSET = 5
VALID_CODES = frozenset({0, 1, 2, 3, 6, 7, 8})

# (i, j) for every code position, lexicographic with i < j
PAIRS: tuple[tuple[int, int], ...] = tuple(
    (i, j) for i in range(MAX_ATOMS) for j in range(i + 1, MAX_ATOMS)
)
_PAIR_INDEX = {p: k for k, p in enumerate(PAIRS)}

# cells (r, c) a bond can occupy: r <= c, i.e. atom i=r bonded to j=c+1 > i
PLACEMENT_MASK = np.triu(np.ones((GRID, GRID), dtype=bool))
FORBIDDEN_MASK = np.broadcast_to(~PLACEMENT_MASK, (N_CHANNELS, GRID, GRID)).copy()


class EncodingError(ValueError):
    """Input cannot be represented in the binary structure/spectrum encoding."""


class DatasetFormatError(ValueError):
    """A dataset line does not follow the four-column layout."""

    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        prefix = f"line {line_no}: " if line_no is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True, order=True)
class Bond:
    i: int
    j: int
    order: int = 1
    aromatic: bool = False

    @property
    def code(self) -> int:
        return self.order + (AROMATIC_OFFSET if self.aromatic else 0)


@dataclass(frozen=True)
class BondList:
    """Carbon-carbon bonds of one molecule, atom indices in input order."""

    bonds: frozenset[Bond]
    atom_count: int

    def __init__(self, bonds: Iterable[Bond | tuple] = (), atom_count: int | None = None):
        parsed: set[Bond] = set()
        seen_pairs: set[tuple[int, int]] = set()
        for b in bonds:
            if not isinstance(b, Bond):
                b = Bond(*b)
            i, j = b.i, b.j
            if i == j:
                raise EncodingError(f"self-bond on atom {i}")
            if i > j:
                b = Bond(j, i, b.order, b.aromatic)
                i, j = j, i
            if i < 0 or j >= MAX_ATOMS:
                raise EncodingError(f"atom index out of range in bond ({i},{j})")
            if b.order not in (1, 2, 3):
                raise EncodingError(f"bond ({i},{j}) has order {b.order}, expected 1, 2 or 3")
            if (i, j) in seen_pairs:
                raise EncodingError(f"duplicate bond ({i},{j})")
            seen_pairs.add((i, j))
            parsed.add(Bond(i, j, b.order, bool(b.aromatic)))
        inferred = max((b.j for b in parsed), default=-1) + 1
        if atom_count is None:
            atom_count = inferred
        if atom_count > MAX_ATOMS or atom_count < inferred:
            raise EncodingError(f"atom_count {atom_count} inconsistent with bonds (needs {inferred}..{MAX_ATOMS})")
        object.__setattr__(self, "bonds", frozenset(parsed))
        object.__setattr__(self, "atom_count", atom_count)

    def __len__(self) -> int:
        return len(self.bonds)

    def __iter__(self) -> Iterator[Bond]:
        return iter(sorted(self.bonds))

    def degrees(self) -> list[int]:
        deg = [0] * max(self.atom_count, 1)
        for b in self.bonds:
            deg[b.i] += 1
            deg[b.j] += 1
        return deg


# --------------------------------------------------------------------------
# structures


def bonds_to_channels(bonds: BondList) -> np.ndarray:
    """4x16x16 binary tensor: channel ``order-1`` at cell (i, j-1), channel 3 if aromatic."""
    x = np.zeros((N_CHANNELS, GRID, GRID), dtype=np.float32)
    for b in bonds.bonds:
        if b.order not in (1, 2, 3):
            raise EncodingError(f"bond order {b.order} outside 1..3")
        x[b.order - 1, b.i, b.j - 1] = 1
        if b.aromatic:
            x[3, b.i, b.j - 1] = 1
    return x


def channels_to_bonds(x: np.ndarray, threshold: float = 0.5) -> BondList:
    """Decode a (possibly real-valued) channel tensor back into bonds.

    A cell on or above the diagonal becomes a bond when any of channels 0-2
    exceeds ``threshold``; the order is the argmax over those channels.
    """
    x = np.asarray(x)
    if x.shape != (N_CHANNELS, GRID, GRID):
        raise EncodingError(f"expected shape (4, 16, 16), got {x.shape}")
    orders = x[:3]
    present = (orders > threshold).any(axis=0) & PLACEMENT_MASK
    best = orders.argmax(axis=0)
    bonds = [
        Bond(int(r), int(c) + 1, int(best[r, c]) + 1, bool(x[3, r, c] > threshold))
        for r, c in zip(*np.nonzero(present))
    ]
    return BondList(bonds)


def bonds_to_code(bonds: BondList) -> np.ndarray:
    code = np.zeros(N_PAIRS, dtype=np.uint8)
    for b in bonds.bonds:
        code[_PAIR_INDEX[(b.i, b.j)]] = b.code
    return code


def code_to_bonds(code: Sequence[int]) -> BondList:
    code = np.asarray(code)
    if code.shape != (N_PAIRS,):
        raise EncodingError(f"bond code must have {N_PAIRS} entries, got {code.shape}")
    bonds = []
    for k in np.nonzero(code)[0]:
        c = int(code[k])
        if c not in VALID_CODES:
            raise EncodingError(f"illegal bond code {c} at pair {PAIRS[k]}")
        aromatic = c > AROMATIC_OFFSET
        bonds.append(Bond(*PAIRS[k], c - AROMATIC_OFFSET if aromatic else c, aromatic))
    return BondList(bonds)


def code_to_channels(code: Sequence[int]) -> np.ndarray:
    return bonds_to_channels(code_to_bonds(code))


# --------------------------------------------------------------------------
# spectra


def shift_to_bin(shift: float) -> int:
    if not math.isfinite(shift):
        raise EncodingError(f"non-finite chemical shift {shift!r}")
    if shift < 0:
        return 0
    if shift >= TOP_SHIFT:
        return N_BINS - 1
    # round before floor: 23.2 / 0.2 evaluates to 115.999... in binary floating point
    return min(N_BINS - 2, math.floor(round(shift / BIN_WIDTH, 9)) + 1)


def bin_peaks(shifts: Iterable[float]) -> np.ndarray:
    bins = np.zeros(N_BINS, dtype=np.uint8)
    for s in shifts:
        bins[shift_to_bin(float(s))] = 1
    return bins


def compress_code(bins: np.ndarray) -> np.ndarray:
    """OR together each run of 8 consecutive bins."""
    bins = np.asarray(bins)
    if bins.shape[-1] != N_BINS:
        raise EncodingError(f"expected {N_BINS} bins, got {bins.shape[-1]}")
    return (bins.reshape(*bins.shape[:-1], N_CODE, GROUP) != 0).any(axis=-1).astype(np.uint8)


# --------------------------------------------------------------------------
# dataset rows


@dataclass(frozen=True, eq=False)
class DatasetRow:
    molecule_id: int
    spectrum_id: int
    bond_code: np.ndarray  # (136,) uint8
    bins: np.ndarray  # (1024,) uint8

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetRow):
            return NotImplemented
        return (
            self.molecule_id == other.molecule_id
            and self.spectrum_id == other.spectrum_id
            and np.array_equal(self.bond_code, other.bond_code)
            and np.array_equal(self.bins, other.bins)
        )

    __hash__ = None

    @property
    def bonds(self) -> BondList:
        return code_to_bonds(self.bond_code)

    @property
    def channels(self) -> np.ndarray:
        return code_to_channels(self.bond_code)

    @property
    def code(self) -> np.ndarray:
        return compress_code(self.bins)


def _digits(text: str, allowed: str, length: int, field_name: str, line_no) -> np.ndarray:
    if len(text) != length:
        raise DatasetFormatError(f"field {field_name} has {len(text)} characters, expected {length}", line_no)
    bad = set(text) - set(allowed)
    if bad:
        raise DatasetFormatError(f"field {field_name} contains illegal characters {sorted(bad)}", line_no)
    return np.frombuffer(text.encode("ascii"), dtype=np.uint8) - ord("0")


def parse_row(line: str, line_no: int | None = None, split_bond_cells: bool = False) -> DatasetRow:
    """Parse one ``molecule,spectrum,bondcode,bins`` line.

    With ``split_bond_cells`` the 136 bond codes are separate comma fields.
    """
    fields = [f.strip() for f in line.strip().split(",")]
    expected = 3 + N_PAIRS if split_bond_cells else 4
    if len(fields) != expected:
        raise DatasetFormatError(f"expected {expected} fields, found {len(fields)}", line_no)
    try:
        mol_id, spec_id = int(fields[0]), int(fields[1])
    except ValueError:
        raise DatasetFormatError("molecule/spectrum ids must be integers", line_no) from None
    bond_text = "".join(fields[2:-1]) if split_bond_cells else fields[2]
    if split_bond_cells and any(len(f) != 1 for f in fields[2:-1]):
        raise DatasetFormatError("field C cells must be single digits", line_no)
    code = _digits(bond_text, "0123678", N_PAIRS, "C (bond code)", line_no)
    bins = _digits(fields[-1], "01", N_BINS, "D (spectrum bins)", line_no)
    return DatasetRow(mol_id, spec_id, code, bins)


def serialize_row(row: DatasetRow, split_bond_cells: bool = False) -> str:
    code = "".join(map(str, row.bond_code.tolist()))
    if split_bond_cells:
        code = ",".join(code)
    bins = "".join(map(str, row.bins.tolist()))
    return f"{row.molecule_id},{row.spectrum_id},{code},{bins}"


def read_dataset(path, header: bool = False, split_bond_cells: bool = False) -> list[DatasetRow]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if header and line_no == 1:
                continue
            if not line.strip():
                continue
            rows.append(parse_row(line, line_no, split_bond_cells))
    return rows


def format_dataset(rows: Iterable[DatasetRow], split_bond_cells: bool = False) -> str:
    return "".join(serialize_row(r, split_bond_cells) + "\n" for r in rows)


def make_row(molecule_id: int, spectrum_id: int, bonds: BondList, shifts: Iterable[float]) -> DatasetRow:
    return DatasetRow(molecule_id, spectrum_id, bonds_to_code(bonds), bin_peaks(shifts))


def rows_to_arrays(rows: Sequence[DatasetRow]) -> tuple[np.ndarray, np.ndarray]:
    """Stack rows into network inputs ``[N,4,16,16]`` and target codes ``[N,128]``."""
    x = np.stack([r.channels for r in rows]).astype(np.float32) if rows else np.zeros((0, 4, 16, 16), np.float32)
    codes = compress_code(np.stack([r.bins for r in rows])) if rows else np.zeros((0, N_CODE), np.uint8)
    return x, codes


# --------------------------------------------------------------------------
# entropy


def _binary_entropy(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(p * np.log2(p) + (1 - p) * np.log2(1 - p))
    return np.where((p > 0) & (p < 1), h, 0.0)


def cell_entropy(x: np.ndarray) -> float:
    """Sum of per-cell binary entropies (bits) over samples ``x[N, ...]``."""
    x = np.asarray(x)
    if x.shape[0] == 0:
        raise ValueError("entropy of an empty dataset is undefined")
    p = (x.reshape(x.shape[0], -1) != 0).mean(axis=0)
    return float(_binary_entropy(p).sum())


def estimate_entropy(rows: Sequence[DatasetRow]) -> float:
    """Rough input entropy: independent binary entropy of each of the 1024 cells."""
    if not rows:
        raise ValueError("entropy of an empty dataset is undefined")
    return cell_entropy(np.stack([r.channels for r in rows]))


# --------------------------------------------------------------------------
# synthetic surrogate data

_ORDER_WEIGHTS = np.array([0.72, 0.2, 0.08])
_AROMATIC_RATE = 0.15


def pseudo_shift(order: int, aromatic: bool, degree_sum: int) -> float:
    """Deterministic surrogate shift in [0, 204.6) for a bond environment."""
    digest = hashlib.blake2b(f"{order}|{int(aromatic)}|{degree_sum}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") / 2**64 * TOP_SHIFT


def surrogate_shifts(bonds: BondList) -> list[float]:
    deg = bonds.degrees()
    return [pseudo_shift(b.order, b.aromatic, deg[b.i] + deg[b.j]) for b in bonds]


def _random_tree(rng: np.random.Generator) -> BondList:
    n_atoms = int(rng.integers(3, MAX_ATOMS + 1))
    valence = [4] * n_atoms
    bonds = []
    for child in range(1, n_atoms):
        parents = [a for a in range(child) if valence[a] > 0]
        parent = int(rng.choice(parents))
        cap = min(valence[parent], 3)
        w = _ORDER_WEIGHTS[:cap] / _ORDER_WEIGHTS[:cap].sum()
        order = int(rng.choice(cap, p=w)) + 1
        aromatic = order < 3 and bool(rng.random() < _AROMATIC_RATE)
        valence[parent] -= order
        valence[child] -= order
        bonds.append(Bond(parent, child, order, aromatic))
    return BondList(bonds, n_atoms)


def synth_dataset(n: int, seed: int) -> list[DatasetRow]:
    """Random acyclic carbon skeletons of 3-17 atoms with surrogate spectra.

    Every bond contributes one pseudo-shift keyed on its order, aromatic flag
    and the summed degree of its atoms, so spectra are a function of structure.
    """
    if n < 1:
        raise ValueError("synth_dataset needs n >= 1")
    root = RngStream(seed)
    rows = []
    for k in range(n):
        bonds = _random_tree(root.substream(k).generator())
        rows.append(make_row(k + 1, k + 1, bonds, surrogate_shifts(bonds)))
    return rows
