"""Trusted-dealer preprocessing: Beaver triples, truncation pairs, bit bundles.

The dealer runs before the online phase, writes one material file per party,
and never sees any online traffic.  Material items are single-use; streams
raise :class:`PreprocessingExhausted` when overdrawn.

File format (all integers little-endian):

    magic "PPFM" | version u16 | p 16B | h u16 | k u16 | lambda u16
    session u64 | party u16 | n_parties u16
    triple_count u64 | bundle_count u64 | bits_per_bundle u16
    shift_group_count u16 | { shift u16, count u64 } per group
    body: triples (a,b,c interleaved), then per shift group (r, r_hi
    interleaved), then bundle bits; every element is a 16-byte field element.

The optional two-dealer mode emits pairs of partial files whose per-party sum
reconstructs the same material ("shares of shares"); parties load both parts
and add them.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fieldfix as ff
from .errors import FormatMismatch, PreprocessingExhausted

_MAGIC = b"PPFM"
_VERSION = 1
_HEAD = struct.Struct("<H16sHHHQHHQQHH")


def lu_mult_bound(l: int) -> int:
    """Elimination-product bound l^3/3 - l^2/2 + l/6 as an exact integer."""
    num = 2 * l**3 - 3 * l**2 + l
    assert num % 6 == 0
    return num // 6


def fj_mult_bound(n_buses: int, gb_public: bool) -> int:
    if gb_public:
        return 4 * n_buses - 4
    return 8 * n_buses**2 - 12 * n_buses


def ls_mults_per_iteration(l: int) -> int:
    return 2 * l + 4


@dataclass
class PreprocessingBudget:
    """Counts of correlated randomness for one protocol run, plus the
    closed-form bound terms used for reporting and assertions."""

    triples: int
    trunc_pairs: dict[int, int]  # shift -> count
    bit_bundles: int
    bits_per_bundle: int
    fj_mults_bound: int = 0
    lu_mults_bound: int = 0
    lu_reciprocals: int = 0
    ls_mults_per_iter: int = 0
    manifest: dict = field(default_factory=dict)

    def dominates(self, other: "PreprocessingBudget") -> bool:
        if self.triples < other.triples or self.bit_bundles < other.bit_bundles:
            return False
        for shift, count in other.trunc_pairs.items():
            if self.trunc_pairs.get(shift, 0) < count:
                return False
        return True

    @property
    def total_trunc_pairs(self) -> int:
        return sum(self.trunc_pairs.values())


def _share(value: int, n: int, rng: random.Random, p: int) -> list[int]:
    frags = [rng.randrange(p) for _ in range(n - 1)]
    frags.append((value - sum(frags)) % p)
    return frags


@dataclass
class Material:
    """One party's correlated randomness, in memory."""

    params: ff.FieldParams
    session_id: int
    party_id: int
    n_parties: int
    triples: list[tuple[int, int, int]]
    trunc: dict[int, list[tuple[int, int]]]
    bundles: list[list[int]]
    bits_per_bundle: int


def deal(budget: PreprocessingBudget, n_parties: int, params: ff.FieldParams,
         seed, session_id: int = 0) -> list[Material]:
    """Generate material for all parties in memory.

    a, b of each triple are uniform over the whole field; truncation masks are
    uniform over mask_bits bits; bundle bits are uniform in {0, 1}.
    """
    if n_parties < 2:
        raise ValueError("need at least two parties")
    rng = random.Random(seed)
    p = params.p
    per_party = [
        Material(params, session_id, i, n_parties, [], {s: [] for s in budget.trunc_pairs},
                 [], budget.bits_per_bundle)
        for i in range(n_parties)
    ]
    for _ in range(budget.triples):
        a = rng.randrange(p)
        b = rng.randrange(p)
        c = a * b % p
        fa, fb, fc = (_share(v, n_parties, rng, p) for v in (a, b, c))
        for i in range(n_parties):
            per_party[i].triples.append((fa[i], fb[i], fc[i]))
    mask_top = 1 << params.mask_bits
    for shift, count in budget.trunc_pairs.items():
        for _ in range(count):
            r = rng.randrange(mask_top)
            fr = _share(r, n_parties, rng, p)
            fhi = _share(r >> shift, n_parties, rng, p)
            for i in range(n_parties):
                per_party[i].trunc[shift].append((fr[i], fhi[i]))
    for _ in range(budget.bit_bundles):
        frag_rows = [[] for _ in range(n_parties)]
        for _ in range(budget.bits_per_bundle):
            bit = rng.randrange(2)
            fb = _share(bit, n_parties, rng, p)
            for i in range(n_parties):
                frag_rows[i].append(fb[i])
        for i in range(n_parties):
            per_party[i].bundles.append(frag_rows[i])
    return per_party


def split_material(mats: list[Material], seed) -> tuple[list[Material], list[Material]]:
    """Two-dealer mode: split each fragment into two uniform partials."""
    rng = random.Random(seed)
    p = mats[0].params.p

    def split_int(v):
        r = rng.randrange(p)
        return r, (v - r) % p

    parts = ([], [])
    for mat in mats:
        halves = [
            Material(mat.params, mat.session_id, mat.party_id, mat.n_parties,
                     [], {s: [] for s in mat.trunc}, [], mat.bits_per_bundle)
            for _ in range(2)
        ]
        for a, b, c in mat.triples:
            (a0, a1), (b0, b1), (c0, c1) = split_int(a), split_int(b), split_int(c)
            halves[0].triples.append((a0, b0, c0))
            halves[1].triples.append((a1, b1, c1))
        for shift, pairs in mat.trunc.items():
            for r, hi in pairs:
                (r0, r1), (h0, h1) = split_int(r), split_int(hi)
                halves[0].trunc[shift].append((r0, h0))
                halves[1].trunc[shift].append((r1, h1))
        for bundle in mat.bundles:
            rows = ([], [])
            for bit in bundle:
                b0, b1 = split_int(bit)
                rows[0].append(b0)
                rows[1].append(b1)
            halves[0].bundles.append(rows[0])
            halves[1].bundles.append(rows[1])
        parts[0].append(halves[0])
        parts[1].append(halves[1])
    return parts


def merge_material(a: Material, b: Material) -> Material:
    """Sum two partial material files (two-dealer reconstruction)."""
    if (a.params.p, a.party_id, a.session_id) != (b.params.p, b.party_id, b.session_id):
        raise FormatMismatch("partial files do not belong together")
    p = a.params.p
    return Material(
        a.params, a.session_id, a.party_id, a.n_parties,
        [tuple((x + y) % p for x, y in zip(ta, tb)) for ta, tb in zip(a.triples, b.triples)],
        {
            s: [((r0 + r1) % p, (h0 + h1) % p)
                for (r0, h0), (r1, h1) in zip(a.trunc[s], b.trunc[s])]
            for s in a.trunc
        },
        [[(x + y) % p for x, y in zip(ba, bb)] for ba, bb in zip(a.bundles, b.bundles)],
        a.bits_per_bundle,
    )


def write_material(mat: Material, path) -> None:
    shifts = sorted(mat.trunc)
    head = _HEAD.pack(
        _VERSION, ff.to_wire(mat.params.p), mat.params.h, mat.params.k,
        mat.params.lambda_stat, mat.session_id, mat.party_id, mat.n_parties,
        len(mat.triples), len(mat.bundles), mat.bits_per_bundle, len(shifts),
    )
    with open(path, "wb") as fh:
        fh.write(_MAGIC + head)
        for s in shifts:
            fh.write(struct.pack("<HQ", s, len(mat.trunc[s])))
        for a, b, c in mat.triples:
            fh.write(ff.to_wire(a) + ff.to_wire(b) + ff.to_wire(c))
        for s in shifts:
            for r, hi in mat.trunc[s]:
                fh.write(ff.to_wire(r) + ff.to_wire(hi))
        for bundle in mat.bundles:
            fh.write(ff.pack_elements(bundle))


def read_material(path, params: ff.FieldParams | None = None) -> Material:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise FormatMismatch(f"{path}: not a material file")
        (version, p_wire, h, k, lam, session, party, n_parties,
         triple_count, bundle_count, bits_per_bundle, n_shifts) = _HEAD.unpack(
            fh.read(_HEAD.size))
        if version != _VERSION:
            raise FormatMismatch(f"{path}: unsupported version {version}")
        p = ff.from_wire(p_wire)
        file_params = ff.FieldParams(p=p, h=h, k=k, lambda_stat=lam)
        if params is not None and (params.p, params.h) != (p, h):
            raise FormatMismatch(f"{path}: field parameters do not match the session")
        groups = [struct.unpack("<HQ", fh.read(10)) for _ in range(n_shifts)]
        triples = []
        for _ in range(triple_count):
            raw = fh.read(48)
            triples.append(
                (ff.from_wire(raw[0:16]), ff.from_wire(raw[16:32]), ff.from_wire(raw[32:48]))
            )
        trunc = {}
        for shift, count in groups:
            pairs = []
            for _ in range(count):
                raw = fh.read(32)
                pairs.append((ff.from_wire(raw[0:16]), ff.from_wire(raw[16:32])))
            trunc[shift] = pairs
        bundles = []
        for _ in range(bundle_count):
            bundles.append(ff.unpack_elements(fh.read(16 * bits_per_bundle)))
    return Material(file_params, session, party, n_parties, triples, trunc,
                    bundles, bits_per_bundle)


def generate(budget: PreprocessingBudget, n_parties: int, params: ff.FieldParams,
             seed, out_dir, session_id: int = 0, dealers: int = 1) -> list[Path]:
    """Generate and write per-party material files; returns the paths.

    With ``dealers=2`` each party gets two partial files (suffix .part0/.part1)
    that must both be loaded and summed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mats = deal(budget, n_parties, params, seed, session_id)
    paths = []
    if dealers == 1:
        for mat in mats:
            path = out / f"party{mat.party_id}.mat"
            write_material(mat, path)
            paths.append(path)
    elif dealers == 2:
        half0, half1 = split_material(mats, seed=str(seed) + "/split")
        for m0, m1 in zip(half0, half1):
            p0 = out / f"party{m0.party_id}.mat.part0"
            p1 = out / f"party{m1.party_id}.mat.part1"
            write_material(m0, p0)
            write_material(m1, p1)
            paths += [p0, p1]
    else:
        raise ValueError("dealers must be 1 or 2")
    return paths


def load_material(party_id: int, directory, params: ff.FieldParams) -> "MaterialStream":
    """Load a party's material (merging two-dealer partials if present)."""
    directory = Path(directory)
    single = directory / f"party{party_id}.mat"
    if single.exists():
        return MaterialStream(read_material(single, params))
    part0 = directory / f"party{party_id}.mat.part0"
    part1 = directory / f"party{party_id}.mat.part1"
    if part0.exists() and part1.exists():
        merged = merge_material(read_material(part0, params), read_material(part1, params))
        return MaterialStream(merged)
    raise FormatMismatch(f"no material for party {party_id} under {directory}")


class MaterialStream:
    """Single-use cursor over one party's material."""

    def __init__(self, mat: Material):
        self._mat = mat
        self._triple_pos = 0
        self._trunc_pos = {s: 0 for s in mat.trunc}
        self._bundle_pos = 0

    @property
    def params(self) -> ff.FieldParams:
        return self._mat.params

    @property
    def session_id(self) -> int:
        return self._mat.session_id

    def next_triples(self, count: int):
        end = self._triple_pos + count
        if end > len(self._mat.triples):
            raise PreprocessingExhausted(
                f"triples exhausted ({len(self._mat.triples)} available)")
        chunk = self._mat.triples[self._triple_pos : end]
        self._triple_pos = end
        a = np.array([t[0] for t in chunk], dtype=object)
        b = np.array([t[1] for t in chunk], dtype=object)
        c = np.array([t[2] for t in chunk], dtype=object)
        return a, b, c

    def next_trunc(self, shift: int, count: int):
        pairs = self._mat.trunc.get(shift)
        pos = self._trunc_pos.get(shift, 0)
        if pairs is None or pos + count > len(pairs):
            raise PreprocessingExhausted(f"truncation pairs for shift {shift} exhausted")
        chunk = pairs[pos : pos + count]
        self._trunc_pos[shift] = pos + count
        r = np.array([t[0] for t in chunk], dtype=object)
        hi = np.array([t[1] for t in chunk], dtype=object)
        return r, hi

    def next_bundle(self) -> np.ndarray:
        if self._bundle_pos >= len(self._mat.bundles):
            raise PreprocessingExhausted("bit bundles exhausted")
        bits = self._mat.bundles[self._bundle_pos]
        self._bundle_pos += 1
        return np.array(bits, dtype=object)

    def remaining(self) -> dict:
        return {
            "triples": len(self._mat.triples) - self._triple_pos,
            "trunc_pairs": {
                s: len(v) - self._trunc_pos[s] for s, v in self._mat.trunc.items()
            },
            "bit_bundles": len(self._mat.bundles) - self._bundle_pos,
        }


def estimate_budget(grid, config, n_parties: int | None = None,
                    margin: float = 0.05) -> PreprocessingBudget:
    """Budget for a full secure run on this grid: dry-run counts plus margin.

    The protocol's control flow is data-independent, so a counting run over a
    plaintext session yields exact consumption; the returned budget pads it and
    carries the closed-form bound terms alongside for reporting.
    """
    from .securepfa import dry_run_counts  # local import to avoid a cycle

    counts = dry_run_counts(grid, config)
    l = 2 * grid.n - 2
    pad = lambda v: int(v + max(8, round(v * margin)))
    return PreprocessingBudget(
        triples=pad(counts["triples"]),
        trunc_pairs={s: pad(v) for s, v in counts["trunc_pairs"].items()},
        bit_bundles=pad(counts["bit_bundles"]),
        bits_per_bundle=counts["bits_per_bundle"],
        fj_mults_bound=fj_mult_bound(grid.n, config.gb_public),
        lu_mults_bound=lu_mult_bound(l),
        lu_reciprocals=l,
        ls_mults_per_iter=ls_mults_per_iteration(l),
        manifest={"exact_counts": counts, "n_parties": n_parties},
    )
