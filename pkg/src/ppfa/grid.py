"""Grid data model, JSON ingestion, admittance assembly and estimation, and
the pivot-safety certificate that justifies pivot-free elimination.

The grid file schema (see README for the field-by-field description):

    {
      "id": "two-bus",
      "v_nominal": 230.0,
      "buses": [
        {"id": 0, "slack": true,  "p": 0.0, "q": 0.0,
         "v_min": 207.0, "v_max": 253.0, "prosumer": false},
        {"id": 1, "p": -1000.0, "q": -200.0, "prosumer": true, ...}
      ],
      "branches": [
        {"from": 0, "to": 1, "g": 10.0, "b": -20.0,
         "shunt_g": 0.0, "shunt_b": 0.0, "i_max": 50.0}
      ]
    }

``p``/``q`` are injections in W/var (loads are negative).  ``shunt_g/b`` is
the per-end shunt added to each terminal's diagonal.  Branch current limits
apply to the series current |y_series (v_from - v_to)|.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import (
    CertificateFail,
    DimensionMismatch,
    DisconnectedGraph,
    RankDeficient,
    SchemaError,
    SlackMissing,
)


@dataclass
class Branch:
    f: int
    t: int
    g: float
    b: float
    shunt_g: float = 0.0
    shunt_b: float = 0.0
    i_max: float = float("inf")


@dataclass
class GridModel:
    grid_id: str
    n: int
    slack: int
    G: np.ndarray
    B: np.ndarray
    p0: np.ndarray
    q0: np.ndarray
    v_nominal: float
    v_min: np.ndarray
    v_max: np.ndarray
    branches: list[Branch] = field(default_factory=list)
    prosumers: list[int] = field(default_factory=list)

    @property
    def Y(self) -> np.ndarray:
        return self.G + 1j * self.B

    @property
    def non_slack(self) -> np.ndarray:
        return np.array([i for i in range(self.n) if i != self.slack])

    def reduced_indices(self) -> np.ndarray:
        """State indices kept after removing the slack rows/columns: the
        non-slack real parts followed by the non-slack imaginary parts."""
        ns = self.non_slack
        return np.concatenate([ns, ns + self.n])


def assemble_admittance(n: int, branches: list[Branch]):
    G = np.zeros((n, n))
    B = np.zeros((n, n))
    for br in branches:
        for i, j in ((br.f, br.t), (br.t, br.f)):
            G[i, j] -= br.g
            B[i, j] -= br.b
            G[i, i] += br.g + br.shunt_g
            B[i, i] += br.b + br.shunt_b
    return G, B


def load_grid(path) -> GridModel:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read grid file: {exc}") from exc
    return grid_from_dict(doc)


def grid_from_dict(doc: dict) -> GridModel:
    for key in ("buses", "branches", "v_nominal"):
        if key not in doc:
            raise SchemaError(f"missing top-level key {key!r}")
    buses = doc["buses"]
    if not isinstance(buses, list) or not buses:
        raise SchemaError("buses must be a non-empty list")
    n = len(buses)
    ids = [b.get("id") for b in buses]
    if sorted(ids) != list(range(n)):
        raise SchemaError("bus ids must be 0..n-1")
    order = np.argsort(ids)
    buses = [buses[i] for i in order]

    slacks = [b["id"] for b in buses if b.get("slack")]
    if len(slacks) != 1:
        raise SlackMissing(f"expected exactly one slack bus, found {len(slacks)}")
    slack = slacks[0]

    v_nom = float(doc["v_nominal"])
    p0 = np.array([float(b.get("p", 0.0)) for b in buses])
    q0 = np.array([float(b.get("q", 0.0)) for b in buses])
    v_min = np.array([float(b.get("v_min", 0.9 * v_nom)) for b in buses])
    v_max = np.array([float(b.get("v_max", 1.1 * v_nom)) for b in buses])
    prosumers = [b["id"] for b in buses if b.get("prosumer")]

    branches = []
    for raw in doc["branches"]:
        try:
            br = Branch(
                f=int(raw["from"]), t=int(raw["to"]),
                g=float(raw["g"]), b=float(raw["b"]),
                shunt_g=float(raw.get("shunt_g", 0.0)),
                shunt_b=float(raw.get("shunt_b", 0.0)),
                i_max=float(raw.get("i_max", float("inf"))),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad branch record {raw!r}: {exc}") from exc
        if not (0 <= br.f < n and 0 <= br.t < n) or br.f == br.t:
            raise SchemaError(f"branch endpoints out of range: {raw!r}")
        branches.append(br)

    # connectivity from the slack
    adj = {i: set() for i in range(n)}
    for br in branches:
        adj[br.f].add(br.t)
        adj[br.t].add(br.f)
    seen, stack = {slack}, [slack]
    while stack:
        for j in adj[stack.pop()]:
            if j not in seen:
                seen.add(j)
                stack.append(j)
    if len(seen) != n:
        raise DisconnectedGraph(f"buses {sorted(set(range(n)) - seen)} unreachable")

    G, B = assemble_admittance(n, branches)
    return GridModel(
        grid_id=str(doc.get("id", "grid")), n=n, slack=slack, G=G, B=B,
        p0=p0, q0=q0, v_nominal=v_nom, v_min=v_min, v_max=v_max,
        branches=branches, prosumers=prosumers,
    )


BUNDLED_GRIDS = ("two_bus", "two_bus_stressed", "two_bus_dc", "three_bus",
                 "ten_bus", "rural18")


def bundled_grid(name: str) -> GridModel:
    """Load one of the desk grids shipped with the package."""
    if name not in BUNDLED_GRIDS:
        raise SchemaError(f"unknown bundled grid {name!r}; have {BUNDLED_GRIDS}")
    text = resources.files("ppfa.grids").joinpath(f"{name}.json").read_text()
    return grid_from_dict(json.loads(text))


def check_constraints(v_mag, i_branch, grid: GridModel) -> dict:
    """Inclusive operating-limit flags per bus and per branch."""
    v_mag = np.asarray(v_mag, dtype=float)
    i_branch = np.asarray(i_branch, dtype=float)
    if v_mag.shape != (grid.n,) or i_branch.shape != (len(grid.branches),):
        raise DimensionMismatch("constraint check inputs do not match the grid")
    bus_low = v_mag < grid.v_min
    bus_high = v_mag > grid.v_max
    i_max = np.array([br.i_max for br in grid.branches])
    branch_over = i_branch > i_max
    return {
        "bus_undervoltage": np.nonzero(bus_low)[0].tolist(),
        "bus_overvoltage": np.nonzero(bus_high)[0].tolist(),
        "branch_overload": np.nonzero(branch_over)[0].tolist(),
        "any": bool(bus_low.any() or bus_high.any() or branch_over.any()),
    }


# --- admittance estimation ----------------------------------------------------


def stacked_w_matrix(G: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.block([[G, -B], [B, G]])


def voltage_selector(x: np.ndarray) -> np.ndarray:
    """The 2N x 2N matrix mapping currents to powers at state x."""
    n = x.size // 2
    vr, vi = np.diag(x[:n]), np.diag(x[n:])
    return np.block([[vr, vi], [vi, -vr]])


def estimate_admittance(x_samples, w_samples, mode: str = "currents") -> np.ndarray:
    """Least-squares recovery of W = [[G, -B], [B, G]] from measurements.

    ``x_samples``: (T+1, 2N) voltage states.  ``w_samples``: (T+1, 2N)
    stacked currents (mode="currents") or stacked powers (mode="powers").
    Solved with an SVD least squares; raises RankDeficient when the stacked
    regressors do not span.
    """
    x_samples = np.asarray(x_samples, dtype=float)
    w_samples = np.asarray(w_samples, dtype=float)
    if x_samples.shape != w_samples.shape or x_samples.ndim != 2:
        raise DimensionMismatch("sample blocks must both be (T+1, 2N)")
    t_plus_1, two_n = x_samples.shape
    if two_n % 2:
        raise DimensionMismatch("state dimension must be even")
    if mode not in ("currents", "powers"):
        raise ValueError(f"unknown mode {mode!r}")

    rows = []
    rhs = []
    eye = np.eye(two_n)
    for x, w in zip(x_samples, w_samples):
        sel = eye if mode == "currents" else voltage_selector(x)
        rows.append(np.kron(x[None, :], sel))
        rhs.append(w)
    a = np.vstack(rows)
    b = np.concatenate(rhs)
    solution, _, rank, _ = np.linalg.lstsq(a, b, rcond=None)
    if rank < two_n * two_n:
        raise RankDeficient(
            f"regressors span rank {rank} < {two_n * two_n}; add measurements"
        )
    return solution.reshape(two_n, two_n, order="F")


def split_w_matrix(w: np.ndarray):
    two_n = w.shape[0]
    n = two_n // 2
    return w[:n, :n].copy(), w[n:, :n].copy()


# --- pivot-omission certificate -------------------------------------------------


def build_K(G: np.ndarray, B: np.ndarray) -> np.ndarray:
    """The matrix whose rows generate the Jacobian diagonal: diag(J) = K x."""
    G = np.asarray(G, dtype=float)
    B = np.asarray(B, dtype=float)
    if G.shape != B.shape or G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise DimensionMismatch("G and B must be square and equally sized")
    dg, db = np.diag(np.diag(G)), np.diag(np.diag(B))
    return np.block([[G + dg, -B + db], [G - dg, -B - db]])


@dataclass
class OperatingBox:
    """Axis-aligned box for the state x = (v_R, v_I)."""

    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def from_limits(cls, grid: GridModel, vi_frac: float = 0.1) -> "OperatingBox":
        """Box from the voltage limits: v_R within [V_min, V_max], v_I within
        +-vi_frac * v_nominal; the slack coordinates are pinned."""
        lo = np.concatenate([grid.v_min, -vi_frac * grid.v_nominal * np.ones(grid.n)])
        hi = np.concatenate([grid.v_max, vi_frac * grid.v_nominal * np.ones(grid.n)])
        lo[grid.slack] = hi[grid.slack] = grid.v_nominal
        lo[grid.n + grid.slack] = hi[grid.n + grid.slack] = 0.0
        return cls(lo=lo, hi=hi)

    def scaled(self, factor: float) -> "OperatingBox":
        return OperatingBox(lo=self.lo * factor, hi=self.hi * factor)


def _row_range_over_box(row: np.ndarray, box: OperatingBox):
    lo = np.where(row >= 0, row * box.lo, row * box.hi).sum()
    hi = np.where(row >= 0, row * box.hi, row * box.lo).sum()
    return lo, hi


def row_min_abs(row: np.ndarray, box: OperatingBox) -> float:
    """min |row . x| over the box; attained on the boundary, closed form."""
    lo, hi = _row_range_over_box(row, box)
    if lo <= 0.0 <= hi:
        return 0.0
    return min(abs(lo), abs(hi))


def slack_margin(row: np.ndarray, box: OperatingBox, eps: float) -> float:
    """sigma* of the feasibility program: positive iff |row . x| > eps on the box."""
    return max(0.0, row_min_abs(row, box) - eps)


def pivot_certificate(K: np.ndarray, box: OperatingBox, eps_floor: float = 1e-9,
                      refine_steps: int = 40, rows=None) -> dict:
    """Certified distance of diag(J) from zero over the operating box.

    Requires det(K) != 0; per row, binary-searches the largest eps whose
    slack program stays strictly feasible (sigma* > 0).  Fails when some
    row cannot be bounded away from zero even at the floor epsilon.
    """
    K = np.asarray(K, dtype=float)
    if K.shape[0] != K.shape[1]:
        raise DimensionMismatch("K must be square")
    if K.shape[0] != box.lo.size:
        raise DimensionMismatch("box dimension does not match K")
    sigma = np.linalg.svd(K, compute_uv=False)
    if sigma[0] == 0.0 or sigma[-1] / sigma[0] < 1e-12:
        raise CertificateFail("det(K) ~ 0: the Jacobian diagonal can vanish")
    rows = range(K.shape[0]) if rows is None else rows
    per_row = {}
    for i in rows:
        if slack_margin(K[i], box, eps_floor) <= 0.0:
            raise CertificateFail(f"row {i}: diagonal not separated from zero")
        lo_eps, hi_eps = eps_floor, abs(_row_range_over_box(K[i], box)[1]) + abs(
            _row_range_over_box(K[i], box)[0]
        ) + 1.0
        for _ in range(refine_steps):
            mid = 0.5 * (lo_eps + hi_eps)
            if slack_margin(K[i], box, mid) > 0.0:
                lo_eps = mid
            else:
                hi_eps = mid
        per_row[int(i)] = lo_eps
    bound = min(per_row.values())
    return {"bound": bound, "per_row": per_row}


def regularize(J: np.ndarray, e: float, tol: float = 1e-6, max_iter: int = 500):
    """J + delta I with delta = e / ||J||_2 (power-iteration estimate)."""
    if e <= 0:
        raise ValueError("e must be positive")
    J = np.asarray(J, dtype=float)
    n = J.shape[0]
    v = np.ones(n) / np.sqrt(n)
    sigma = 0.0
    jtj = J.T @ J
    for _ in range(max_iter):
        w = jtj @ v
        nxt = np.linalg.norm(w)
        if nxt == 0.0:
            break
        v = w / nxt
        if abs(np.sqrt(nxt) - sigma) <= tol * max(sigma, 1.0):
            sigma = np.sqrt(nxt)
            break
        sigma = np.sqrt(nxt)
    delta = e / sigma if sigma > 0 else e
    return J + delta * np.eye(n), delta


# --- measurement CSV -------------------------------------------------------------


def load_measurements(path, n_buses: int):
    """Measurement CSV: per row v_R[0..N), v_I[0..N), then 2N currents or powers."""
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    if data.shape[1] != 4 * n_buses:
        raise SchemaError(
            f"expected {4 * n_buses} columns (2N voltages + 2N signals), "
            f"got {data.shape[1]}"
        )
    return data[:, : 2 * n_buses], data[:, 2 * n_buses :]
