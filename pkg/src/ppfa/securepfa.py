"""The secure power-flow protocol: Newton iterations on shares.

Every party runs the identical program over its ABB session; communication
happens only inside the batched ABB openings.  The program's control flow is
data-independent: the operation sequence is a function of the grid topology,
the solver choice, and the fixed iteration counts only, never of load values.

The protocol consumes a :class:`Calibration` produced by a plaintext
preparation pass: the fixed Newton iteration count, the line-search residual
scaling exponent, the pivot-safety certificate, and per-call-site ranges,
signs, and power-of-two rescales for every shared reciprocal / inverse-sqrt.
Calibration data is public in the same sense as the preconditioner
P = J(x0)^-1: it derives from the public grid model and configured load
envelopes, not from the secret inputs of a run.

All secure arithmetic is per-unit (voltages over v_nominal, powers over
v_nominal^2), which keeps fixed-point intermediates inside the maskable band;
revealed results are rescaled to physical units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import pfcore as pf
from .errors import CertificateMissing, UnsupportedSolver
from .grid import GridModel, OperatingBox, build_K, pivot_certificate


@dataclass
class SecureSessionConfig:
    """Public knobs of a secure run; must be identical at every party."""

    solver: str = "lu"
    gb_public: bool = True
    gb_symmetric: bool = True
    newton_iters: int | None = None  # None: calibrated
    line_search: bool = True
    ls_iters: int = 3
    eta0: float = 1.0
    eta1: float = 0.99
    epsilon_exp: int | None = None  # None: calibrated
    gmres_m: int | None = None  # None: calibrated
    check_constraints: bool = False
    # calibration sweep
    # calibration load envelope: keep it a realistic forecast band; widely
    # heterogeneous envelopes mix converged and unconverged sweep samples at
    # the same protocol step, which starves the GMRES norm windows
    calib_samples: int = 6
    calib_seed: int = 20240
    load_scale_lo: float = 0.85
    load_scale_hi: float = 1.15
    range_pad: float = 4.0
    gmres_tol: float = 1e-10
    gmres_schedule_tol: float = 2.0**-12  # Krylov depth fixed point can resolve
    convergence_tol: float = 1e-12

    def __post_init__(self):
        if self.solver not in ("lu", "gmres"):
            raise UnsupportedSolver(self.solver)
        if self.solver == "gmres" and not self.gb_public:
            raise UnsupportedSolver(
                "the GMRES path requires public G,B (its public preconditioner "
                "is built from them)"
            )


@dataclass
class RangeSite:
    sign: int
    lo: float
    hi: float
    scale: int = 0


@dataclass
class Calibration:
    """Public per-grid protocol parameters from the plaintext preparation."""

    newton_iters: int
    epsilon_exp: int
    gmres_schedule: list  # Krylov iterations per Newton step
    cert_bound: float
    vi_frac: float
    recip_sites: list = field(default_factory=list)
    sqrt_sites: list = field(default_factory=list)
    recording: bool = False
    _recip_values: list = field(default_factory=list)
    _sqrt_values: list = field(default_factory=list)

    def record_recip(self, idx: int, value: float) -> None:
        while idx >= len(self._recip_values):
            self._recip_values.append([])
        self._recip_values[idx].append(value)

    def record_sqrt(self, idx: int, value: float) -> None:
        while idx >= len(self._sqrt_values):
            self._sqrt_values.append([])
        self._sqrt_values[idx].append(value)

    def to_dict(self) -> dict:
        return {
            "newton_iters": self.newton_iters,
            "epsilon_exp": self.epsilon_exp,
            "gmres_schedule": list(self.gmres_schedule),
            "cert_bound": self.cert_bound,
            "vi_frac": self.vi_frac,
            "recip_sites": [vars(s) for s in self.recip_sites],
            "sqrt_sites": [vars(s) for s in self.sqrt_sites],
        }


def _site_from_values(values, pad: float, is_sqrt: bool, ceiling: float) -> RangeSite:
    """Range/sign/rescale for one call site from its recorded sweep values.

    Sites whose sweep values reach the numerical noise floor (line-search
    denominators and GMRES norms after convergence) get a wide fallback
    window up to ``ceiling``.  The Newton iterations never overshoot, so a
    below-range operand yields a publicly bounded result (which a vanishing
    numerator then nullifies); an above-range operand would diverge, hence
    the window top must dominate every reachable magnitude.
    """
    arr = np.asarray(values, dtype=float)
    if is_sqrt:
        # squared norms: the vector is pre-scaled before squaring, so even
        # tiny-but-consistent magnitudes resolve; only quantization-level
        # values are true noise
        sign = 1
        mags = arr[arr > 0.0]
        noise_floor, lo_floor = 2.0**-34, 2.0**-38
        mixed = False
    else:
        # reciprocal operands live at fixed scale h: below ~2**-18 the output
        # would leave the product band anyway
        pos = int((arr > 0).sum())
        neg = int((arr < 0).sum())
        sign = 1 if pos >= neg else -1
        mags = np.abs(arr[np.sign(arr) == sign])
        noise_floor, lo_floor = 2.0**-18, 2.0**-12
        mixed = pos > 0 and neg > 0
    suspect = mags.size == 0 or float(mags.min()) < noise_floor or mixed
    if suspect:
        hi = max(ceiling, 1.0)
        lo = max(2.0**-20 if is_sqrt else lo_floor, hi * 2.0**-18)
    else:
        # marginal magnitudes drift further under fixed-point cancellation
        # noise, so widen their window accordingly
        pad_eff = pad if float(mags.min()) >= 2.0**-24 else max(pad, 64.0)
        hi = float(mags.max()) * pad_eff
        lo = max(float(mags.min()) / pad_eff, hi * 2.0**-18, lo_floor)
        hi = max(hi, 4.0 * lo)
    scale = 0
    if is_sqrt:
        # recenter near 1 with a public power of two; the operand the secure
        # path sees is v * 2**(2 scale) because the vector is pre-scaled
        center = math.sqrt(lo * hi)
        scale = int(round(-0.5 * math.log2(center)))
        scale = max(min(scale, 20), -20)
        lo *= 2.0 ** (2 * scale)
        hi *= 2.0 ** (2 * scale)
    return RangeSite(sign=sign, lo=lo, hi=hi, scale=scale)


class SecurePfa:
    """One party's secure Newton power-flow program."""

    def __init__(self, session, grid: GridModel, cfg: SecureSessionConfig,
                 cal: Calibration):
        if cal is None:
            raise CertificateMissing("secure runs need a calibration record")
        self.s = session
        self.grid = grid
        self.cfg = cfg
        self.cal = cal
        self.v_base = grid.v_nominal
        self.n = grid.n
        self.ns = grid.non_slack
        self.m = grid.n - 1
        self.l = 2 * grid.n - 2
        self.cache_hits = 0
        self.gb_shared = None
        if cfg.solver == "gmres":
            # preconditioner for the per-unit system J_hat = J_phys / v_base
            self.precond = pf.make_preconditioner(grid) * self.v_base
        else:
            self.precond = None
        self._recip_idx = 0
        self._sqrt_idx = 0

    # ---- composites with calibrated sites -------------------------------------------

    def _reciprocal(self, d):
        idx, self._recip_idx = self._recip_idx, self._recip_idx + 1
        if self.cal.recording:
            assert self.s.is_counting, "recording needs the counting session"
            self.cal.record_recip(idx, float(d.value))
            return self.s.exact_reciprocal(d)
        site = self.cal.recip_sites[idx]
        ds = self.s.mul_public(d, site.sign)
        rec = self.s.reciprocal(ds, (site.lo, site.hi))
        return rec if site.sign == 1 else self.s.mul_public(rec, -1)

    def _norm_invsqrt(self, w):
        """Returns (scaled w, squared norm of it, 1/sqrt of that, scale)."""
        idx, self._sqrt_idx = self._sqrt_idx, self._sqrt_idx + 1
        if self.cal.recording:
            assert self.s.is_counting
            self.cal.record_sqrt(idx, float(w.value @ w.value))
            nrm2 = self.s.dot(w, w)
            return w, nrm2, self.s.exact_inv_sqrt(nrm2), 0
        site = self.cal.sqrt_sites[idx]
        ws = self.s.scale_pow2(w, site.scale)
        nrm2 = self.s.dot(ws, ws)
        y = self.s.inv_sqrt(nrm2, (site.lo, site.hi))
        return ws, nrm2, y, site.scale

    def _invsqrt_squared(self, sq):
        """Inverse sqrt of an already-squared shared magnitude."""
        idx, self._sqrt_idx = self._sqrt_idx, self._sqrt_idx + 1
        if self.cal.recording:
            assert self.s.is_counting
            self.cal.record_sqrt(idx, float(sq.value))
            return self.s.exact_inv_sqrt(sq), 0
        site = self.cal.sqrt_sites[idx]
        sq_s = self.s.scale_pow2(sq, 2 * site.scale)
        return self.s.inv_sqrt(sq_s, (site.lo, site.hi)), site.scale

    # ---- inputs ----------------------------------------------------------------------

    @staticmethod
    def bus_owners(grid: GridModel, n_parties: int) -> dict[int, int]:
        """Public round-robin assignment of load buses to parties."""
        owned = [b for b in range(grid.n)
                 if b in grid.prosumers or grid.p0[b] != 0.0 or grid.q0[b] != 0.0]
        return {b: idx % n_parties for idx, b in enumerate(owned)}

    def secure_inputs(self, my_loads: dict | None = None):
        """Share the per-unit load vectors; the flat start is a public share.

        ``my_loads`` maps bus index -> (p, q) in watts/var for the buses this
        party owns; parties pass only their own rows.  With secret G,B the
        operator role (party 0) distributes the admittance shares.
        """
        my_loads = my_loads or {}
        owners = self.bus_owners(self.grid, self.s.n_parties)
        s_base = self.v_base**2
        p_parts, q_parts = [], []
        with self.s.phase("input"):
            for b in range(self.n):
                owner = owners.get(b)
                # a counting session plays every party and holds all loads
                acts_as_owner = owner == self.s.party_id or self.s.is_counting
                if owner is None:
                    p_parts.append(self.s.public(0.0))
                    q_parts.append(self.s.public(0.0))
                elif acts_as_owner:
                    p, q = my_loads[b]
                    p_parts.append(self.s.input(owner, p / s_base))
                    q_parts.append(self.s.input(owner, q / s_base))
                else:
                    p_parts.append(self.s.input(owner, shape=()))
                    q_parts.append(self.s.input(owner, shape=()))
            p0 = self.s.stack(p_parts)
            q0 = self.s.stack(q_parts)
            if not self.cfg.gb_public:
                owner = 0
                if self.s.party_id == owner:
                    g_sh = self.s.input(owner, self.grid.G)
                    b_sh = self.s.input(owner, self.grid.B)
                else:
                    g_sh = self.s.input(owner, shape=self.grid.G.shape)
                    b_sh = self.s.input(owner, shape=self.grid.B.shape)
                self.gb_shared = (g_sh, b_sh)
        return p0, q0, self.flat_start_shared()

    def flat_start_shared(self):
        x0 = np.zeros(self.l)
        x0[: self.m] = 1.0
        return self.s.public(x0)

    def _full_parts(self, x_red):
        """(v_R, v_I) over all buses, slack pinned to the public (1, 0)."""
        order = np.argsort(np.concatenate([self.ns, [self.grid.slack]]))
        vr = self.s.concat([x_red[: self.m], self.s.public(np.array([1.0]))])[order]
        vi = self.s.concat([x_red[self.m :], self.s.public(np.array([0.0]))])[order]
        return vr, vi

    # ---- F and J ---------------------------------------------------------------------

    def f_and_j(self, x_red, p0, q0, *, need_j: bool = True, extra_shift: int = 0,
                phase: str = "fj"):
        """Mismatch (and Jacobian) on shares, batched by multiplication depth:
        with secret G,B one multiplication layer for the admittance products
        and one for the v*i products; public G,B leaves only the latter.

        ``extra_shift`` folds the line-search eps scaling into the product
        truncation for free; the caller then supplies eps-scaled loads.
        """
        with self.s.phase(phase):
            out = self._f_and_j_inner(x_red, p0, q0, need_j, extra_shift)
        return out

    def _f_and_j_inner(self, x_red, p0, q0, need_j, extra_shift):
        s = self.s
        h = s.params.h
        ns, m = self.ns, self.m
        vr, vi = self._full_parts(x_red)
        slack = self.grid.slack

        if self.cfg.gb_public:
            g_mat, b_mat = self.grid.G, self.grid.B
            ir_raw = s.mul_public_raw(vr, g_mat) - s.mul_public_raw(vi, b_mat)
            ii_raw = s.mul_public_raw(vr, b_mat) + s.mul_public_raw(vi, g_mat)
            ir = s.truncate(self._rowsum(ir_raw))
            ii = s.truncate(self._rowsum(ii_raw))
        else:
            g_sh, b_sh = self.gb_shared
            idx = np.ix_(ns, ns)
            g_red, b_red = g_sh[idx], b_sh[idx]
            vr_ns, vi_ns = vr[ns], vi[ns]
            # one batched layer: all four product blocks of the currents
            p_gvr = s._beaver(g_red, self._rowvec(vr_ns))
            p_bvi = s._beaver(b_red, self._rowvec(vi_ns))
            p_bvr = s._beaver(b_red, self._rowvec(vr_ns))
            p_gvi = s._beaver(g_red, self._rowvec(vi_ns))
            # slack column: public voltage (1, 0) makes it a free lift
            g_slack = s.lift_scale(g_sh[np.ix_(ns, [slack])], h)
            b_slack = s.lift_scale(b_sh[np.ix_(ns, [slack])], h)
            ir_ns = s.truncate(self._rowsum(p_gvr - p_bvi) + self._rowsum(g_slack))
            ii_ns = s.truncate(self._rowsum(p_bvr + p_gvi) + self._rowsum(b_slack))
            ir = self._scatter_ns(ir_ns)
            ii = self._scatter_ns(ii_ns)

        # v * i products of the mismatch: 4(N-1) triples, one layer
        vr_ns, vi_ns = vr[ns], vi[ns]
        ir_ns, ii_ns = ir[ns], ii[ns]
        left = s.stack([s.concat([vr_ns, vi_ns]), s.concat([vi_ns, vr_ns])], axis=1)
        right = s.stack([s.concat([ir_ns, ir_ns]), s.concat([ii_ns, -ii_ns])], axis=1)
        power = s.mul_sum(left, right, axis=1, extra_shift=extra_shift)
        f_red = power - s.concat([p0[ns], q0[ns]])

        if not need_j:
            return f_red, None

        if self.cfg.gb_public:
            g_red = self.grid.G[np.ix_(ns, ns)]
            b_red = self.grid.B[np.ix_(ns, ns)]
            h1 = s.truncate(s.mul_public_raw(self._colvec(vr_ns), g_red)
                            + s.mul_public_raw(self._colvec(vi_ns), b_red))
            h2 = s.truncate(s.mul_public_raw(self._colvec(vi_ns), g_red)
                            - s.mul_public_raw(self._colvec(vr_ns), b_red))
        elif self.cfg.gb_symmetric:
            # reuse the current products: G_ij v_i = (G v^T)_ji for symmetric G
            h1 = s.truncate(self._transpose(p_gvr) + self._transpose(p_bvi))
            h2 = s.truncate(self._transpose(p_gvi) - self._transpose(p_bvr))
            self.cache_hits += 4 * m * m
        else:
            q_gvr = s._beaver(g_red, self._colvec(vr_ns))
            q_bvi = s._beaver(b_red, self._colvec(vi_ns))
            q_gvi = s._beaver(g_red, self._colvec(vi_ns))
            q_bvr = s._beaver(b_red, self._colvec(vr_ns))
            h1 = s.truncate(q_gvr + q_bvi)
            h2 = s.truncate(q_gvi - q_bvr)
        h3 = self._diag(ir_ns)
        h4 = self._diag(ii_ns)
        top = s.concat([h1 + h3, h2 + h4], axis=1)
        bottom = s.concat([h2 - h4, -h1 + h3], axis=1)
        return f_red, s.concat([top, bottom], axis=0)

    # structural helpers over both session kinds
    def _rowsum(self, v):
        if self.s.is_counting:
            from .abb import FloatShared
            val = v.value.sum(axis=-1) if v.value.ndim > 1 else v.value
            return FloatShared(self.s, val, v.scale)
        from .abb import SharedValue, _as_object
        self.s.ensure(v)
        frag = v.frag.sum(axis=-1) % self.s.params.p if v.frag.ndim > 1 else v.frag
        frag = np.asarray(frag, dtype=object)
        return SharedValue(self.s, frag.shape, v.scale, _as_object(frag))

    def _transpose(self, v):
        if self.s.is_counting:
            from .abb import FloatShared
            return FloatShared(self.s, v.value.T, v.scale)
        from .abb import SharedValue
        self.s.ensure(v)
        return SharedValue(self.s, v.frag.T.shape, v.scale, v.frag.T.copy())

    def _diag(self, v):
        if self.s.is_counting:
            from .abb import FloatShared
            return FloatShared(self.s, np.diag(v.value), v.scale)
        from .abb import SharedValue, _as_object
        self.s.ensure(v)
        frag = np.zeros((v.frag.size, v.frag.size), dtype=object)
        np.fill_diagonal(frag, v.frag)
        return SharedValue(self.s, frag.shape, v.scale, _as_object(frag))

    def _rowvec(self, v):
        return self.s.reshape(v, (1, v.shape[0]))

    def _colvec(self, v):
        return self.s.reshape(v, (v.shape[0], 1))

    def _scatter_ns(self, v_ns):
        """Embed a non-slack vector into bus order with a public zero at slack."""
        order = np.argsort(np.concatenate([self.ns, [self.grid.slack]]))
        return self.s.concat([v_ns, self.s.public(np.array([0.0]))])[order]

    # ---- direct solver ----------------------------------------------------------------

    def lu_solve(self, j_mat, b):
        """Pivot-free LU with unit lower diagonal on shares.

        Per elimination step the U-row products and the L-column numerator
        products form one batched layer (the reason the two loops are
        separate); 1/U_ii is computed once and reused by the back
        substitution.  b is the right-hand side (the driver passes -F).
        """
        s = self.s
        h = s.params.h
        l = self.l
        urows: list = [None] * l
        lcols: list = [None] * l
        recs: list = [None] * l

        with s.phase("lu-init"):
            urows[0] = j_mat[0, :]
        with s.phase("lu-pivot"):
            recs[0] = self._reciprocal(urows[0][0])
            if l > 1:
                lcols[0] = s.mul(j_mat[1:, 0], recs[0])

        for i in range(1, l):
            with s.phase("lu-elim"):
                lrow = s.stack([lcols[k][i - k - 1] for k in range(i)])
                ublock = s.stack([urows[k][i - k :] for k in range(i)], axis=0)
                u_prod = s._beaver(s.reshape(lrow, (i, 1)), ublock, sum_axis=0)
                if i + 1 < l:
                    lblock = s.stack([lcols[k][i - k :] for k in range(i)], axis=1)
                    ucol = s.stack([urows[k][i - k] for k in range(i)])
                    l_prod = s._beaver(lblock, s.reshape(ucol, (1, i)), sum_axis=1)
                urows[i] = s.truncate(s.lift_scale(j_mat[i, i:], h) - u_prod)
                if i + 1 < l:
                    lnum = s.truncate(s.lift_scale(j_mat[i + 1 :, i], h) - l_prod)
            with s.phase("lu-pivot"):
                recs[i] = self._reciprocal(urows[i][0])
                if i + 1 < l:
                    lcols[i] = s.mul(lnum, recs[i])

        with s.phase("lu-subst"):
            ys: list = [None] * l
            ys[0] = b[0]
            for i in range(1, l):
                lrow = s.stack([lcols[k][i - k - 1] for k in range(i)])
                acc = s._beaver(lrow, s.stack(ys[:i]), sum_axis=0)
                ys[i] = s.truncate(s.lift_scale(b[i], h) - acc)
            xs: list = [None] * l
            for i in range(l - 1, -1, -1):
                if i == l - 1:
                    num = ys[i]
                else:
                    acc = s._beaver(urows[i][1:], s.stack(xs[i + 1 :]), sum_axis=0)
                    num = s.truncate(s.lift_scale(ys[i], h) - acc)
                xs[i] = s.mul(num, recs[i])
            return s.stack(xs)

    # ---- iterative solver -------------------------------------------------------------

    def gmres_solve(self, j_mat, b, m_kry: int):
        """Fixed-iteration GMRES on shares with the public preconditioner.

        Givens rotations and norms stay shared; every division reuses the
        inverse-sqrt output, so this path consumes no reciprocal ops.  The
        per-Newton-step iteration count is public and calibrated: it stops
        short of Krylov saturation (the first step has P J(x0) = I and
        saturates immediately), keeping the shared norms away from zero.  A
        zero count makes the step an exact no-op.
        """
        s = self.s
        if m_kry == 0:
            return s.public(np.zeros(self.l))
        with s.phase("gmres"):
            r0 = s.pub_matvec(self.precond, b)
            q0w, beta2, y0, sc0 = self._norm_invsqrt(r0)
            basis = [s.mul(q0w, y0)]
            g: list = [s.mul(beta2, y0, extra_shift=sc0)]  # residual norm estimates
            hcols: list = []
            rots: list = []  # (c, s, 1/r) per column
            for j in range(m_kry):
                last = j == m_kry - 1
                t = s.matvec(j_mat, basis[j])
                w = s.pub_matvec(self.precond, t)
                qmat = s.stack(basis, axis=0)
                coeffs = s.mul_sum(qmat, self._rowvec(w), axis=1)  # h_{0..j, j}
                w = w - self._proj(coeffs, qmat)
                col = [coeffs[i] for i in range(j + 1)]
                if last:
                    # the next basis vector is never used, and at Krylov
                    # saturation its norm vanishes: rotate with ||w'||^2
                    # directly instead of normalizing w'
                    sub2 = s.dot(w, w)
                else:
                    wsc, nrm2, yinv, sc = self._norm_invsqrt(w)
                    h_next = s.mul(nrm2, yinv, extra_shift=sc)  # ||w'||
                    col.append(h_next)
                for i, (c_i, s_i, _) in enumerate(rots):
                    a0 = s.dot(s.stack([c_i, s_i]), s.stack([col[i], col[i + 1]]))
                    a1 = s.dot(s.stack([-s_i, c_i]), s.stack([col[i], col[i + 1]]))
                    col[i], col[i + 1] = a0, a1
                if last:
                    r2 = s.mul(col[j], col[j]) + sub2
                    yrot, sc_r = self._invsqrt_squared(r2)
                    c_new = s.mul(col[j], yrot, extra_shift=-sc_r)
                    r_val = s.mul(r2, yrot, extra_shift=-sc_r)
                    hcols.append(col[:j] + [r_val])
                    rots.append((c_new, None, s.scale_pow2(yrot, sc_r)))
                    g[j] = s.mul(c_new, g[j])
                else:
                    pair = s.stack([col[j], col[j + 1]])
                    _, r2, yrot, sc_r = self._norm_invsqrt(pair)
                    c_new = s.mul(col[j], yrot, extra_shift=-sc_r)
                    s_new = s.mul(col[j + 1], yrot, extra_shift=-sc_r)
                    r_val = s.mul(r2, yrot, extra_shift=sc_r)
                    inv_r = s.scale_pow2(yrot, sc_r)
                    col[j] = r_val
                    hcols.append(col[: j + 1])
                    rots.append((c_new, s_new, inv_r))
                    g_j = g[j]
                    g.append(s.mul(-s_new, g_j))
                    g[j] = s.mul(c_new, g_j)
                    basis.append(s.mul(wsc, yinv))
            # back substitution on the rotated (upper triangular) H
            ysol: list = [None] * m_kry
            for i in range(m_kry - 1, -1, -1):
                if i == m_kry - 1:
                    num = g[i]
                else:
                    terms = s.stack([hcols[t][i] for t in range(i + 1, m_kry)])
                    acc = s._beaver(terms, s.stack(ysol[i + 1 :]), sum_axis=0)
                    num = s.truncate(s.lift_scale(g[i], s.params.h) - acc)
                ysol[i] = s.mul(num, rots[i][2])
            qmat = s.stack(basis[:m_kry], axis=0)
            dx = s.mul_sum(self._colvec(s.stack(ysol)), qmat, axis=0)
        return dx

    def _proj(self, coeffs, qmat):
        """sum_i coeffs_i q_i as one batched layer."""
        return self.s.mul_sum(self._colvec(coeffs), qmat, axis=0)

    # ---- line search -----------------------------------------------------------------

    def line_search(self, x_red, dx, f_red, p0e, q0e):
        """Secant step-size search on shares (fixed iteration count).

        Residuals inside the search are eps-scaled (folded into the product
        truncations); the scaling cancels in the eta update.  Per iteration
        the multiplications outside the division block batch into three
        layers: the state update, the mismatch products, and the xi products
        with the two secant scalars.
        """
        s = self.s
        e = self.cal.epsilon_exp
        with s.phase("ls-setup"):
            f0s = s.truncate(f_red, e, declared_scale=f_red.scale) if e > 0 else f_red
            x_eta0 = x_red + dx  # eta0 = 1: free
            f_prev, _ = self.f_and_j(x_eta0, p0e, q0e, need_j=False,
                                     extra_shift=e, phase="fj")
            xi_prev = s.mul_sum(f_prev, f_prev - f0s, axis=0)
        eta_prev = s.public(self.cfg.eta0)
        eta_cur = s.public(self.cfg.eta1)
        deta_prev = eta_cur - eta_prev
        etas = [eta_prev, eta_cur]
        for _ in range(self.cfg.ls_iters):
            with s.phase("ls-iter"):
                step = s.mul(eta_cur, dx)  # l triples
                x_trial = x_red + step
                f_cur, _ = self.f_and_j(x_trial, p0e, q0e, need_j=False,
                                        extra_shift=e, phase="fj")
                xi_cur = s.mul_sum(f_cur, f_cur - f0s, axis=0)  # l triples
                den = s.mul(eta_cur, xi_prev) - xi_cur  # 1 triple
                num_pre = s.mul(deta_prev, eta_prev)  # 1 triple
                rec = self._reciprocal(den)  # nested recip phase
                with s.phase("eta"):
                    t = s.mul(num_pre, xi_cur)  # 1 triple
                    deta = s.mul(t, rec)  # 1 triple
                eta_prev, eta_cur = eta_cur, eta_cur + deta
                xi_prev, deta_prev = xi_cur, deta
                etas.append(eta_cur)
        with s.phase("ls-final"):
            x_next = x_red + s.mul(eta_cur, dx)
        return x_next, etas

    # ---- driver ----------------------------------------------------------------------

    def run(self, my_loads: dict | None = None) -> dict:
        """Exactly newton_iters iterations regardless of the residual."""
        s = self.s
        cfg = self.cfg
        p0, q0, x = self.secure_inputs(my_loads)
        e = self.cal.epsilon_exp
        if cfg.line_search and e > 0:
            with s.phase("ls-setup"):
                p0e = s.truncate(p0, e, declared_scale=p0.scale)
                q0e = s.truncate(q0, e, declared_scale=q0.scale)
        else:
            p0e, q0e = p0, q0
        eta_trace = []
        for k in range(self.cal.newton_iters):
            f_red, j_mat = self.f_and_j(x, p0, q0, need_j=True)
            b = -f_red
            if cfg.solver == "lu":
                dx = self.lu_solve(j_mat, b)
            else:
                dx = self.gmres_solve(j_mat, b, self.cal.gmres_schedule[k])
            if cfg.line_search:
                x, etas = self.line_search(x, dx, f_red, p0e, q0e)
                eta_trace.append(etas)
            else:
                x = x + dx
        s.barrier()
        out = {"x_shared": x, "cache_hits": self.cache_hits}
        if cfg.check_constraints:
            out["violations"] = self.constraint_flags(x)
        if s.reveal_allowed:
            x_val = np.asarray(s.output(x), dtype=float) * self.v_base
            out["x_revealed"] = self._to_full_state(x_val)
            out["eta_trace"] = [
                [float(np.asarray(s.output(eta))) for eta in etas]
                for etas in eta_trace
            ]
        return out

    def _to_full_state(self, x_red_vals: np.ndarray) -> np.ndarray:
        x = np.zeros(2 * self.n)
        x[self.grid.slack] = self.v_base
        keep = self.grid.reduced_indices()
        x[keep] = x_red_vals
        return x

    def constraint_flags(self, x_red) -> dict:
        """Secure operating-limit checks; only the violation bits open.

        Magnitudes are compared squared, which avoids shared square roots.
        Requires public G,B (branch admittances enter the current expression).
        """
        if not self.cfg.gb_public:
            raise UnsupportedSolver("secure constraint checks need public G,B")
        s = self.s
        g = self.grid
        with s.phase("constraints"):
            vr, vi = self._full_parts(x_red)
            v2 = s.mul(vr, vr) + s.mul(vi, vi)
            lo2 = s.public((g.v_min / self.v_base) ** 2)
            hi2 = s.public((g.v_max / self.v_base) ** 2)
            ok_lo = s.less_eq(lo2, v2)
            ok_hi = s.less_eq(v2, hi2)
            f_idx = np.array([br.f for br in g.branches])
            t_idx = np.array([br.t for br in g.branches])
            dvr = vr[f_idx] - vr[t_idx]
            dvi = vi[f_idx] - vi[t_idx]
            g_ser = np.array([br.g for br in g.branches])
            b_ser = np.array([br.b for br in g.branches])
            ir = s.truncate(s.mul_public_raw(dvr, g_ser) - s.mul_public_raw(dvi, b_ser))
            ii = s.truncate(s.mul_public_raw(dvr, b_ser) + s.mul_public_raw(dvi, g_ser))
            i2 = s.mul(ir, ir) + s.mul(ii, ii)
            imax2 = s.public(np.array([(br.i_max / self.v_base) ** 2
                                       for br in g.branches]))
            ok_i = s.less_eq(i2, imax2)
            under = np.asarray(s.output(ok_lo, whitelisted=True)) < 0.5
            over = np.asarray(s.output(ok_hi, whitelisted=True)) < 0.5
            overload = np.asarray(s.output(ok_i, whitelisted=True)) < 0.5
        return {
            "bus_undervoltage": np.nonzero(under)[0].tolist(),
            "bus_overvoltage": np.nonzero(over)[0].tolist(),
            "branch_overload": np.nonzero(overload)[0].tolist(),
            "any": bool(under.any() or over.any() or overload.any()),
        }


def run_pfa(session, grid: GridModel, cfg: SecureSessionConfig, cal: Calibration,
            my_loads: dict | None = None) -> dict:
    """Convenience wrapper: run the full secure protocol on one session."""
    return SecurePfa(session, grid, cfg, cal).run(my_loads)


# ---- calibration -----------------------------------------------------------------------


def calibrate(grid: GridModel, cfg: SecureSessionConfig) -> Calibration:
    """Plaintext preparation for a grid/config pair.

    Runs a deterministic load sweep through the reference solver for the fixed
    iteration counts and the eps exponent, checks the pivot-omission
    certificate over the operating box, then records every shared
    reciprocal / inverse-sqrt call site through the counting session to fix
    public ranges, signs, and rescales.
    """
    from .abb import CountingSession
    from .fieldfix import DEFAULT_PARAMS

    rng = np.random.default_rng(cfg.calib_seed)
    scales = np.concatenate([[1.0, cfg.load_scale_hi],
                             rng.uniform(cfg.load_scale_lo, cfg.load_scale_hi,
                                         max(0, cfg.calib_samples - 2))])
    iters_needed, max_f_pu, max_vi = 1, 2.0**-20, 0.0
    inner_by_step: dict[int, int] = {}
    solver_cfg = pf.SolverConfig(solver=cfg.solver, max_newton=40,
                                 convergence_tol=cfg.convergence_tol,
                                 gmres_tol=max(cfg.gmres_tol, cfg.gmres_schedule_tol),
                                 line_search=cfg.line_search,
                                 eta0=cfg.eta0, eta1=cfg.eta1, max_linesearch=cfg.ls_iters)
    for factor in scales:
        g2 = replace(grid, p0=grid.p0 * factor, q0=grid.q0 * factor)
        state = pf.newton_solve(g2, solver_cfg, raise_on_fail=False)
        iters_needed = max(iters_needed, state.k)
        for rec in state.trace:
            k = rec["k"]
            inner_by_step[k] = max(inner_by_step.get(k, 1), rec["solver_iters"])
        f0 = pf.compute_F(pf.flat_start(g2), g2) / grid.v_nominal**2
        max_f_pu = max(max_f_pu, float(np.abs(f0).max()))
        max_vi = max(max_vi, float(np.abs(state.x[grid.n :]).max()) / grid.v_nominal)

    newton_iters = cfg.newton_iters or iters_needed + 2
    epsilon_exp = cfg.epsilon_exp
    if epsilon_exp is None:
        epsilon_exp = max(0, math.ceil(math.log2(max_f_pu)))
    if cfg.gmres_m is not None:
        schedule = [cfg.gmres_m] * newton_iters
    else:
        # Krylov steps per Newton iteration: enough for the sweep's worst case
        # but never past the iteration the plaintext solver stopped at (running
        # into saturation would zero the shared norms).  Steps after every
        # sweep sample converged solve nothing and become exact no-ops, which
        # keeps sub-resolution noise out of the settled state.
        schedule = [inner_by_step.get(k, 0) for k in range(1, newton_iters + 1)]

    vi_frac = max(0.1, 1.3 * max_vi)
    box = OperatingBox.from_limits(grid, vi_frac=vi_frac)
    cert = pivot_certificate(build_K(grid.G, grid.B), box,
                             rows=grid.reduced_indices())

    recorder = Calibration(newton_iters=newton_iters, epsilon_exp=epsilon_exp,
                           gmres_schedule=schedule, cert_bound=cert["bound"],
                           vi_frac=vi_frac, recording=True)
    for factor in scales[: min(4, len(scales))]:
        g2 = replace(grid, p0=grid.p0 * factor, q0=grid.q0 * factor)
        session = CountingSession(DEFAULT_PARAMS, n_parties=2)
        prog = SecurePfa(session, g2, cfg, recorder)
        owners = prog.bus_owners(g2, session.n_parties)
        loads = {b: (g2.p0[b], g2.q0[b]) for b in owners}
        prog.run(loads)  # the counting session plays every party

    # ceilings for suspect sites: every reachable garbage magnitude is
    # bounded because basis vectors stay below 1 (no Newton overshoot)
    sqrt_ceiling = 64.0 * max(
        [1.0] + [float(np.max(v)) * cfg.range_pad for v in recorder._sqrt_values if len(v)]
    )
    recip_ceiling = 16.0 * max(
        [1.0] + [float(np.max(np.abs(v))) * cfg.range_pad
                 for v in recorder._recip_values if len(v)]
    )
    return Calibration(
        newton_iters=newton_iters,
        epsilon_exp=epsilon_exp,
        gmres_schedule=schedule,
        cert_bound=cert["bound"],
        vi_frac=vi_frac,
        recip_sites=[_site_from_values(v, cfg.range_pad, False, recip_ceiling)
                     for v in recorder._recip_values],
        sqrt_sites=[_site_from_values(v, cfg.range_pad, True, sqrt_ceiling)
                    for v in recorder._sqrt_values],
    )


def dry_run_counts(grid: GridModel, cfg: SecureSessionConfig,
                   cal: Calibration | None = None) -> dict:
    """Exact preprocessing consumption of one run (data-independent control
    flow makes a counting pass exact)."""
    from .abb import CountingSession
    from .fieldfix import DEFAULT_PARAMS

    cal = cal or calibrate(grid, cfg)
    session = CountingSession(DEFAULT_PARAMS, n_parties=2)
    prog = SecurePfa(session, grid, cfg, cal)
    loads = {b: (grid.p0[b], grid.q0[b])
             for b in prog.bus_owners(grid, session.n_parties)}
    prog.run(loads)
    return {
        "triples": session.ledger.triples_consumed,
        "trunc_pairs": dict(session.trunc_by_shift),
        "bit_bundles": session.ledger.bits_consumed,
        "bits_per_bundle": DEFAULT_PARAMS.k + DEFAULT_PARAMS.lambda_stat,
        "reciprocal_ops": session.ledger.reciprocal_ops,
        "sqrt_ops": session.ledger.sqrt_ops,
    }
