"""Arithmetic black box on additive shares, with batched communication.

Every party runs one :class:`AbbSession` per computation.  Linear operations
(add, subtract, public scaling) touch fragments locally and cost no
communication.  Interactive operations (Beaver multiplication, truncation,
input distribution, reveal) never talk to the network directly: they enqueue
opening requests and return *pending* shared values.  ``flush_batch`` drains
the queue in exactly one transport round; a fixed-point multiplication
therefore completes after two flushes (Beaver openings, then the masked
truncation), and independent multiplications issued back to back share those
rounds.  ``ensure``/``barrier`` flush on demand, so protocol code written in
layers batches round for round the way the complexity accounting assumes.

Accounting: a flush that opens Beaver maskings counts as one *logical* round
(the round metric the batching targets); truncation-only flushes add to the
raw transport round count but not the logical one.

A :class:`CountingSession` mirrors the same surface on plaintext floats and
only counts consumption; because control flow is data-independent this yields
exact preprocessing budgets without touching a network.
"""

from __future__ import annotations

import math
import random
from contextlib import contextmanager

import numpy as np

from . import fieldfix as ff
from .errors import RangeNotCertified, RevealNotAllowed, ShapeMismatch
from .transport import RoundLedger


def _as_object(arr) -> np.ndarray:
    out = np.asarray(arr, dtype=object)
    return out


def _omod(expr, p: int) -> np.ndarray:
    """Reduce mod p and keep the result an object array (0-d results of numpy
    object arithmetic collapse to plain ints otherwise)."""
    out = np.asarray(expr, dtype=object)
    if out.ndim == 0:
        return np.array(int(out) % p, dtype=object)
    return out % p


class SharedValue:
    """Per-party fragment(s) of a secret, plus shape and scale metadata.

    ``scale`` is the power-of-two exponent of the fixed-point encoding: h for
    ordinary values, 2h for fresh products, 0 for field integers (bits).
    A value may be *pending* (fragments not yet known) until the batch that
    materializes it is flushed.
    """

    __slots__ = ("session", "shape", "scale", "_frag", "_hooks")

    def __init__(self, session, shape, scale, frag=None):
        self.session = session
        self.shape = tuple(shape)
        self.scale = scale
        self._frag = frag
        self._hooks = []

    @property
    def ready(self) -> bool:
        return self._frag is not None

    @property
    def frag(self) -> np.ndarray:
        if self._frag is None:
            raise RuntimeError("value not materialized; flush the batch first")
        return self._frag

    def _materialize(self, frag: np.ndarray) -> None:
        self._frag = frag
        hooks, self._hooks = self._hooks, []
        for hook in hooks:
            hook()

    def when_ready(self, hook) -> None:
        if self._frag is not None:
            hook()
        else:
            self._hooks.append(hook)

    @property
    def size(self) -> int:
        out = 1
        for d in self.shape:
            out *= d
        return out

    def __add__(self, other):
        if isinstance(other, SharedValue):
            return self.session.add(self, other)
        return self.session.add_public(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, SharedValue):
            return self.session.sub(self, other)
        return self.session.add_public(self, -other)

    def __rsub__(self, other):
        return self.session.sub(self.session.public_like(other, self), self)

    def __neg__(self):
        return self.session.neg(self)

    def __getitem__(self, idx):
        self.session.ensure(self)
        frag = self.frag[idx]
        frag = _as_object(frag)
        return SharedValue(self.session, frag.shape, self.scale, frag)


class _Entry:
    """One queued exchange item: what to send per peer, what to expect back,
    and a continuation run on the opened data."""

    __slots__ = ("kind", "send", "expect", "cont")

    def __init__(self, kind, send, expect, cont):
        self.kind = kind
        self.send = send  # peer -> list[int]
        self.expect = expect  # peer -> int
        self.cont = cont


class SessionOps:
    """Composite operations shared by the real and the counting sessions."""

    # -- range-certified reciprocal: Newton y <- y (2 - d y) with a public
    #    power-of-two normalization so iterates stay O(1) in fixed point.

    @staticmethod
    def reciprocal_iterations(lo: float, hi: float) -> int:
        return max(1, math.ceil(math.log2((hi - lo) / lo))) + 6 if hi > lo else 7

    def reciprocal(self, d: SharedValue, certified_range: tuple[float, float]) -> SharedValue:
        """1/d for decode(d) in [lo, hi], 0 < lo < hi (caller-certified)."""
        lo, hi = certified_range
        if not (0 < lo < hi):
            raise RangeNotCertified(f"range [{lo}, {hi}] is not sign-definite")
        with self.phase("recip"):
            self.ledger.bump("reciprocal_ops")
            norm = round(math.log2(math.sqrt(lo * hi)))
            dn = self.scale_pow2(d, -norm)
            lo_n, hi_n = lo / 2.0**norm, hi / 2.0**norm
            iters = self.reciprocal_iterations(lo, hi)
            y_pub = 2.0 / (lo_n + hi_n)
            # first iteration has a public y0: both products are truncation-only
            t = self.mul_public(dn, y_pub)
            y = self.mul_public(self.rsub_public(2.0, t), y_pub)
            for step in range(1, iters):
                t = self.mul(dn, y)
                extra = norm if (step == iters - 1 and norm > 0) else 0
                y = self.mul(y, self.rsub_public(2.0, t), extra_shift=extra)
            if norm <= 0:
                y = self.scale_pow2(y, -norm)
        return y

    @staticmethod
    def inv_sqrt_iterations(lo: float, hi: float) -> int:
        return max(1, math.ceil(math.log2(hi / lo))) + 8

    def inv_sqrt(self, d: SharedValue, certified_range: tuple[float, float]) -> SharedValue:
        """1/sqrt(d) for decode(d) in [lo, hi], lo > 0, via y <- y(3 - d y^2)/2."""
        lo, hi = certified_range
        if not (0 < lo < hi):
            raise RangeNotCertified(f"range [{lo}, {hi}] is not sign-definite")
        with self.phase("sqrt"):
            self.ledger.bump("sqrt_ops")
            norm = round(math.log2(math.sqrt(lo * hi)))
            norm += norm % 2  # keep the exponent even so sqrt(2**norm) is exact
            dn = self.scale_pow2(d, -norm)
            lo_n, hi_n = lo / 2.0**norm, hi / 2.0**norm
            y_pub = 1.0 / math.sqrt(hi_n)  # below 1/sqrt(d): guaranteed convergence
            iters = self.inv_sqrt_iterations(lo, hi)
            u = self.mul_public(dn, y_pub * y_pub)
            y = self.mul_public(self.rsub_public(3.0, u), y_pub / 2.0)
            half = norm // 2
            for step in range(1, iters):
                y2 = self.mul(y, y)
                u = self.mul(dn, y2)
                extra = 1 + (half if (step == iters - 1 and half > 0) else 0)
                y = self.mul(y, self.rsub_public(3.0, u), extra_shift=extra)
            if half <= 0:
                y = self.scale_pow2(y, -half)
        return y

    def sqrt(self, d: SharedValue, certified_range: tuple[float, float]) -> SharedValue:
        """sqrt(d) = d * inv_sqrt(d); relative error well inside 2**-20."""
        y = self.inv_sqrt(d, certified_range)
        return self.mul(d, y)

    # -- convenience built on primitives

    def rsub_public(self, c, u: SharedValue) -> SharedValue:
        return self.sub(self.public_like(c, u), u)

    def public_like(self, c, template: SharedValue) -> SharedValue:
        arr = np.broadcast_to(np.asarray(c, dtype=float), template.shape)
        return self.public(arr, scale=template.scale)

    def scale_pow2(self, x: SharedValue, e: int) -> SharedValue:
        """Multiply by a public 2**e: free for e >= 0, one truncation for e < 0."""
        if e == 0:
            return x
        if e > 0:
            return self.mul_public(x, 1 << e)
        return self.truncate(x, shift=-e, declared_scale=x.scale)

    def _trunc_product(self, raw, extra_shift: int):
        # extra_shift scales the value down by 2**extra_shift for free: the
        # truncation removes h+extra bits while the declared scale drops by h
        return self.truncate(
            raw,
            shift=self.params.h + extra_shift,
            declared_scale=raw.scale - self.params.h,
        )

    def dot(self, u: SharedValue, v: SharedValue, extra_shift: int = 0) -> SharedValue:
        """Inner product: one triple per element, a single truncation."""
        return self._trunc_product(self._beaver(u, v, sum_axis=0), extra_shift)

    def matvec(self, m: SharedValue, v: SharedValue, extra_shift: int = 0) -> SharedValue:
        if len(m.shape) != 2 or m.shape[1] != v.shape[0]:
            raise ShapeMismatch(f"matvec {m.shape} x {v.shape}")
        return self._trunc_product(self._beaver(m, v, sum_axis=-1), extra_shift)

    def mul(self, u: SharedValue, v: SharedValue, extra_shift: int = 0) -> SharedValue:
        """Elementwise secret product, truncated back to the operand scale."""
        return self._trunc_product(self._beaver(u, v), extra_shift)

    def mul_sum(self, u: SharedValue, v: SharedValue, axis, extra_shift: int = 0) -> SharedValue:
        return self._trunc_product(self._beaver(u, v, sum_axis=axis), extra_shift)


class AbbSession(SessionOps):
    """One party's view of the arithmetic black box."""

    is_counting = False

    def __init__(self, channel, material, *, reveal_allowed=False, rng=None):
        self.channel = channel
        self.material = material
        self.params = material.params
        self.party_id = channel.party_id
        self.n_parties = channel.n
        self.ledger: RoundLedger = channel.ledger
        self.reveal_allowed = reveal_allowed
        self.rng = rng if rng is not None else random.SystemRandom()
        self._queue: list[_Entry] = []

    # ---- value constructors -------------------------------------------------

    def public(self, x, scale: int | None = None) -> SharedValue:
        """Share of a public constant: party 0 holds the code, others hold 0."""
        scale = self.params.h if scale is None else scale
        arr = np.asarray(x, dtype=float)
        if self.party_id == 0:
            frag = ff.encode_array(arr, self.params, scale)
        else:
            frag = ff.zeros(arr.shape)
        return SharedValue(self, arr.shape, scale, frag)

    def input(self, owner: int, x=None, shape=()) -> SharedValue:
        """Secret-share ``x`` held by ``owner``; other parties pass the shape.

        Fresh uniform masks per call; the distribution rides the next flush.
        """
        p = self.params.p
        if self.party_id == owner:
            arr = np.asarray(x, dtype=float)
            shape = arr.shape
            codes = ff.encode_array(arr, self.params).ravel()
            peer_frags = {}
            acc = ff.zeros(codes.shape)
            for j in range(self.n_parties):
                if j == owner:
                    continue
                fr = np.array([self.rng.randrange(p) for _ in range(codes.size)],
                              dtype=object)
                peer_frags[j] = fr
                acc = (acc + fr) % p
            own = (codes - acc) % p
            out = SharedValue(self, shape, self.params.h)
            send = {j: list(map(int, peer_frags[j])) for j in peer_frags}
            expect = {j: 0 for j in peer_frags}

            def cont(received):
                out._materialize(own.reshape(shape))

            self._queue.append(_Entry("input", send, expect, cont))
            return out
        size = 1
        for d in shape:
            size *= d
        out = SharedValue(self, shape, self.params.h)
        send = {j: [] for j in range(self.n_parties) if j != self.party_id}
        expect = {j: size if j == owner else 0 for j in send}

        def cont(received):
            frag = np.array(received[owner], dtype=object).reshape(shape)
            out._materialize(frag)

        self._queue.append(_Entry("input", send, expect, cont))
        return out

    # ---- local linear algebra -------------------------------------------------

    def _check_scales(self, u: SharedValue, v: SharedValue) -> None:
        if u.scale != v.scale:
            raise ShapeMismatch(f"scale mismatch {u.scale} vs {v.scale}")

    def add(self, u: SharedValue, v: SharedValue) -> SharedValue:
        self._check_scales(u, v)
        self.ensure(u, v)
        try:
            frag = _omod(u.frag + v.frag, self.params.p)
        except ValueError as exc:
            raise ShapeMismatch(str(exc)) from exc
        return SharedValue(self, frag.shape, u.scale, frag)

    def sub(self, u: SharedValue, v: SharedValue) -> SharedValue:
        self._check_scales(u, v)
        self.ensure(u, v)
        try:
            frag = _omod(u.frag - v.frag, self.params.p)
        except ValueError as exc:
            raise ShapeMismatch(str(exc)) from exc
        return SharedValue(self, frag.shape, u.scale, frag)

    def neg(self, u: SharedValue) -> SharedValue:
        self.ensure(u)
        return SharedValue(self, u.shape, u.scale, _omod(-u.frag, self.params.p))

    def add_public(self, u: SharedValue, c) -> SharedValue:
        self.ensure(u)
        if self.party_id != 0:
            return SharedValue(self, u.shape, u.scale, u.frag.copy())
        codes = ff.encode_array(np.broadcast_to(np.asarray(c, float), u.shape),
                                self.params, u.scale)
        return SharedValue(self, u.shape, u.scale, _omod(u.frag + codes, self.params.p))

    def add_raw_public(self, u: SharedValue, raw: int) -> SharedValue:
        """Add a public raw field constant (no encoding); used by comparisons."""
        self.ensure(u)
        if self.party_id != 0:
            return SharedValue(self, u.shape, u.scale, u.frag.copy())
        return SharedValue(self, u.shape, u.scale, _omod(u.frag + raw, self.params.p))

    def mul_public(self, u: SharedValue, c) -> SharedValue:
        """Multiply by a public constant.

        Integer constants are exact and communication-free.  Real constants
        multiply by round(2**h c) and ride one truncation (no triple).
        """
        self.ensure(u)
        arr = np.asarray(c)
        if arr.dtype.kind in "iu" or (
            arr.dtype.kind == "O" and all(isinstance(z, int) for z in arr.ravel())
        ):
            coeff = _as_object(arr)
            frag = _omod(u.frag * coeff, self.params.p)
            return SharedValue(self, frag.shape, u.scale, frag)
        codes = ff.encode_array(np.asarray(arr, float), self.params)
        frag = _omod(u.frag * codes, self.params.p)
        raw = SharedValue(self, frag.shape, u.scale + self.params.h, frag)
        return self.truncate(raw, shift=self.params.h)

    def pub_matvec(self, c_matrix, v: SharedValue) -> SharedValue:
        """Public real matrix times shared vector: local sums, one truncation
        per output element, zero triples."""
        self.ensure(v)
        c = np.asarray(c_matrix, dtype=float)
        if c.ndim != 2 or c.shape[1] != v.shape[0]:
            raise ShapeMismatch(f"pub_matvec {c.shape} x {v.shape}")
        codes = ff.encode_array(c, self.params)
        frag = _omod(codes @ v.frag, self.params.p)
        raw = SharedValue(self, (c.shape[0],), v.scale + self.params.h, frag)
        return self.truncate(raw, shift=self.params.h)

    def mul_public_raw(self, u: SharedValue, c) -> SharedValue:
        """Public real product left at combined scale (caller truncates the sum)."""
        self.ensure(u)
        codes = ff.encode_array(np.asarray(c, dtype=float), self.params)
        frag = _omod(u.frag * codes, self.params.p)
        return SharedValue(self, frag.shape, u.scale + self.params.h, frag)

    def lift_scale(self, u: SharedValue, bits: int) -> SharedValue:
        """Reinterpret at a higher scale by an exact public power of two."""
        self.ensure(u)
        frag = _omod(u.frag * (1 << bits), self.params.p)
        return SharedValue(self, u.shape, u.scale + bits, frag)

    def concat(self, parts, axis: int = 0) -> SharedValue:
        self.ensure(*parts)
        frag = np.concatenate([p.frag for p in parts], axis=axis)
        return SharedValue(self, frag.shape, parts[0].scale, _as_object(frag))

    def stack(self, parts, axis: int = 0) -> SharedValue:
        self.ensure(*parts)
        frag = np.stack([p.frag for p in parts], axis=axis)
        return SharedValue(self, frag.shape, parts[0].scale, _as_object(frag))

    def reshape(self, u: SharedValue, shape) -> SharedValue:
        self.ensure(u)
        frag = u.frag.reshape(shape)
        return SharedValue(self, frag.shape, u.scale, frag)

    # ---- interactive primitives -------------------------------------------------

    def _beaver(self, u: SharedValue, v: SharedValue, sum_axis=None) -> SharedValue:
        """Beaver products at combined scale; optionally summed along an axis.

        Consumes one triple per (broadcast) product.  The two masked openings
        are queued; the result materializes on the flush that opens them.
        """
        self.ensure(u, v)
        p = self.params.p
        try:
            bshape = np.broadcast_shapes(u.shape, v.shape)
        except ValueError as exc:
            raise ShapeMismatch(str(exc)) from exc
        uf = np.broadcast_to(u.frag, bshape).ravel()
        vf = np.broadcast_to(v.frag, bshape).ravel()
        n = uf.size
        a, b, c = self.material.next_triples(n)
        self.ledger.bump("triples_consumed", n)
        d1 = (uf + a) % p
        d2 = (vf + b) % p
        if sum_axis is None:
            out_shape = bshape
        else:
            out_shape = np.empty(bshape, dtype=np.int8).sum(axis=sum_axis).shape
        out = SharedValue(self, out_shape, u.scale + v.scale)

        def cont(opened):
            xa = np.array(opened[:n], dtype=object)
            yb = np.array(opened[n:], dtype=object)
            prod = (xa * vf - yb * a + c) % p
            prod = prod.reshape(bshape)
            if sum_axis is not None:
                prod = prod.sum(axis=sum_axis) % p
            out._materialize(_as_object(prod))

        self._enqueue_open("beaver", list(d1) + list(d2), cont)
        return out

    def truncate(self, x: SharedValue, shift: int | None = None,
                 declared_scale: int | None = None) -> SharedValue:
        """Masked probabilistic truncation by 2**shift (error at most 1 ulp).

        Default shift brings a double-scale product back to scale h.  The
        masked opening is queued once ``x`` materializes, so a multiply's
        truncation rides the round after its Beaver openings.
        """
        params = self.params
        shift = x.scale - params.h if shift is None else shift
        if shift <= 0:
            raise ValueError("truncation shift must be positive")
        new_scale = x.scale - shift if declared_scale is None else declared_scale
        out = SharedValue(self, x.shape, new_scale)

        def enqueue():
            n = x.size
            r, rhi = self.material.next_trunc(shift, n)
            self.ledger.bump("trunc_consumed", n)
            offset = 1 << (params.mask_bits - params.lambda_stat - 1)
            frag = x.frag.ravel()
            if self.party_id == 0:
                frag = (frag + offset) % params.p
            masked = (frag + r) % params.p

            def cont(opened):
                if self.party_id == 0:
                    res = np.array(
                        [((c >> shift) - hi - (offset >> shift)) % params.p
                         for c, hi in zip(opened, rhi)],
                        dtype=object,
                    )
                else:
                    res = np.array([(-hi) % params.p for hi in rhi], dtype=object)
                out._materialize(res.reshape(x.shape))

            self._enqueue_open("trunc", list(masked), cont)

        x.when_ready(enqueue)
        return out

    def _enqueue_open(self, kind: str, items: list[int], cont) -> None:
        send = {j: [int(v) for v in items] for j in self.channel.peers}
        expect = {j: len(items) for j in self.channel.peers}
        own = [int(v) for v in items]

        def full_cont(received):
            opened = own[:]
            for j in received:
                got = received[j]
                for i in range(len(opened)):
                    opened[i] = (opened[i] + got[i]) % self.params.p
            cont(opened)

        self._queue.append(_Entry(kind, send, expect, full_cont))

    # ---- batching -----------------------------------------------------------------

    def flush_batch(self) -> None:
        """Exchange every queued opening in exactly one transport round.

        A flush containing Beaver openings counts as one logical round.  An
        empty queue is a no-op (the ledger is untouched).
        """
        if not self._queue:
            return
        entries, self._queue = self._queue, []
        payloads = {j: [] for j in self.channel.peers}
        for e in entries:
            for j in payloads:
                payloads[j].extend(e.send.get(j, []))
        received = self.channel.exchange_round(payloads)
        if any(e.kind == "beaver" for e in entries):
            self.ledger.bump("logical_rounds")
        offsets = {j: 0 for j in received}
        for e in entries:
            per_entry = {}
            for j in received:
                count = e.expect.get(j, 0)
                start = offsets[j]
                per_entry[j] = received[j][start : start + count]
                offsets[j] = start + count
            e.cont(per_entry)

    def ensure(self, *values: SharedValue) -> None:
        for v in values:
            guard = 0
            while not v.ready:
                if not self._queue:
                    raise RuntimeError("pending value with an empty batch queue")
                self.flush_batch()
                guard += 1
                if guard > 64:
                    raise RuntimeError("value failed to materialize")

    def barrier(self) -> None:
        while self._queue:
            self.flush_batch()

    @contextmanager
    def phase(self, name: str):
        """Label ledger consumption; drains all pending work on exit so the
        rounds spent inside are attributed to the phase."""
        self.ledger.push_phase(name)
        try:
            yield
            self.barrier()
        finally:
            self.ledger.pop_phase()

    # ---- reveal -------------------------------------------------------------------

    def output(self, u: SharedValue, *, whitelisted: bool = False):
        """Open a value to every party and decode it.

        Production sessions (reveal_allowed=False) only open whitelisted
        results such as constraint-violation bits.
        """
        if not self.reveal_allowed and not whitelisted:
            raise RevealNotAllowed("session is not authorized to reveal this value")
        self.ensure(u)
        box = {}

        def cont(opened):
            box["raw"] = opened

        self._enqueue_open("reveal", list(u.frag.ravel()), cont)
        self.barrier()
        arr = np.array(box["raw"], dtype=object).reshape(u.shape)
        vals = ff.decode_array(arr, self.params, u.scale)
        return float(vals) if u.shape == () else vals

    def output_raw(self, u: SharedValue) -> np.ndarray:
        """Open without decoding (field integers); used by comparisons/tests."""
        self.ensure(u)
        box = {}

        def cont(opened):
            box["raw"] = opened

        self._enqueue_open("mask-open", list(u.frag.ravel()), cont)
        self.barrier()
        return np.array(box["raw"], dtype=object).reshape(u.shape)

    # ---- comparison ------------------------------------------------------------------

    def less_eq(self, u: SharedValue, v: SharedValue) -> SharedValue:
        """Shared bit [u <= v] via a dealer-assisted masked-bit comparison.

        Opens c = (v - u + 2**(k-1)) + r for a bundle-provided random r with
        known shared bits, then compares the low bits of r against the public
        low bits of c with a logarithmic prefix-product circuit.  Ties count
        as <= (the constraint checks use inclusive bounds).
        """
        params = self.params
        p = params.p
        k = params.k
        kp = k - 1
        w = self.sub(v, u)
        n = w.size
        bundles = [self.material.next_bundle() for _ in range(n)]
        self.ledger.bump("bits_consumed", n)
        bits = np.array(bundles, dtype=object)  # (n, K)
        weights = np.array([1 << i for i in range(bits.shape[1])], dtype=object)
        r_frag = (bits @ weights) % p
        shifted = self.add_raw_public(
            SharedValue(self, (n,), 0, _as_object(w.frag.ravel())), 1 << (k - 1)
        )
        masked = SharedValue(self, (n,), 0, (shifted.frag + r_frag) % p)
        c_open = self.output_raw(masked)  # statistically masked, safe to open

        low_weights = weights[:kp]
        r_low_frag = (bits[:, :kp] @ low_weights) % p
        c_int = [int(ci) for ci in c_open.ravel()]
        c_low = [ci % (1 << kp) for ci in c_int]

        # linear selections against the public bits of c
        g_frags = np.empty((n, kp), dtype=object)  # [r_i > c_i]
        e_frags = np.empty((n, kp), dtype=object)  # [r_i == c_i]
        one = 1 if self.party_id == 0 else 0
        for t in range(n):
            for i in range(kp):
                ci = (c_low[t] >> i) & 1
                bi = bits[t, i]
                g_frags[t, i] = 0 if ci else bi
                e_frags[t, i] = (bi if ci else (one - bi)) % p

        borrow = self._prefix_compare(g_frags, e_frags)

        inv2 = ff.field_inv(1 << (k - 1), params)
        out_frag = np.empty(n, dtype=object)
        for t in range(n):
            w_pp = shifted.frag.ravel()[t]
            c_tilde = c_low[t] if self.party_id == 0 else 0
            val = (w_pp - c_tilde + r_low_frag[t] - (1 << kp) * borrow.frag[t]) % p
            out_frag[t] = val * inv2 % p
        return SharedValue(self, w.shape, 0, out_frag.reshape(w.shape))

    def _prefix_compare(self, g_frags: np.ndarray, e_frags: np.ndarray) -> SharedValue:
        """borrow_t = sum_i g_{t,i} * prod_{j>i} e_{t,j} for each row t."""
        n, kp = g_frags.shape
        # suffix products of e via recursive doubling on the reversed array
        cur = SharedValue(self, (n, kp), 0, _as_object(e_frags[:, ::-1].copy()))
        offset = 1
        one_col = lambda width: (
            np.full((n, width), 1 if self.party_id == 0 else 0, dtype=object)
        )
        while offset < kp:
            left = cur[:, offset:]
            shifted_part = SharedValue(
                self, (n, kp - offset), 0, _as_object(cur.frag[:, :-offset].copy())
            )
            prod = self._beaver(left, shifted_part)
            self.ensure(prod)
            frag = np.concatenate([cur.frag[:, :offset], prod.frag], axis=1)
            cur = SharedValue(self, (n, kp), 0, _as_object(frag))
            offset *= 2
        # exclusive suffix products, back in ascending bit order
        incl = cur.frag[:, ::-1]
        excl = np.concatenate([incl[:, 1:], one_col(1)], axis=1)
        e_suffix = SharedValue(self, (n, kp), 0, _as_object(excl.copy()))
        g = SharedValue(self, (n, kp), 0, _as_object(g_frags.copy()))
        total = self._beaver(g, e_suffix, sum_axis=1)
        self.ensure(total)
        return total


class FloatShared:
    """Counting-session stand-in for SharedValue: plaintext value + scale."""

    __slots__ = ("session", "value", "scale")

    def __init__(self, session, value, scale):
        self.session = session
        self.value = np.asarray(value, dtype=float)
        self.scale = scale

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    @property
    def ready(self):
        return True

    def __add__(self, other):
        if isinstance(other, FloatShared):
            return self.session.add(self, other)
        return self.session.add_public(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, FloatShared):
            return self.session.sub(self, other)
        return self.session.add_public(self, -other)

    def __rsub__(self, other):
        return FloatShared(self.session, np.asarray(other, float) - self.value, self.scale)

    def __neg__(self):
        return FloatShared(self.session, -self.value, self.scale)

    def __getitem__(self, idx):
        return FloatShared(self.session, self.value[idx], self.scale)


class CountingSession(SessionOps):
    """Plaintext mirror of the ABB that only counts consumption.

    Used for preprocessing budgets and data-independence checks; arithmetic is
    exact floats, so results are also a convenient structural oracle.
    """

    is_counting = True

    def __init__(self, params: ff.FieldParams, n_parties: int = 3):
        self.params = params
        self.n_parties = n_parties
        self.party_id = 0
        self.reveal_allowed = True
        self.ledger = RoundLedger()
        self.trunc_by_shift: dict[int, int] = {}

    # constructors
    def public(self, x, scale=None):
        return FloatShared(self, x, self.params.h if scale is None else scale)

    def input(self, owner, x=None, shape=()):
        arr = np.zeros(shape) if x is None else np.asarray(x, dtype=float)
        return FloatShared(self, arr, self.params.h)

    # linear
    def add(self, u, v):
        return FloatShared(self, u.value + v.value, u.scale)

    def sub(self, u, v):
        return FloatShared(self, u.value - v.value, u.scale)

    def neg(self, u):
        return FloatShared(self, -u.value, u.scale)

    def add_public(self, u, c):
        return FloatShared(self, u.value + np.asarray(c, float), u.scale)

    def add_raw_public(self, u, raw):
        return FloatShared(self, u.value + raw / 2.0**u.scale, u.scale)

    def mul_public(self, u, c):
        arr = np.asarray(c)
        if arr.dtype.kind in "iu":
            return FloatShared(self, u.value * arr, u.scale)
        self._count_trunc(self.params.h, u.size)
        return FloatShared(self, u.value * np.asarray(arr, float), u.scale)

    def pub_matvec(self, c_matrix, v):
        c = np.asarray(c_matrix, dtype=float)
        self._count_trunc(self.params.h, c.shape[0])
        return FloatShared(self, c @ v.value, v.scale)

    def mul_public_raw(self, u, c):
        return FloatShared(self, u.value * np.asarray(c, float), u.scale + self.params.h)

    def lift_scale(self, u, bits):
        return FloatShared(self, u.value, u.scale + bits)

    def concat(self, parts, axis=0):
        return FloatShared(self, np.concatenate([p.value for p in parts], axis=axis),
                           parts[0].scale)

    def stack(self, parts, axis=0):
        return FloatShared(self, np.stack([p.value for p in parts], axis=axis),
                           parts[0].scale)

    def reshape(self, u, shape):
        return FloatShared(self, u.value.reshape(shape), u.scale)

    def exact_reciprocal(self, u):
        with np.errstate(all="ignore"):
            return FloatShared(self, 1.0 / u.value, u.scale)

    def exact_inv_sqrt(self, u):
        with np.errstate(all="ignore"):
            return FloatShared(self, 1.0 / np.sqrt(u.value), u.scale)

    # interactive
    def _beaver(self, u, v, sum_axis=None):
        bshape = np.broadcast_shapes(u.shape, v.shape)
        n = 1
        for d in bshape:
            n *= d
        self.ledger.bump("triples_consumed", n)
        # degenerate recording programs can walk through inf/nan legitimately
        with np.errstate(all="ignore"):
            prod = u.value * v.value
            if sum_axis is not None:
                prod = np.broadcast_to(prod, bshape).sum(axis=sum_axis)
        return FloatShared(self, prod, u.scale + v.scale)

    def _count_trunc(self, shift, n):
        self.ledger.bump("trunc_consumed", n)
        self.trunc_by_shift[shift] = self.trunc_by_shift.get(shift, 0) + n

    def truncate(self, x, shift=None, declared_scale=None):
        shift = x.scale - self.params.h if shift is None else shift
        new_scale = x.scale - shift if declared_scale is None else declared_scale
        self._count_trunc(shift, x.size)
        value = x.value * 2.0 ** (x.scale - shift - new_scale)
        return FloatShared(self, value, new_scale)

    def less_eq(self, u, v):
        kp = self.params.k - 1
        n = u.size if u.size >= v.size else v.size
        self.ledger.bump("bits_consumed", n)
        # same multiplication count as the real prefix circuit
        count, offset = 0, 1
        while offset < kp:
            count += kp - offset
            offset *= 2
        self.ledger.bump("triples_consumed", n * (count + kp))
        return FloatShared(self, (u.value <= v.value).astype(float), 0)

    def flush_batch(self):
        pass

    def ensure(self, *values):
        pass

    def barrier(self):
        pass

    @contextmanager
    def phase(self, name):
        self.ledger.push_phase(name)
        try:
            yield
        finally:
            self.ledger.pop_phase()

    def output(self, u, *, whitelisted=False):
        vals = u.value
        return float(vals) if vals.shape == () else vals.copy()

    def output_raw(self, u):
        return u.value.copy()
