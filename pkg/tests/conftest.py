"""Shared fixtures: an in-process MPC fleet over the loopback transport."""

import random
import threading

import numpy as np
import pytest

from ppfa import dealer as dl
from ppfa import fieldfix as ff
from ppfa import securepfa as sp
from ppfa import transport as tp
from ppfa.abb import AbbSession, CountingSession


def run_fleet(n_parties, budget, fn, *, params=ff.DEFAULT_PARAMS, seed=1234,
              latency_ms=0.0, reveal_allowed=True, session_id=0):
    """Deal material in memory and run fn(session, party_id) per party thread.

    Returns the per-party results; re-raises the first party error.
    """
    mats = dl.deal(budget, n_parties, params, seed, session_id)
    topo = tp.PartyTopology(n=n_parties, latency_ms=latency_ms)
    hub = tp.LoopbackHub(topo, params, session_id)
    results = [None] * n_parties
    errors = []

    def worker(i):
        channel = hub.connect(i)
        session = AbbSession(
            channel,
            dl.MaterialStream(mats[i]),
            reveal_allowed=reveal_allowed,
            rng=random.Random(seed * 7919 + i),
        )
        try:
            results[i] = fn(session, i)
        except BaseException as exc:
            errors.append(exc)
            hub.fail()

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(n_parties)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return results


def simple_budget(triples=0, trunc_h=0, bundles=0, params=ff.DEFAULT_PARAMS,
                  extra_shifts=None):
    shifts = {params.h: trunc_h}
    for s, c in (extra_shifts or {}).items():
        shifts[s] = shifts.get(s, 0) + c
    return dl.PreprocessingBudget(
        triples=triples,
        trunc_pairs=shifts,
        bit_bundles=bundles,
        bits_per_bundle=params.k + params.lambda_stat,
    )


@pytest.fixture
def toy_params():
    return ff.FieldParams(p=ff.P_TOY, h=2, k=6, lambda_stat=12)


def record_calibration(grid, cfg, fn, base=None):
    """Calibration whose reciprocal/sqrt sites follow a custom program ``fn``.

    ``fn(prog, session, party_id)`` must issue the same op sequence at every
    party (data-independent control flow).
    """
    base = base or sp.calibrate(grid, cfg)
    recorder = sp.Calibration(
        newton_iters=base.newton_iters, epsilon_exp=base.epsilon_exp,
        gmres_schedule=base.gmres_schedule, cert_bound=base.cert_bound,
        vi_frac=base.vi_frac, recording=True,
    )
    session = CountingSession(ff.DEFAULT_PARAMS, 2)
    fn(sp.SecurePfa(session, grid, cfg, recorder), session, 0)
    sqrt_ceiling = 64.0 * max(
        [1.0] + [float(np.max(v)) * cfg.range_pad
                 for v in recorder._sqrt_values if len(v)])
    recip_ceiling = 16.0 * max(
        [1.0] + [float(np.max(np.abs(v))) * cfg.range_pad
                 for v in recorder._recip_values if len(v)])
    return sp.Calibration(
        newton_iters=base.newton_iters, epsilon_exp=base.epsilon_exp,
        gmres_schedule=base.gmres_schedule, cert_bound=base.cert_bound,
        vi_frac=base.vi_frac,
        recip_sites=[sp._site_from_values(v, cfg.range_pad, False, recip_ceiling)
                     for v in recorder._recip_values],
        sqrt_sites=[sp._site_from_values(v, cfg.range_pad, True, sqrt_ceiling)
                    for v in recorder._sqrt_values],
    )


def budget_for_program(grid, cfg, cal, fn, margin=0.10):
    """Exact consumption of ``fn`` via a counting pass, plus a margin."""
    session = CountingSession(ff.DEFAULT_PARAMS, 2)
    fn(sp.SecurePfa(session, grid, cfg, cal), session, 0)
    pad = lambda v: int(v + max(8, round(v * margin)))
    return dl.PreprocessingBudget(
        triples=pad(session.ledger.triples_consumed),
        trunc_pairs={s: pad(v) for s, v in session.trunc_by_shift.items()},
        bit_bundles=pad(session.ledger.bits_consumed),
        bits_per_bundle=ff.DEFAULT_PARAMS.k + ff.DEFAULT_PARAMS.lambda_stat,
    )


def run_secure_program(grid, cfg, fn, n_parties=3, cal=None, seed=11,
                       latency_ms=0.0, reveal=True, budget=None):
    """Run fn(prog, session, party) on a full loopback fleet with material."""
    cal = cal or record_calibration(grid, cfg, fn)
    budget = budget or budget_for_program(grid, cfg, cal, fn)
    mats = dl.deal(budget, n_parties, ff.DEFAULT_PARAMS, seed)
    topo = tp.PartyTopology(n=n_parties, latency_ms=latency_ms)
    hub = tp.LoopbackHub(topo, ff.DEFAULT_PARAMS)
    results = [None] * n_parties
    errors = []

    def worker(i):
        channel = hub.connect(i)
        session = AbbSession(channel, dl.MaterialStream(mats[i]),
                             reveal_allowed=reveal,
                             rng=random.Random(seed * 131 + i))
        try:
            results[i] = fn(sp.SecurePfa(session, grid, cfg, cal), session, i)
        except BaseException as exc:
            errors.append(exc)
            hub.fail()

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(n_parties)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return results, cal


def loads_by_owner(grid, n_parties, party_id):
    owners = sp.SecurePfa.bus_owners(grid, n_parties)
    return {b: (grid.p0[b], grid.q0[b]) for b in owners
            if owners[b] == party_id}


def full_run_fn(grid, n_parties):
    def fn(prog, session, party):
        loads = loads_by_owner(grid, n_parties, party)
        if session.is_counting:
            owners = sp.SecurePfa.bus_owners(grid, n_parties)
            loads = {b: (grid.p0[b], grid.q0[b]) for b in owners}
        out = prog.run(loads)
        out["ledger"] = session.ledger.snapshot()
        out["cache_hits"] = prog.cache_hits
        return out

    return fn
