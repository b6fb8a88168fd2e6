import numpy as np
import pytest

from ela.divergence import padded_adjacent_kl
from ela.exceptions import ConfigError, IngestionError, StructuralError, ValidationError
from ela.mapping import MapperConfig, MapperKind
from ela.pruning import (
    AttentionTrace,
    PruneMask,
    RedundancyPruner,
    Stage,
    StageSchedule,
    flop_estimate,
    mask_for_active,
    mask_from_scores,
    merge_masks,
    preset_schedule,
    run_schedule,
    run_stage,
)
from ela.special import BetaParams
from ela.synthetic import simulate_trace
from ela.traceio import TraceRecord


def test_mask_from_scores_examples():
    assert mask_from_scores([0.5, 0.1, 0.9], 0.3, 4).bits == (1, 1, 0, 1)
    assert mask_from_scores([0.3, 0.6], 0.3, 3).bits == (1, 1, 1)   # ties keep
    assert mask_from_scores([0.1, 0.0, 0.2], 0.3, 4).bits == (1, 0, 0, 0)
    with pytest.raises(StructuralError):
        mask_from_scores([0.5], 0.3, 4)


def test_mask_for_active_maps_to_layers():
    m = mask_for_active([0.9, 0.1], 0.3, (1, 3, 4), 4)
    assert m.bits == (1, 1, 1, 0)


def test_first_bit_required():
    with pytest.raises(StructuralError):
        PruneMask((0, 1))


def test_merge_masks():
    a = PruneMask((1, 1, 0, 1), 1)
    b = PruneMask((1, 0, 1, 1), 2)
    assert merge_masks(a, b).bits == (1, 0, 0, 1)
    assert merge_masks(PruneMask.ones(4), PruneMask(a.bits, 1)).bits == a.bits
    assert merge_masks(a, PruneMask((1, 1, 1, 1), 2)).bits == a.bits
    with pytest.raises(StructuralError):
        merge_masks(a, PruneMask((1, 1, 1), 2))


def test_schedule_validation():
    mapper = MapperConfig()
    with pytest.raises(ConfigError):
        StageSchedule.from_windows([(3, 1)], mapper, 0.3)
    with pytest.raises(ConfigError):
        StageSchedule.from_windows([(1, 5), (4, 6)], mapper, 0.3)
    with pytest.raises(ConfigError):
        Stage(1, (1, 2), mapper, 1.5)
    s = preset_schedule("cifar")
    assert [st.epoch_window for st in s] == [(1, 3), (45, 48), (91, 93)]


def _dup_trace(epochs, *, layers=4, dup=3):
    """Layer ``dup`` copies layer ``dup - 1`` exactly, apart from a tiny self slot."""
    rng = np.random.default_rng(0)
    recs = []
    for e in range(1, epochs + 1):
        prev = None
        for l in range(1, layers + 1):
            if l == dup:
                w = np.append(prev * (1 - 1e-6), 1e-6)
            else:
                w = rng.dirichlet(np.ones(l) * 3)
            recs.append(TraceRecord(e, l, 0, tuple(float(x) for x in w)))
            prev = w
    return AttentionTrace(recs)


def test_fixed_zero_keeps_everything():
    trace = _dup_trace(3)
    sched = StageSchedule((Stage(1, (1, 3), MapperConfig(MapperKind.FIXED, fixed_k=0), 0.3),))
    audit = run_schedule(4, sched, trace)
    assert audit[-1].mask.bits == (1, 1, 1, 1)


def test_duplicate_layer_pruned_then_absent():
    trace = _dup_trace(10)
    sched = StageSchedule.from_windows([(1, 3), (8, 10)], MapperConfig(MapperKind.EBQM, 0.5, BetaParams(5, 1)), 0.3)
    audit = run_schedule(4, sched, trace)
    # manual pipeline: layer 3 has the smallest divergence, hence score F(0)=0
    d = trace.distributions(1)
    kl = [padded_adjacent_kl(d[l], d[l + 1]) for l in (1, 2, 3)]
    assert int(np.argmin(kl)) == 1
    assert audit[0].mask.bits[2] == 0
    assert 3 not in audit[1].series.active_layers


def test_stage_on_object_updates_its_mask():
    class Holder:
        layer_count = 4
        mask = PruneMask.ones(4)

    h = Holder()
    trace = _dup_trace(3)
    run_schedule(h, StageSchedule.from_windows([(1, 3)], MapperConfig(), 0.3), trace)
    assert h.mask.bits[2] == 0


def test_cifar_schedule_on_recorded_trace_is_monotone():
    trace = AttentionTrace(simulate_trace(8, 100, redundant=(3, 6), seed=1))
    audit = run_schedule(8, preset_schedule("cifar"), trace)
    assert len(audit) == 3
    counts = [len(r.series.active_layers) for r in audit]
    assert counts == sorted(counts, reverse=True)
    for a, b in zip(audit, audit[1:]):
        assert all(x >= y for x, y in zip(a.mask.bits, b.mask.bits))


def test_missing_epochs_named():
    trace = _dup_trace(2)
    stage = Stage(1, (1, 4), MapperConfig(), 0.3)
    with pytest.raises(IngestionError, match=r"\[3, 4\]"):
        run_stage(stage, trace, PruneMask.ones(4))


def test_trace_rejects_duplicates():
    rec = TraceRecord(1, 1, 0, (1.0,))
    with pytest.raises(ValidationError):
        AttentionTrace([rec, rec])


def test_single_active_layer_stage_is_a_noop():
    trace = _dup_trace(3)
    res = run_stage(Stage(2, (1, 3), MapperConfig(), 0.3), trace, PruneMask((1, 0, 0, 0), 1))
    assert res.mask.bits == (1, 0, 0, 0)
    assert len(res.series) == 0


def _flop_by_hand(bits, d):
    total, visible = 0, 0
    for b in bits:
        if b:
            visible += 1
            total += 3 * d * d + 2 * d * visible
    return total


def test_flop_estimate_closed_form():
    L, d = 4, 8
    full = flop_estimate((L, d))
    assert full == flop_estimate((L, d), PruneMask.ones(L))
    # 4 layers x 3*64 projections + 2*8*(1+2+3+4) slot products
    assert full[0] == 4 * 192 + 16 * 10 == _flop_by_hand((1, 1, 1, 1), d)
    assert full[1] == full[0] + L * (d * d + d)
    for bits in [(1, 0, 1, 1), (1, 1, 0, 0), (1, 0, 0, 0)]:
        k = bits.count(0)
        att = flop_estimate((L, d), PruneMask(bits))[0]
        assert att == _flop_by_hand(bits, d)
        assert 1 - att / full[0] >= k / L


def test_flop_single_layer():
    assert flop_estimate((1, 4))[0] == 3 * 16 + 2 * 4


def test_redundancy_pruner_estimator():
    trace = _dup_trace(3)
    rp = RedundancyPruner(windows=((1, 3),)).fit(trace)
    assert rp.mask_.bits[2] == 0
    assert rp.get_params()["tau"] == 0.3
    assert len(rp.audit_) == 1
