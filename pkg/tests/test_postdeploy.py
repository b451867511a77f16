import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from inoculab.deploy import DeployConfig, EnsembleState, run_stream
from inoculab.errors import PreconditionError, TrainingError
from inoculab.evaluation import make_evaluator
from inoculab.postdeploy import (
    DefenseContext,
    DefenseRunState,
    RepairConfig,
    StreamSegment,
    defense_round,
    fine_tune,
    run_multi_round,
    segment_stream,
)
from inoculab.reveng import CycleGanTrainConfig, TreatmentSet
from inoculab.triggers import PoisonSpec, TargetMap, square_patch

GAN = CycleGanTrainConfig(epochs=2, batch_size=4, residual_blocks=1)


def _state(bd, gd, splits, spec, threshold=5, rounds=1, out_dir=None, evaluator=None):
    ensemble = EnsembleState(bd, gd, DeployConfig(repair_threshold=threshold, batch_size=8))
    context = DefenseContext(
        valid=splits.valid,
        gan_clean=splits.valid.subset(np.arange(8)),
        gan_cfg=GAN,
        repair_cfg=RepairConfig(epochs=1, rounds=rounds).resolved(1e-3),
        evaluator=evaluator,
        out_dir=out_dir,
        stream_pool=splits.stream,
    )
    return DefenseRunState(0, ensemble, context)


def test_repair_lr_defaults_to_tenth_of_attack_lr():
    assert RepairConfig().resolved(1e-3).learning_rate == pytest.approx(1e-4)
    assert RepairConfig(learning_rate=0.5).resolved(1e-3).learning_rate == 0.5
    with pytest.raises(TrainingError):
        RepairConfig(epochs=0)


def test_fine_tune_promotes_role(tiny_badnet, splits):
    cfg = RepairConfig(epochs=1).resolved(1e-3)
    treat = TreatmentSet(splits.valid.subset(np.arange(10)), "gen-1")
    repaired = fine_tune(tiny_badnet, treat, splits.valid, cfg)
    assert repaired.meta.role == "repaired-badnet"
    assert repaired.meta.parent == tiny_badnet.id
    assert repaired.meta.extra["treatment_generator"] == "gen-1"
    assert repaired.arch == tiny_badnet.arch
    assert fine_tune(tiny_badnet.with_meta(role="goodnet"), None, splits.valid, cfg).meta.role == "repaired-goodnet"


def test_fine_tune_is_deterministic(tiny_badnet, splits):
    cfg = RepairConfig(epochs=1, seed=3).resolved(1e-3)
    treat = TreatmentSet(splits.valid.subset(np.arange(10)), "gen-1")
    first = fine_tune(tiny_badnet, treat, splits.valid, cfg)
    second = fine_tune(tiny_badnet, treat, splits.valid, cfg)
    assert first.id == second.id
    assert all(torch.equal(first.state[k], v) for k, v in second.state.items())
    assert fine_tune(tiny_badnet, treat, splits.valid, replace(cfg, seed=4)).id != first.id


def test_fine_tune_needs_resolved_lr(tiny_badnet, splits):
    with pytest.raises(TrainingError):
        fine_tune(tiny_badnet, None, splits.valid, RepairConfig(epochs=1))


def test_segment_stream_keeps_full_trigger_numbering(splits):
    triggers = tuple(square_patch(3, (255,), x=x, y=1) for x in (1, 6, 11))
    spec = PoisonSpec(triggers, TargetMap("all-to-one", 2, target=0))
    items = segment_stream(StreamSegment((2,), ratio=1.0, length=40, seed=3), splits.stream, spec)
    assert len(items) == 40
    assert all(item.is_poisoned and item.trigger_index == 2 for item in items)
    assert all((item.image[1:4, 11:14] == 255).all() for item in items)


def test_round_needs_full_quarantine(constant_checkpoint, splits, fixture_spec):
    state = _state(constant_checkpoint(0), constant_checkpoint(1, role="goodnet"), splits, fixture_spec)
    with pytest.raises(PreconditionError):
        defense_round(state)


def test_defense_round_swaps_ensemble(tmp_path, constant_checkpoint, clean_stream, splits, fixture_spec):
    bd, gd = constant_checkpoint(0), constant_checkpoint(1, role="goodnet")
    evaluator = make_evaluator(splits.test, fixture_spec, poison_ratio=0.2)
    state = _state(bd, gd, splits, fixture_spec, out_dir=tmp_path, evaluator=evaluator)
    run_stream(state.ensemble, clean_stream(6))

    state = defense_round(state)
    assert state.round_index == 1
    record = state.history[0]
    new_bd, new_gd = state.ensemble.members()
    assert (record.bd_id, record.gd_id) == (new_bd.id, new_gd.id)
    assert new_bd.meta.role == "repaired-badnet" and new_bd.meta.parent == bd.id
    assert new_gd.meta.role == "repaired-goodnet" and new_gd.meta.parent == gd.id
    assert record.quarantine_used == 6
    assert state.ensemble.quarantine.since_repair() == 0
    assert set(record.metrics) == {"bd", "gd", "ensemble"}

    round_dir = tmp_path / "round-1"
    assert {p.name for p in round_dir.glob("*.nnckpt")} == {"generator.nnckpt", "bd.nnckpt", "gd.nnckpt"}
    saved = json.loads((round_dir / "metrics.json").read_text())
    assert saved["generator_id"] == record.generator_id


@pytest.mark.parametrize("background", [False, True])
def test_multi_round_schedule(background, constant_checkpoint, splits, fixture_spec):
    state = _state(constant_checkpoint(0), constant_checkpoint(1, role="goodnet"), splits, fixture_spec)
    schedule = [StreamSegment((0,), ratio=0.5, length=24, seed=1)]
    state = run_multi_round(state, schedule, fixture_spec, background=background)
    assert len(state.history) == 1
    assert state.round_index == 1
    assert len(state.stream_reports) == 1
    assert state.stream_reports[0].processed == 24


def test_multi_round_preconditions(constant_checkpoint, splits, fixture_spec):
    state = _state(constant_checkpoint(0), constant_checkpoint(1, role="goodnet"), splits, fixture_spec)
    with pytest.raises(PreconditionError):
        run_multi_round(state, [], fixture_spec)
    state.context.stream_pool = None
    with pytest.raises(PreconditionError):
        run_multi_round(state, [StreamSegment((0,), 0.5, 10)], fixture_spec)
