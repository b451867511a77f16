"""Этапы запуска: attack -> predeploy -> deploy -> treat -> repair -> eval.

Каждый этап пишет в `<out>/<run-id>/<stage>/` и отмечается в реестре; повторный
запуск с тем же хешем этапа ничего не делает без --force.
"""
import json
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd

from inoculab import settings
from inoculab.attacks import poison_training_set, train_adaptive_badnet, train_badnet, train_clean
from inoculab.config import ExperimentConfig, config_hash, dump_config, run_id, stage_hash, with_overrides
from inoculab.data import DatasetSplits, LabeledDataset, load_dataset, resample, split_dataset, subsample_validation
from inoculab.deploy import EnsembleState, QuarantineBuffer, StreamReport, run_stream, should_trigger_repair
from inoculab.errors import MetricError, PreconditionError
from inoculab.evaluation import emit_report, evaluate, make_evaluator, records_from_json, strip_record
from inoculab.nncore import load_checkpoint, save_checkpoint
from inoculab.postdeploy import (
    DefenseContext,
    DefenseRunState,
    RepairResult,
    StreamSegment,
    apply_repair,
    fine_tune,
    run_multi_round,
    segment_stream,
)
from inoculab.predeploy import NoiseSpec, run_grid, select_goodnet, write_grid_reports
from inoculab.recipes import get_recipe
from inoculab.registry import RunRegistry
from inoculab.reveng import generate_treatment, load_generator, save_generator, save_gallery, train_cyclegan, trigger_nmse
from inoculab.triggers import PoisonSpec

logger = logging.getLogger(__name__)

# Проб для оценки качества генератора
NMSE_PROBES = 200


@dataclass
class RunContext:
    cfg: ExperimentConfig
    registry: RunRegistry
    force: bool = False
    gallery: bool = False
    # Разрешить лечение на карантине меньше порога ремонта
    allow_short: bool = False

    @cached_property
    def splits(self) -> DatasetSplits:
        ds_cfg = self.cfg.dataset
        ds = load_dataset(ds_cfg.name, root=self.cfg.data_root)
        splits = split_dataset(ds, ds_cfg.counts, ds_cfg.split_seed, ds_cfg.stream_test_mode)
        if ds_cfg.valid_fraction < 1:
            splits = subsample_validation(splits, ds_cfg.valid_fraction, ds_cfg.split_seed)
        return splits

    @cached_property
    def spec(self) -> PoisonSpec:
        train = self.splits.train if len(self.splits.train) else self.splits.valid
        return self.cfg.attack.poison_spec(train.image_shape, train.num_classes)

    def stage_hash(self, stage: str) -> str:
        return stage_hash(self.cfg, stage)

    def path(self, stage: str, name: str) -> Path:
        return self.registry.run_dir / stage / name

    def require(self, stage: str) -> Path:
        return self.registry.require_stage(stage, self.stage_hash(stage))

    def completed(self, stage: str) -> bool:
        return self.registry.stage_completed(stage, self.stage_hash(stage))

    def begin(self, stage: str) -> bool:
        return self.registry.begin_stage(stage, force=self.force, stage_hash=self.stage_hash(stage))

    def deployed_badnet_path(self) -> Path:
        # Адаптивный атакующий поставляет свою BadNet вместо обычной
        name = "adaptive-badnet.nnckpt" if self.cfg.attack.adaptive_gamma > 0 else "badnet.nnckpt"
        return self.path("attack", name)

    def require_repair_condition(self, quarantine: QuarantineBuffer) -> None:
        threshold = self.cfg.deploy.repair_threshold
        if quarantine.since_repair() >= threshold:
            return
        if not self.allow_short:
            raise PreconditionError(
                f"quarantine holds {quarantine.since_repair()} new items, repair needs {threshold}; "
                f"pass --allow-short-quarantine to treat it anyway"
            )
        logger.warning(f"Treating {quarantine.since_repair()} quarantined items, "
                       f"fewer than the repair threshold {threshold}")

    def gan_clean(self) -> LabeledDataset:
        valid = self.splits.valid
        return resample(valid, min(self.cfg.deploy.clean_sample_for_gan, len(valid)), self.cfg.cyclegan.seed)


def open_run(cfg: ExperimentConfig, force: bool = False, gallery: bool = False, allow_short: bool = False) -> RunContext:
    out_root = Path(cfg.out) if cfg.out else settings.OUT_ROOT
    registry = RunRegistry(out_root, run_id(cfg), config_hash(cfg))
    dump_config(cfg, registry.run_dir / "config.yaml")
    return RunContext(cfg, registry, force=force, gallery=gallery, allow_short=allow_short)


def _save(ctx: RunContext, stage: str, ckpt, name: str) -> Path:
    path = save_checkpoint(ckpt, ctx.path(stage, name))
    ctx.registry.add_artifact(stage, "checkpoint", path, checkpoint=ckpt)
    return path


def cmd_attack(ctx: RunContext) -> Path:
    if not ctx.begin("attack"):
        return ctx.path("attack", "")
    cfg = ctx.cfg
    out = ctx.registry.stage_dir("attack")
    splits, spec = ctx.splits, ctx.spec
    train_cfg = cfg.attack.train

    poisoned = poison_training_set(splits.train, spec, train_cfg, np.random.default_rng(train_cfg.seed))
    bd = train_badnet(cfg.dataset.arch_id, poisoned, train_cfg)
    _save(ctx, "attack", bd, "badnet.nnckpt")
    spec_path = out / "poison_spec.json"
    spec_path.write_text(json.dumps(spec.to_dict(), indent=2))
    ctx.registry.add_artifact("attack", "poison-spec", spec_path)

    if cfg.attack.train_clean_baseline:
        _save(ctx, "attack", train_clean(cfg.dataset.arch_id, splits.train, train_cfg), "clean.nnckpt")
    if cfg.attack.adaptive_gamma > 0:
        adaptive = train_adaptive_badnet(cfg.dataset.arch_id, splits.train, spec, train_cfg,
                                         NoiseSpec(cfg.attack.adaptive_gamma))
        _save(ctx, "attack", adaptive, "adaptive-badnet.nnckpt")
    ctx.registry.finish_stage("attack")
    return out


def cmd_predeploy(ctx: RunContext) -> Path:
    ctx.require("attack")
    if not ctx.begin("predeploy"):
        return ctx.path("predeploy", "")
    cfg = ctx.cfg
    out = ctx.registry.stage_dir("predeploy")
    bd = load_checkpoint(ctx.deployed_badnet_path())
    test, spec = ctx.splits.test, ctx.spec

    def cell_asr(ckpt) -> float:
        # Только для тепловой карты; выбор GoodNet ее не видит
        return float(np.mean(evaluate(ckpt, test, spec, stage="grid", seed=cfg.eval.seed).asr_values))

    cells, baseline_ca = run_grid(bd, ctx.splits.valid, cfg.grid, cfg.alpha0, evaluator=cell_asr)
    selected = select_goodnet(cells, baseline_ca, cfg.grid.theta_drop)
    _save(ctx, "predeploy", selected.checkpoint, "goodnet.nnckpt")
    for path in write_grid_reports(cells, selected, baseline_ca, out):
        ctx.registry.add_artifact("predeploy", "report", path)
    ctx.registry.finish_stage("predeploy")
    return out


def deploy_stream(ctx: RunContext) -> list:
    deploy = ctx.cfg.deploy
    pool = ctx.splits.stream
    indices = deploy.trigger_indices or tuple(range(len(ctx.spec.triggers)))
    segment = StreamSegment(tuple(indices), deploy.poison_ratio, deploy.stream_length or len(pool),
                            seed=ctx.cfg.seed, exact_count=deploy.exact_count)
    return segment_stream(segment, pool, ctx.spec)


def cmd_deploy(ctx: RunContext) -> Path:
    ctx.require("predeploy")
    if not ctx.begin("deploy"):
        return ctx.path("deploy", "")
    cfg = ctx.cfg
    out = ctx.registry.stage_dir("deploy")
    quarantine_dir = out / "quarantine"
    report_path = out / "stream_report.json"

    position = ctx.registry.stage_position("deploy")
    if position and report_path.exists():
        logger.info(f"Resuming deployment at stream position {position}")
        quarantine = QuarantineBuffer.load(quarantine_dir)
        report = StreamReport.from_dict(json.loads(report_path.read_text()))
    else:
        position = 0
        quarantine, report = QuarantineBuffer(), StreamReport()

    bd = load_checkpoint(ctx.deployed_badnet_path())
    gd = load_checkpoint(ctx.path("predeploy", "goodnet.nnckpt"), expected_arch=bd.arch)
    state = EnsembleState(bd, gd, cfg.deploy, quarantine)

    def persist(pos, state, report):
        state.quarantine.save(quarantine_dir)
        report.write(report_path)
        ctx.registry.set_stage_position("deploy", pos)

    _, state, report = run_stream(state, deploy_stream(ctx), start=position, report=report,
                                  stop_on_repair=True, on_checkpoint=persist)
    persist(report.position, state, report)
    if not should_trigger_repair(state):
        logger.warning(
            f"Stream ended with {len(state.quarantine)} quarantined items, "
            f"below the repair threshold {cfg.deploy.repair_threshold}"
        )
    ctx.registry.add_artifact("deploy", "quarantine", quarantine_dir / "index.json")
    ctx.registry.add_artifact("deploy", "report", report_path)
    ctx.registry.finish_stage("deploy")
    return out


def cmd_treat(ctx: RunContext) -> Path:
    ctx.require("deploy")
    if not ctx.begin("treat"):
        return ctx.path("treat", "")
    cfg = ctx.cfg
    out = ctx.registry.stage_dir("treat")
    quarantine = QuarantineBuffer.load(ctx.path("deploy", "quarantine"))
    if len(quarantine) == 0:
        raise PreconditionError("quarantine is empty; the ensemble never disagreed on the stream")
    ctx.require_repair_condition(quarantine)

    bd = load_checkpoint(ctx.deployed_badnet_path())
    snapshot = quarantine.snapshot(cfg.deploy.quarantine_policy)
    generator = train_cyclegan(ctx.gan_clean().images, snapshot.images(), cfg.cyclegan, parent=bd.id,
                               config_hash=ctx.stage_hash("treat"))
    gen_path = save_generator(generator, out / "generator.nnckpt")
    ctx.registry.add_artifact("treat", "generator", gen_path, checkpoint=generator)

    valid = ctx.splits.valid
    treat = generate_treatment(generator, valid)
    np.savez_compressed(out / "treatment.npz", images=treat.dataset.images, labels=treat.dataset.labels)
    ctx.registry.add_artifact("treat", "treatment-set", out / "treatment.npz")

    quality = {"generator_id": generator.id, "quarantine_used": len(snapshot), "history": generator.history}
    probes = ctx.splits.test.subset(np.arange(min(NMSE_PROBES, len(ctx.splits.test))))
    try:
        quality["trigger_nmse"] = trigger_nmse(generator, ctx.spec, probes, seed=cfg.eval.seed)
    except MetricError as e:
        logger.warning(f"Generator quality not measured: {e}")
        quality["trigger_nmse"] = None
    (out / "quality.json").write_text(json.dumps(quality, indent=2))
    ctx.registry.add_artifact("treat", "report", out / "quality.json")

    if ctx.gallery:
        ctx.registry.add_artifact("treat", "gallery", save_gallery(generator, valid.images, out / "gallery.png"))
    ctx.registry.finish_stage("treat")
    return out


def _evaluator(ctx: RunContext, prefix: str = ""):
    cfg = ctx.cfg
    return make_evaluator(ctx.splits.test, ctx.spec, cfg.deploy.poison_ratio, cfg.eval.per_trigger,
                          cfg.eval.seed, prefix=prefix)


def cmd_repair(ctx: RunContext) -> Path:
    ctx.require("treat")
    if not ctx.begin("repair"):
        return ctx.path("repair", "")
    cfg = ctx.cfg
    out = ctx.registry.stage_dir("repair")
    repair_cfg = cfg.repair_config()
    valid = ctx.splits.valid

    bd = load_checkpoint(ctx.deployed_badnet_path())
    gd = load_checkpoint(ctx.path("predeploy", "goodnet.nnckpt"), expected_arch=bd.arch)
    generator = load_generator(ctx.path("treat", "generator.nnckpt"))
    quarantine = QuarantineBuffer.load(ctx.path("deploy", "quarantine"))
    ctx.require_repair_condition(quarantine)

    context = DefenseContext(
        valid=valid,
        gan_clean=ctx.gan_clean(),
        gan_cfg=cfg.cyclegan,
        repair_cfg=repair_cfg,
        evaluator=_evaluator(ctx, prefix="post-deployment "),
        out_dir=out,
        stream_pool=ctx.splits.stream,
    )
    state = DefenseRunState(0, EnsembleState(bd, gd, cfg.deploy, quarantine), context)

    # Первый раунд использует генератор этапа treat
    treat = generate_treatment(generator, valid)
    result = RepairResult(
        round=1,
        generator=generator,
        bd=fine_tune(bd, treat, valid, repair_cfg, tag="round 1 bd"),
        gd=fine_tune(gd, treat, valid, repair_cfg, tag="round 1 gd"),
        quarantine_used=len(quarantine),
    )
    apply_repair(state, result)
    if cfg.schedule and repair_cfg.rounds > 1:
        run_multi_round(state, cfg.schedule, ctx.spec, background=repair_cfg.background)

    for record in state.history:
        round_dir = out / f"round-{record.round}"
        ctx.registry.add_artifact("repair", "generator", round_dir / "generator.nnckpt",
                                  checkpoint=load_generator(round_dir / "generator.nnckpt"))
        for name in ("bd.nnckpt", "gd.nnckpt"):
            ctx.registry.add_artifact("repair", "checkpoint", round_dir / name,
                                      checkpoint=load_checkpoint(round_dir / name))
        ctx.registry.add_metrics("repair", list(record.metrics.values()))
    (out / "history.json").write_text(json.dumps([r.to_dict() for r in state.history], indent=2))
    for k, report in enumerate(state.stream_reports):
        ctx.registry.add_artifact("repair", "report", report.write(out / f"segment-{k + 1}-report.json"))
    ctx.registry.finish_stage("repair")
    return out


def final_round_dir(ctx: RunContext) -> Path:
    rounds = sorted(ctx.path("repair", "").glob("round-*"), key=lambda p: int(p.name.split("-")[1]))
    if not rounds:
        raise PreconditionError(f"repair stage of run {ctx.registry.run_id} has no round directories")
    return rounds[-1]


def cmd_eval(ctx: RunContext) -> list:
    ctx.require("attack")
    if not ctx.begin("eval"):
        return records_from_json(ctx.path("eval", "report.json"))
    cfg = ctx.cfg
    out = ctx.registry.stage_dir("eval")
    test, spec = ctx.splits.test, ctx.spec
    ratio = cfg.deploy.poison_ratio

    def row(subject, stage, row_spec=spec):
        return evaluate(subject, test, row_spec, stage, ratio, cfg.eval.per_trigger, cfg.eval.seed)

    bd = load_checkpoint(ctx.deployed_badnet_path())
    records = [row(bd, "baseline")]
    if cfg.attack.adaptive_gamma > 0:
        records.append(row(load_checkpoint(ctx.path("attack", "badnet.nnckpt")), "non-adaptive baseline"))
    if cfg.attack.train_clean_baseline:
        records.append(row(load_checkpoint(ctx.path("attack", "clean.nnckpt")), "clean"))
    if cfg.eval.strip is not None:
        records.append(strip_record(records[0], cfg.eval.strip["far"], cfg.eval.strip["frr"]))

    final = [("baseline", bd)]
    if ctx.completed("predeploy"):
        gd = load_checkpoint(ctx.path("predeploy", "goodnet.nnckpt"), expected_arch=bd.arch)
        records += [row(gd, "pre-deployment"), row((bd, gd), "pre-deployment ensemble")]
    if ctx.completed("repair"):
        round_dir = final_round_dir(ctx)
        repaired = load_checkpoint(round_dir / "bd.nnckpt")
        repaired_gd = load_checkpoint(round_dir / "gd.nnckpt", expected_arch=repaired.arch)
        records += [
            row(repaired, "post-deployment"),
            row(repaired_gd, "post-deployment gd"),
            row((repaired, repaired_gd), "post-deployment ensemble"),
        ]
        final.append(("post-deployment", repaired))

    if cfg.eval.per_part:
        for i, trig in enumerate(spec.triggers):
            for part in trig.parts:
                part_spec = PoisonSpec((part,), spec.single(i).target_map)
                for label, subject in final:
                    records.append(row(subject, f"{label} part:{part.label}", part_spec))

    for path in emit_report(records, out):
        ctx.registry.add_artifact("eval", "report", path)
    ctx.registry.add_metrics("eval", records)
    ctx.registry.finish_stage("eval")
    return records


STAGES = {
    "attack": cmd_attack,
    "predeploy": cmd_predeploy,
    "deploy": cmd_deploy,
    "treat": cmd_treat,
    "repair": cmd_repair,
    "eval": cmd_eval,
}


def run_stage(cfg: ExperimentConfig, stage: str, force: bool = False, gallery: bool = False, allow_short: bool = False):
    ctx = open_run(cfg, force=force, gallery=gallery, allow_short=allow_short)
    try:
        with ctx.registry.lock():
            return STAGES[stage](ctx)
    finally:
        ctx.registry.close()


def cmd_reproduce(recipe_id: str, seed=None, out=None, data_root=None, force: bool = False) -> Path:
    recipe = get_recipe(recipe_id)
    records, quality_rows = [], []
    out_root = None
    for label, cfg in recipe.variants:
        cfg = with_overrides(cfg, seed=seed, out=out, data_root=data_root)
        ctx = open_run(cfg, force=force)
        out_root = ctx.registry.out_root
        logger.info(f"Recipe {recipe_id}: variant {label} in {ctx.registry.run_dir}")
        try:
            with ctx.registry.lock():
                for stage in recipe.stages:
                    STAGES[stage](ctx)
        except PreconditionError as e:
            logger.warning(f"Variant {label} stopped early: {e}")
            continue
        finally:
            ctx.registry.close()
        if "eval" in recipe.stages:
            for record in records_from_json(ctx.path("eval", "report.json")):
                record.stage = f"{label} {record.stage}" if len(recipe.variants) > 1 else record.stage
                records.append(record)
        if "treat" in recipe.stages and "repair" not in recipe.stages:
            quality = json.loads(ctx.path("treat", "quality.json").read_text())
            quality_rows.append({"variant": label, "quarantine_used": quality["quarantine_used"],
                                 "trigger_nmse": quality["trigger_nmse"]})

    report_dir = (out_root or settings.OUT_ROOT) / f"reproduce-{recipe_id}"
    report_dir.mkdir(parents=True, exist_ok=True)
    if records:
        emit_report(records, report_dir)
    if quality_rows:
        pd.DataFrame(quality_rows).to_csv(report_dir / "gan_quality.csv", index=False, float_format="%.4f")
    logger.info(f"Recipe {recipe_id} finished, reports in {report_dir}")
    return report_dir
