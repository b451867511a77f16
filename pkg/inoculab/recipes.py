"""Готовые рецепты экспериментов для `inoculab reproduce`."""
import logging
from dataclasses import dataclass, replace

from inoculab.attacks import AttackTrainConfig
from inoculab.config import AttackConfig, DatasetConfig, EvalConfig, ExperimentConfig
from inoculab.deploy import DeployConfig
from inoculab.errors import ConfigError
from inoculab.postdeploy import RepairConfig, StreamSegment
from inoculab.predeploy import GridSearchConfig
from inoculab.reveng import CycleGanTrainConfig

logger = logging.getLogger(__name__)

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)

# Полный прогон по умолчанию; у части рецептов он короче
FULL_PIPELINE = ("attack", "predeploy", "deploy", "treat", "repair", "eval")


@dataclass(frozen=True)
class Recipe:
    recipe_id: str
    description: str
    # ((метка варианта, конфиг), ...)
    variants: tuple
    stages: tuple = FULL_PIPELINE


def _mnist(run_name: str) -> ExperimentConfig:
    # В MNIST у цифры 5 всего 6313 изображений: бюджет на класс урезан под нее
    return ExperimentConfig(
        dataset=DatasetConfig(name="mnist", counts=(4900, 450, 900), arch_id="mnist-cnn"),
        attack=AttackConfig(
            preset="aaa",
            train=AttackTrainConfig(poison_fraction=0.1, epochs=20, batch_size=32, learning_rate=1e-4,
                                    optimizer_id="adam", preprocessing_id="scale-1/255"),
        ),
        grid=GridSearchConfig(epochs=10, batch_size=32, optimizer_id="adam"),
        deploy=DeployConfig(poison_ratio=0.2),
        cyclegan=CycleGanTrainConfig.desk(),
        repair=RepairConfig(epochs=10, optimizer_id="adam", batch_size=32),
        run_name=run_name,
    )


def mnist_aaa() -> Recipe:
    base = _mnist("mnist-aaa")
    cfg = replace(base, attack=replace(base.attack, train_clean_baseline=True),
                  eval=EvalConfig(strip={"far": 98.39, "frr": 5.0}))
    return Recipe("mnist-aaa", "MNIST all-to-all BadNet: baseline, pre- and post-deployment rows", (("mnist-aaa", cfg),))


def cifar_tca() -> Recipe:
    cfg = ExperimentConfig(
        dataset=DatasetConfig(name="cifar10", counts=(5000, 500, 450), arch_id="cifar-cnn"),
        attack=AttackConfig(
            preset="tca",
            train=AttackTrainConfig(
                poison_fraction=0.1, epochs=60, batch_size=128, learning_rate=0.001,
                lr_schedule=((24, 0.01), (42, 0.005)), optimizer_id="sgd", preprocessing_id="standardize",
                norm_mean=CIFAR_MEAN, norm_std=CIFAR_STD, decoy_parts=True,
            ),
        ),
        grid=GridSearchConfig(epochs=10, batch_size=128, optimizer_id="sgd"),
        deploy=DeployConfig(poison_ratio=0.2),
        cyclegan=CycleGanTrainConfig.desk(),
        repair=RepairConfig(epochs=10, optimizer_id="sgd", batch_size=128),
        eval=EvalConfig(per_part=True),
        run_name="cifar-tca",
    )
    return Recipe("cifar-tca", "CIFAR-10 trigger-combination attack with single-part decoys", (("cifar-tca", cfg),))


def mnist_cla() -> Recipe:
    base = _mnist("mnist-cla")
    cfg = replace(
        base,
        dataset=replace(base.dataset, arch_id="cla-cnn"),
        attack=AttackConfig(
            preset="cla",
            train=AttackTrainConfig(poison_fraction=0.8, epochs=25, batch_size=32, learning_rate=1.0,
                                    optimizer_id="adadelta"),
        ),
        grid=replace(base.grid, optimizer_id="adadelta"),
        repair=replace(base.repair, optimizer_id="adadelta"),
    )
    return Recipe("mnist-cla", "MNIST clean-label attack on the custom small network", (("mnist-cla", cfg),))


def adaptive_pre() -> Recipe:
    base = _mnist("adaptive-pre")
    cfg = replace(base, attack=replace(base.attack, adaptive_gamma=0.3))
    return Recipe("adaptive-pre", "Attacker applies the noise augmentation while training the BadNet",
                  (("adaptive-pre", cfg),))


def adaptive_online() -> Recipe:
    base = _mnist("adaptive-online")
    cfg = replace(
        base,
        attack=replace(base.attack, preset="mtmta"),
        deploy=replace(base.deploy, trigger_indices=(0, 1)),
        repair=replace(base.repair, rounds=2),
        schedule=(StreamSegment(trigger_indices=(2,), ratio=0.2, length=5000, seed=1),),
        eval=EvalConfig(per_trigger=True),
    )
    return Recipe("adaptive-online", "Triggers deployed one after another, repaired round by round",
                  (("adaptive-online", cfg),))


def valid_size_sweep() -> Recipe:
    variants = []
    for fraction in (0.25, 0.5, 0.75, 1.0):
        base = _mnist(f"valid-{int(fraction * 100)}")
        variants.append((f"valid={fraction:g}", replace(base, dataset=replace(base.dataset, valid_fraction=fraction))))
    return Recipe("valid-size-sweep", "Defense quality versus validation set size", tuple(variants))


def ablation() -> Recipe:
    variants = []
    for label, noise, adapt in (("full", True, True), ("no-noise", False, True), ("no-adaptive-lr", True, False)):
        base = _mnist(f"ablation-{label}")
        grid = replace(base.grid, use_noise_augmentation=noise, use_adaptive_lr=adapt)
        variants.append((label, replace(base, grid=grid)))
    return Recipe("ablation", "Pre-deployment defense without noise augmentation or adaptive learning rate",
                  tuple(variants))


def poison_ratio_sweep() -> Recipe:
    variants = []
    for ratio in (0.02, 0.04, 0.06, 0.1, 0.2, 0.5):
        base = _mnist(f"ratio-{ratio:g}")
        # Поток с возвращением, чтобы карантин успел набраться при малых долях
        deploy = replace(base.deploy, poison_ratio=ratio, stream_length=20000)
        variants.append((f"ratio={ratio:g}", replace(base, deploy=deploy)))
    return Recipe("poison-ratio-sweep", "Post-deployment CA and ASR versus poisoned share of the stream",
                  tuple(variants))


def fixture_smoke(run_name: str = "fixture-smoke") -> ExperimentConfig:
    return ExperimentConfig(
        dataset=DatasetConfig(name="synthetic-fixture", counts=(100, 40, 60), arch_id="mnist-cnn"),
        attack=AttackConfig(
            preset="fixture-patch",
            train=AttackTrainConfig(poison_fraction=0.2, epochs=3, batch_size=32, learning_rate=1e-3),
        ),
        grid=GridSearchConfig(multiples=(1, 2), gammas=(0.1, 0.3), theta_drop=50.0, epochs=1, batch_size=32),
        deploy=DeployConfig(repair_threshold=5, clean_sample_for_gan=20, poison_ratio=0.5, batch_size=16),
        cyclegan=CycleGanTrainConfig(epochs=2, batch_size=4, residual_blocks=1),
        repair=RepairConfig(epochs=1, batch_size=32),
        run_name=run_name,
    )


def gan_quality() -> Recipe:
    variants = []
    for size in (200, 1000):
        base = fixture_smoke(f"gan-quality-{size}")
        deploy = replace(base.deploy, repair_threshold=size, clean_sample_for_gan=40, poison_ratio=0.5,
                         stream_length=6 * size)
        variants.append((f"quarantine={size}", replace(base, deploy=deploy, cyclegan=CycleGanTrainConfig.desk())))
    return Recipe("gan-quality", "Reverse-engineered trigger quality versus quarantine size", tuple(variants),
                  stages=("attack", "predeploy", "deploy", "treat"))


RECIPES = {
    "mnist-aaa": mnist_aaa,
    "cifar-tca": cifar_tca,
    "mnist-cla": mnist_cla,
    "adaptive-pre": adaptive_pre,
    "adaptive-online": adaptive_online,
    "valid-size-sweep": valid_size_sweep,
    "ablation": ablation,
    "poison-ratio-sweep": poison_ratio_sweep,
    "gan-quality": gan_quality,
    "fixture-smoke": lambda: Recipe("fixture-smoke", "Tiny end-to-end run on the synthetic fixture",
                                    (("fixture-smoke", fixture_smoke()),)),
}


def get_recipe(recipe_id: str) -> Recipe:
    if recipe_id not in RECIPES:
        raise ConfigError(f"unknown recipe '{recipe_id}', expected one of {sorted(RECIPES)}")
    recipe = RECIPES[recipe_id]()
    logger.info(f"Recipe {recipe_id}: {len(recipe.variants)} variant(s)")
    return recipe
