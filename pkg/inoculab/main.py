import argparse
import logging
import sys

from inoculab import pipeline, settings
from inoculab.config import ExperimentConfig, dump_config, load_config, with_overrides
from inoculab.errors import InoculabError
from inoculab.recipes import get_recipe

logger = logging.getLogger(__name__)

STAGE_COMMANDS = ("attack", "predeploy", "deploy", "treat", "repair", "eval")


def setup_logging(level: str = None) -> None:
    # Настройка логирования
    logging.basicConfig(
        level=getattr(logging, level or settings.LOG_LEVEL, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inoculab", description="Защита от BadNet: предразвертывание, карантин и лечение")
    parser.add_argument("--version", action="version", version=f"inoculab {settings.TOOL_VERSION}")
    commands = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="общий seed поверх конфига")
    common.add_argument("--out", default=None, help="корень каталогов запусков")
    common.add_argument("--data-root", default=None, help="каталог с датасетами")
    common.add_argument("--force", action="store_true", help="пересчитать уже выполненный этап")
    common.add_argument("--dump-config", action="store_true", help="напечатать итоговый конфиг и выйти")
    common.add_argument("--log-level", default=None, help="уровень логирования (DEBUG, INFO, ...)")

    for name in STAGE_COMMANDS:
        sub = commands.add_parser(name, parents=[common], help=f"этап {name}")
        sub.add_argument("--config", default=None, help="YAML-конфиг эксперимента")
        if name == "treat":
            sub.add_argument("--gallery", action="store_true", help="сохранить сетку пар (x, G(x))")
        if name in ("treat", "repair"):
            sub.add_argument("--allow-short-quarantine", action="store_true",
                             help="лечить карантин меньше порога ремонта")

    reproduce = commands.add_parser("reproduce", parents=[common], help="готовый рецепт эксперимента")
    reproduce.add_argument("recipe", help="идентификатор рецепта")
    return parser


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return with_overrides(cfg, seed=args.seed, out=args.out, data_root=args.data_root)


def run(args) -> int:
    if args.command == "reproduce":
        if args.dump_config:
            for label, cfg in get_recipe(args.recipe).variants:
                cfg = with_overrides(cfg, seed=args.seed, out=args.out, data_root=args.data_root)
                print(f"# {label}\n{dump_config(cfg)}")
            return 0
        report_dir = pipeline.cmd_reproduce(args.recipe, seed=args.seed, out=args.out,
                                            data_root=args.data_root, force=args.force)
        print(f"✅ Рецепт {args.recipe} выполнен, отчет: {report_dir}")
        return 0

    cfg = _resolve_config(args)
    if args.dump_config:
        print(dump_config(cfg))
        return 0
    result = pipeline.run_stage(cfg, args.command, force=args.force, gallery=getattr(args, "gallery", False),
                                allow_short=getattr(args, "allow_short_quarantine", False))
    if args.command == "eval":
        for record in result:
            print(f"{record.stage}: CA={record.ca:.2f} ASR={record.asr_mean:.2f}")
    print(f"✅ Этап {args.command} выполнен")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level.upper() if args.log_level else None)
    try:
        return run(args)
    except InoculabError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"❌ {e.user_message}: {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        logger.warning("Interrupted by user")
        return 130
    except Exception as e:
        logger.error(f"Unexpected error in {args.command}: {e}", exc_info=True)
        print("❌ Непредвиденная ошибка, подробности в логе", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
