"""Типизированные ошибки inoculab.

Каждый класс несет собственный код возврата, который CLI отдает наружу.
"""


class InoculabError(Exception):
    exit_code = 1
    # Короткое сообщение для пользователя CLI
    user_message = "Произошла ошибка"


class ConfigError(InoculabError):
    exit_code = 2
    user_message = "Ошибка конфигурации"


class DataError(InoculabError):
    exit_code = 3
    user_message = "Ошибка загрузки данных"

    def __init__(self, message: str, path=None):
        self.path = path
        if path is not None:
            message = f"{message} (path: {path})"
        super().__init__(message)


class SplitError(DataError):
    user_message = "Ошибка разбиения датасета"

    def __init__(self, message: str, label=None):
        self.label = label
        super().__init__(message)


class TriggerError(InoculabError):
    exit_code = 4
    user_message = "Ошибка применения триггера"


class ArchitectureError(InoculabError):
    exit_code = 5
    user_message = "Некорректная архитектура"


class ShapeError(InoculabError):
    exit_code = 5
    user_message = "Несовпадение размерностей"


class TrainingError(InoculabError):
    exit_code = 6
    user_message = "Ошибка обучения"

    def __init__(self, message: str, epoch=None, tag=None):
        self.epoch = epoch
        self.tag = tag
        parts = []
        if tag is not None:
            parts.append(str(tag))
        if epoch is not None:
            parts.append(f"epoch {epoch}")
        if parts:
            message = f"[{', '.join(parts)}] {message}"
        super().__init__(message)


class CheckpointError(InoculabError):
    exit_code = 7
    user_message = "Ошибка чтения или записи чекпоинта"


class SelectionError(InoculabError):
    exit_code = 8
    user_message = "Не удалось выбрать GoodNet"


class PreconditionError(InoculabError):
    exit_code = 9
    user_message = "Не выполнено предусловие"


class MetricError(InoculabError):
    exit_code = 10
    user_message = "Ошибка расчета метрик"


class StageMissingError(InoculabError):
    exit_code = 11
    user_message = "Не найден результат предыдущего этапа"

    def __init__(self, stage: str, command: str):
        self.stage = stage
        self.command = command
        super().__init__(f"stage '{stage}' has not completed; run `inoculab {command}` first")


class RunLockedError(InoculabError):
    exit_code = 12
    user_message = "Каталог запуска занят другой командой"
