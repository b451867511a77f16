import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

DATA_ROOT = Path(os.getenv("INOCULAB_DATA_ROOT", "./data"))
OUT_ROOT = Path(os.getenv("INOCULAB_OUT", "./runs"))
DEVICE = os.getenv("INOCULAB_DEVICE", "cpu")
LOG_LEVEL = os.getenv("INOCULAB_LOG_LEVEL", "INFO").upper()
ALLOW_DOWNLOAD = os.getenv("INOCULAB_DOWNLOAD", "1") not in ("0", "false", "False")

TOOL_VERSION = "0.3.0"


def database_url(out_root=None) -> str:
    # Явно заданный URL имеет приоритет над sqlite-файлом в каталоге запусков
    url = os.getenv("INOCULAB_DB_URL")
    if url:
        return url
    root = Path(out_root) if out_root is not None else OUT_ROOT
    return f"sqlite:///{(root / 'registry.sqlite').as_posix()}"
