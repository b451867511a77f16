import logging
from pathlib import Path

from dotenv import load_dotenv
from alembic.config import Config
from alembic import command

from inoculab.db.database import SQLALCHEMY_DATABASE_URL

load_dotenv()

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


def run_migrations():
    # Для sqlite каталог файла должен существовать до подключения
    if SQLALCHEMY_DATABASE_URL.startswith("sqlite:///"):
        Path(SQLALCHEMY_DATABASE_URL[len("sqlite:///"):]).parent.mkdir(parents=True, exist_ok=True)
    alembic_cfg = Config(str(Path(__file__).with_name("alembic.ini")))
    command.upgrade(alembic_cfg, "head")
    logger.info(f"Registry schema is up to date ({SQLALCHEMY_DATABASE_URL})")


if __name__ == "__main__":
    run_migrations()
