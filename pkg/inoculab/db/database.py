import os
from dotenv import load_dotenv

from inoculab.settings import database_url

load_dotenv()

SQLALCHEMY_DATABASE_URL = database_url(os.getenv("INOCULAB_OUT"))
