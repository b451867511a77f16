from inoculab.settings import TOOL_VERSION

__version__ = TOOL_VERSION
