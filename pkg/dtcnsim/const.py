from pathlib import Path

PACKAGE_DIR = Path(__file__).parent

DEFAULT_CONFIG_PATH = PACKAGE_DIR / "default.toml"

LOG_FILE = Path("log.txt")

OUT_DIR = Path("./__results__")

DATABASE_FILENAME = "results.sqlite3"
