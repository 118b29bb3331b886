from pathlib import Path

CONFIG_FILE_PATH = Path(__file__).resolve().parent.parent / "config" / "params.yaml"

SEP_TOKEN = "[SEP]"
ARTICLES = ("a", "an", "the")
