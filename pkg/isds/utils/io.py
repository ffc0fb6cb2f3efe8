import json
import os
import tempfile
from pathlib import Path


def atomic_write_bytes(data: bytes, filepath):
    """Write to a temporary file in the same directory, then rename over the target."""
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=filepath.parent, prefix=f".{filepath.name}.")
    try:
        with os.fdopen(fd, "wb") as fout:
            fout.write(data)
        os.replace(tmp, filepath)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def atomic_write_text(text: str, filepath):
    atomic_write_bytes(text.encode("utf8"), filepath)


def to_json_str(obj, **kwargs) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, **kwargs)


def load_json(filepath):
    with open(filepath, "r", encoding="utf8") as fin:
        return json.load(fin)


def dump_json(obj, filepath, **kwargs):
    atomic_write_text(to_json_str(obj, **kwargs), filepath)
