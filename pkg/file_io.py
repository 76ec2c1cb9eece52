import os
import tempfile
from pathlib import Path
from typing import Union


def atomic_write_text(path: Union[str, Path], text: str) -> None:
    """
    Write text so readers never observe a truncated file

    The content goes to a temporary file in the destination directory which
    is then renamed over the target.

    Args:
        path: Destination file path
        text: UTF-8 text to write
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile(
        "w", encoding="utf-8", dir=path.parent, prefix=f".{path.name}.", suffix=".tmp", delete=False
    ) as tmp_file:
        tmp_path = tmp_file.name
        tmp_file.write(text)

    try:
        os.replace(tmp_path, path)
    finally:
        # Only left behind when the rename failed
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
