# Data loader module for apcir: file-level wrappers around the session_io parsers
import os
import shutil
import tempfile
from pathlib import Path

from src.session_io import parse_corpus, parse_qrels, parse_run, parse_sessions


def _read_bytes(path, kind):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{kind} file not found: {path}")
    return path.read_bytes()


def load_sessions(path):
    """
    Load conversation sessions from a session JSON file.

    Args:
        path (Path | str): Path to the sessions file

    Returns:
        list[ConversationSession]: Parsed sessions

    Raises:
        FileNotFoundError: If the file doesn't exist
    """
    return parse_sessions(_read_bytes(path, "Sessions"))


def load_corpus(path):
    """
    Load a JSON-lines passage corpus.

    Returns:
        dict[str, str]: passage id -> text

    Raises:
        FileNotFoundError: If the file doesn't exist
    """
    return parse_corpus(_read_bytes(path, "Corpus"))


def load_qrels(path):
    return parse_qrels(_read_bytes(path, "Qrels"))


def load_run(path):
    return parse_run(_read_bytes(path, "Run"))


def write_atomic(path, data):
    """
    Write bytes to ``path`` through a temporary file in the same directory,
    so a failed write never leaves a partial file behind.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def write_all(directory, files):
    """
    Write every ``relpath -> bytes`` entry under ``directory``, or none of them.

    Files are staged in a temporary sibling of ``directory`` and moved into
    place once all of them are written. If a move fails, the files already
    moved get their previous contents back (or are removed) and directories
    created along the way are removed again.

    Args:
        directory (Path | str): Output root
        files (Mapping[str, bytes]): Relative path -> contents

    Returns:
        list[Path]: Written paths, in ``files`` order
    """
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(dir=directory.parent, prefix=f".{directory.name}."))
    created = []
    moved = []
    try:
        for name, data in files.items():
            staged = staging / name
            staged.parent.mkdir(parents=True, exist_ok=True)
            staged.write_bytes(data)

        for name in files:
            target = directory / name
            missing = [p for p in (target.parent, *target.parent.parents) if not p.exists()]
            for parent in reversed(missing):
                parent.mkdir()
                created.append(parent)
            previous = target.read_bytes() if target.is_file() else None
            os.replace(staging / name, target)
            moved.append((target, previous))
    except BaseException:
        for target, previous in reversed(moved):
            if previous is None:
                target.unlink(missing_ok=True)
            else:
                write_atomic(target, previous)
        for parent in reversed(created):
            try:
                parent.rmdir()
            except OSError:
                pass
        raise
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    return [directory / name for name in files]
