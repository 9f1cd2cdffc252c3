import hashlib
import logging
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Iterator, Type, TypeVar

import torch
from pydantic import BaseModel, ValidationError

from .errors import CheckpointError, RecordError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

RecordT = TypeVar("RecordT", bound=BaseModel)


@contextmanager
def atomic_path(path: str | Path):
    """Yield a temporary sibling of ``path``; it replaces ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    tmp = Path(tmp)
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException as e:
        logger.error(f"Write to {path} failed: {e}")
        tmp.unlink(missing_ok=True)
        raise


def write_text(path: str | Path, text: str):
    with atomic_path(path) as tmp:
        tmp.write_text(text, encoding="utf-8")


def write_json(path: str | Path, record: BaseModel):
    write_text(path, record.model_dump_json(indent=2) + "\n")


def read_json(path: str | Path, model: Type[RecordT]) -> RecordT:
    try:
        return model.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except ValidationError as e:
        raise RecordError(f"{path}: invalid {model.__name__} record: {e}") from e


def write_jsonl(path: str | Path, records: Iterable[BaseModel]):
    with JsonlWriter(path) as writer:
        for record in records:
            writer.write(record)


class JsonlWriter:
    """Line-delimited records, published under the final name only on close."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.count = 0
        self._ctx = None
        self._fh = None

    def __enter__(self):
        self._ctx = atomic_path(self.path)
        tmp = self._ctx.__enter__()
        self._fh = open(tmp, "w", encoding="utf-8")
        return self

    def write(self, record: BaseModel):
        self._fh.write(record.model_dump_json() + "\n")
        self.count += 1

    def flush(self):
        self._fh.flush()

    def __exit__(self, exc_type, exc, tb):
        self._fh.close()
        return self._ctx.__exit__(exc_type, exc, tb)


def read_jsonl(path: str | Path, model: Type[RecordT]) -> list[RecordT]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(model.model_validate_json(line))
            except ValidationError as e:
                raise RecordError(f"{path}:{lineno}: invalid {model.__name__} record: {e}") from e
    return records


def save_checkpoint(path: str | Path, payload: dict):
    payload = {"format_version": CHECKPOINT_VERSION, **payload}
    with atomic_path(path) as tmp:
        torch.save(payload, tmp)
    logger.info(f"Saved checkpoint to {path} (step {payload.get('step')})")


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {version}, expected {CHECKPOINT_VERSION}"
        )
    return payload


def _digest_value(digest, value):
    if isinstance(value, torch.Tensor):
        digest.update(value.detach().cpu().contiguous().numpy().tobytes())
    elif isinstance(value, dict):
        for key in sorted(value, key=str):
            digest.update(str(key).encode())
            _digest_value(digest, value[key])
    else:
        digest.update(repr(value).encode())


def state_digest(*state_dicts: dict) -> str:
    digest = hashlib.sha256()
    for state in state_dicts:
        _digest_value(digest, state)
    return digest.hexdigest()


def checkpoint_digest(path: str | Path) -> str:
    payload = load_checkpoint(path)
    return state_digest(payload["model"], payload["discriminator"])


def iter_files(directory: str | Path, suffix: str = ".wav") -> Iterator[Path]:
    directory = Path(directory)
    yield from sorted(p for p in directory.rglob(f"*{suffix}") if p.is_file())
