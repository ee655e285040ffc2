import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Tuple, Union

from fragsel.exceptions import FormatError

WIRE_VERSION = 1

null_logger = logging.getLogger("fragsel")
null_logger.addHandler(logging.NullHandler())


def canonical_json(payload: Any) -> str:
    """JSON text with sorted keys and no insignificant whitespace.

    Floats use repr(), which round-trips 64-bit values exactly.
    """
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def request_digest(endpoint: str, payload: Dict[str, Any], length: int = 32) -> str:
    """Generate a deterministic digest of a wire request, used as a fixture key"""
    # Concatenate endpoint and canonical body
    input_str = f"{endpoint}{canonical_json(payload)}"

    hash_object = hashlib.sha256(input_str.encode())

    # Take the first `length` characters of the hexadecimal digest
    return hash_object.hexdigest()[:length]


def read_jsonl(path: Union[str, Path]) -> Iterator[Dict[str, Any]]:
    try:
        with open(path, encoding="utf-8") as fp:
            for lineno, line in enumerate(fp, start=1):
                if not line.strip():
                    continue
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as exc:
                    raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: not valid UTF-8 ({exc.reason})") from exc


def split_manifest(
    rows: Iterable[Dict[str, Any]],
) -> Tuple[Optional[Dict[str, Any]], List[Dict[str, Any]]]:
    """Separate the optional leading manifest/header line from data rows."""
    header = None
    data = []
    for row in rows:
        if not data and header is None and ("manifest" in row or "header" in row):
            header = row
            continue
        data.append(row)
    return header, data


def write_jsonl(
    path: Union[str, Path],
    rows: Iterable[Dict[str, Any]],
    header: Optional[Dict[str, Any]] = None,
):
    with open(path, "w", encoding="utf-8") as fp:
        if header is not None:
            fp.write(canonical_json(header) + "\n")
        for row in rows:
            fp.write(canonical_json(row) + "\n")


def read_json(path: Union[str, Path]) -> Any:
    try:
        with open(path, encoding="utf-8") as fp:
            return json.load(fp)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc.msg})") from exc
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: not valid UTF-8 ({exc.reason})") from exc


def ordered_map(fn, items, parallelism: int = 1) -> list:
    """Apply ``fn`` to every item, up to ``parallelism`` at a time, keeping input order."""
    items = list(items)
    if parallelism <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=parallelism) as executor:
        return list(executor.map(fn, items))
