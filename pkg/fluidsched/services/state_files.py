"""State and trace-spec file formats

A state file is a small TOML document:

    version = 1
    n = 2
    t_upd = 10.0
    m = 5.0

    [[pipe]]
    label = "video"
    a = 0.6
    b = 3.0

Syntax and structure problems raise StateFileError (with the position when
one is known); values that break a model invariant surface as pydantic
ValidationError from the SystemState constructor.
"""
import json
import re

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import List, Optional, Union

from pydantic import BaseModel, ConfigDict, ValidationError

from fluidsched.core.errors import StateFileError
from fluidsched.core.fluid_model import PipeState, SystemState
from fluidsched.core.simulator import TraceSpec
from fluidsched.utils.logger import logger

STATE_FORMAT_VERSION = 1

_TOML_POSITION = re.compile(r"\(at line (\d+), column (\d+)\)")


class _PipeEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    a: float
    b: float
    label: Optional[str] = None


class _StateDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    version: int
    n: int
    t_upd: float
    m: float
    pipe: List[_PipeEntry]


def parse_state(text: str, path: str = "<string>") -> SystemState:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        message = str(e)
        found = _TOML_POSITION.search(message)
        line, column = (int(found.group(1)), int(found.group(2))) if found else (None, None)
        raise StateFileError(_TOML_POSITION.sub("", message).strip(), path, line, column)

    try:
        document = _StateDocument.model_validate(raw)
    except ValidationError as e:
        error = e.errors()[0]
        where = ".".join(str(part) for part in error["loc"])
        raise StateFileError(f"{where}: {error['msg']}", path, _line_of(text, error["loc"]))

    if document.version != STATE_FORMAT_VERSION:
        raise StateFileError(
            f"unsupported state format version {document.version}", path, _line_of(text, ("version",))
        )
    if document.n != len(document.pipe):
        raise StateFileError(
            f"n = {document.n} but {len(document.pipe)} [[pipe]] tables", path, _line_of(text, ("n",))
        )

    pipes = tuple(PipeState(a=p.a, b=p.b, label=p.label) for p in document.pipe)
    return SystemState(pipes=pipes, t_upd=document.t_upd, m=document.m)


def load_state(path: Union[str, Path]) -> SystemState:
    path = Path(path)
    state = parse_state(_read_utf8(path), str(path))
    logger.debug(f"Loaded {state.n}-pipe state from {path}")
    return state


def dump_state(state: SystemState) -> str:
    lines = [
        f"version = {STATE_FORMAT_VERSION}",
        f"n = {state.n}",
        f"t_upd = {state.t_upd!r}",
        f"m = {state.m!r}",
    ]
    for pipe in state.pipes:
        lines += ["", "[[pipe]]"]
        if pipe.label is not None:
            # JSON string escapes are valid TOML basic-string escapes
            lines.append(f"label = {json.dumps(pipe.label)}")
        lines += [f"a = {pipe.a!r}", f"b = {pipe.b!r}"]
    return "\n".join(lines) + "\n"


def save_state(state: SystemState, path: Union[str, Path]) -> None:
    Path(path).write_text(dump_state(state), encoding="utf-8")


def parse_trace_spec(text: str, path: str = "<string>") -> TraceSpec:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise StateFileError(e.msg, path, e.lineno, e.colno)
    if not isinstance(raw, dict):
        raise StateFileError("a trace spec must be a JSON object", path, 1, 1)
    return TraceSpec.model_validate(raw)


def load_trace_spec(path: Union[str, Path]) -> TraceSpec:
    path = Path(path)
    return parse_trace_spec(_read_utf8(path), str(path))


def _read_utf8(path: Path) -> str:
    data = path.read_bytes()
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as e:
        line = data.count(b"\n", 0, e.start) + 1
        column = e.start - (data.rfind(b"\n", 0, e.start) + 1) + 1
        raise StateFileError(f"not valid UTF-8: {e.reason} (byte 0x{data[e.start]:02x})", str(path), line, column) from e


def _line_of(text: str, loc) -> Optional[int]:
    """Best-effort line of the key or [[pipe]] table an error points at"""
    if not loc:
        return None
    lines = text.splitlines()
    if loc[0] == "pipe" and len(loc) > 1 and isinstance(loc[1], int):
        headers = [k for k, line in enumerate(lines, 1) if line.strip() == "[[pipe]]"]
        if loc[1] < len(headers):
            start = headers[loc[1]]
            end = headers[loc[1] + 1] if loc[1] + 1 < len(headers) else len(lines) + 1
            if len(loc) > 2:
                key = re.compile(rf"^\s*{re.escape(str(loc[2]))}\s*=")
                for k in range(start, end):
                    if key.match(lines[k - 1]):
                        return k
            return start
        return None
    key = re.compile(rf"^\s*{re.escape(str(loc[0]))}\s*=")
    for k, line in enumerate(lines, 1):
        if key.match(line):
            return k
    return None
