"""Binary checkpoint files.

Layout (little-endian):

    b"LCP1"  u32 version  u32 count
    count × ( u16 name_len | name (utf-8) | u8 rank | rank × u32 dim | float32 data )

Entry names are ``node/param``. Scenario, run, seed and step live in a JSON
sidecar next to the binary file (``<path>.json``).
"""

import logging
import struct
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from .exceptions import CheckpointError
from .graph import Parameters
from .models.checkpoint import CheckpointMeta
from .tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"LCP1"
VERSION = 1

PathLike = Union[str, Path]


class Checkpoint:
    """θ_n: the parameter set at training step ``step``."""

    def __init__(self, step: int, parameters: Parameters, meta: Optional[CheckpointMeta] = None):
        self.step = step
        self.parameters = parameters
        self.meta = meta or CheckpointMeta(step=step)

    def __repr__(self) -> str:
        return f"Checkpoint(step={self.step}, tensors={sum(len(g) for g in self.parameters.values())})"


def _flatten(parameters: Parameters) -> List[Tuple[str, np.ndarray]]:
    entries = []
    for nid in sorted(parameters):
        for name in sorted(parameters[nid]):
            entries.append((f"{nid}/{name}", parameters[nid][name].data))
    return entries


def encode(parameters: Parameters) -> bytes:
    entries = _flatten(parameters)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw = raw
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.source}: truncated at byte {self.pos} (needed {n} more)")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(raw: bytes, source: str = "<bytes>") -> Parameters:
    reader = _Reader(raw, source)
    magic = reader.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    version, count = reader.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported version {version}, expected {VERSION}")
    parameters: Parameters = {}
    for _ in range(count):
        (length,) = reader.unpack("<H")
        try:
            name = reader.take(length).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{source}: entry name is not UTF-8") from exc
        (rank,) = reader.unpack("<B")
        dims = reader.unpack(f"<{rank}I")
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(dims)
        nid, _, pname = name.rpartition("/")
        if not nid:
            raise CheckpointError(f"{source}: entry {name!r} is not of the form node/param")
        parameters.setdefault(nid, {})[pname] = Tensor(data)
    if reader.pos != len(raw):
        raise CheckpointError(f"{source}: {len(raw) - reader.pos} trailing bytes")
    return parameters


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_checkpoint(checkpoint: Checkpoint, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_bytes(encode(checkpoint.parameters))
        meta = checkpoint.meta.model_copy(update={"step": checkpoint.step})
        _sidecar(path).write_text(meta.model_dump_json(indent=2))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    logger.debug("Saved checkpoint step %d to %s", checkpoint.step, path)
    return path


def load_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint file: {path}")
    parameters = decode(path.read_bytes(), str(path))
    sidecar = _sidecar(path)
    try:
        meta = CheckpointMeta.model_validate_json(sidecar.read_text()) if sidecar.exists() else CheckpointMeta()
    except ValidationError as exc:
        raise CheckpointError(f"{sidecar}: invalid metadata: {exc.errors()[0]['msg']}") from exc
    return Checkpoint(meta.step, parameters, meta)


def checkpoint_path(root: PathLike, scenario: str, run: int, step: int) -> Path:
    return Path(root) / "checkpoints" / scenario / f"run{run:03d}" / f"step{step:06d}.lcp"


def find_checkpoints(root: PathLike, scenario: str) -> Dict[int, List[Path]]:
    """Saved checkpoint files per run, in step order."""
    base = Path(root) / "checkpoints" / scenario
    found: Dict[int, List[Path]] = {}
    for run_dir in sorted(base.glob("run*")):
        run = int(run_dir.name[3:])
        found[run] = sorted(run_dir.glob("step*.lcp"))
    return found
