"""On-disk formats: designs, slice traces, model weights and heatmaps.

All formats are plain text, line oriented and whitespace delimited. Every
section opens with a one-line typed header of the form ``KEYWORD key=value
...``; blank lines and ``#`` comments are ignored.

Design file (``.design``)::

    DESIGN format_version=1 width=60.0 length=60.0 vdd=0.7 cycles=20 substeps=5
    INSTANCES count=2
    g1 3.0 4.0 1e-06 2e-06 5e-08        # id x y p_internal p_switching p_leakage
    g2 10.5 7.25 1e-06 2e-06 5e-08
    VIAS count=1
    5.0 5.0                             # x y
    SLICES count=1
    SLICE id=0 count=2
    g1 3                                # instance-id time-step
    g1 7

Slice file (``.slice``): ``SLICEFILE format_version=1`` followed by exactly
one ``SLICE`` section.

Weights file (``.weights``)::

    WEIGHTS format_version=1 tensors=K
    CONFIG key=value ...
    NORM key=value ...
    TENSOR name=enc0.w shape=4,8,3,3,3
    <prod(shape) values, %.17g, whitespace separated>
    ...
    END

Units are fixed: micrometres, watts, volts.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed or inconsistent file contents."""

    def __init__(self, message: str, path: str | os.PathLike | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line


@dataclass(frozen=True)
class InstanceRecord:
    id: str
    x: float
    y: float
    p_i: float
    p_s: float
    p_l: float


@dataclass(frozen=True)
class ViaStack:
    x: float
    y: float


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class SliceTrace:
    """Toggle events of one slice as sorted, unique ``(instance, step)`` pairs.

    Instances are referred to by their index in the owning design's
    (sorted) instance list.
    """

    slice_id: int
    num_steps: int
    inst: np.ndarray
    step: np.ndarray

    def __post_init__(self):
        inst = np.asarray(self.inst, dtype=np.int64).reshape(-1)
        step = np.asarray(self.step, dtype=np.int64).reshape(-1)
        if inst.shape != step.shape:
            raise ValueError("inst and step must have equal length")
        if self.slice_id < 0:
            raise ValueError("slice_id must be >= 0")
        if step.size and (step.min() < 0 or step.max() >= self.num_steps):
            raise ValueError(f"time step out of range [0, {self.num_steps})")
        if inst.size and inst.min() < 0:
            raise ValueError("negative instance index")
        order = np.lexsort((step, inst))
        inst, step = inst[order], step[order]
        if inst.size > 1:
            keep = np.ones(inst.size, dtype=bool)
            keep[1:] = (inst[1:] != inst[:-1]) | (step[1:] != step[:-1])
            inst, step = inst[keep], step[keep]
        object.__setattr__(self, "inst", _frozen(inst))
        object.__setattr__(self, "step", _frozen(step))

    def __eq__(self, other):
        if not isinstance(other, SliceTrace):
            return NotImplemented
        return (
            self.slice_id == other.slice_id
            and self.num_steps == other.num_steps
            and np.array_equal(self.inst, other.inst)
            and np.array_equal(self.step, other.step)
        )

    __hash__ = None

    def toggle_matrix(self, num_instances: int) -> np.ndarray:
        """Boolean ``(num_instances, num_steps)`` matrix, True where a toggle occurs."""
        b = np.zeros((num_instances, self.num_steps), dtype=bool)
        b[self.inst, self.step] = True
        return b

    def toggle_counts(self, num_instances: int) -> np.ndarray:
        return np.bincount(self.inst, minlength=num_instances)

    def toggles(self, ids: Sequence[str]) -> dict[str, set[int]]:
        out: dict[str, set[int]] = {name: set() for name in ids}
        for i, j in zip(self.inst.tolist(), self.step.tolist()):
            out[ids[i]].add(j)
        return out


@dataclass(frozen=True, eq=False)
class DesignBundle:
    """A placed design, its via stacks and its slice traces.

    Instances are kept sorted by id and vias sorted by ``(x, y)`` so that
    equal contents always compare equal, whatever order they were given in.
    ``power`` columns are ``(p_i, p_s, p_l)``.
    """

    width: float
    length: float
    vdd: float
    ids: tuple
    xy: np.ndarray
    power: np.ndarray
    vias: np.ndarray
    slices: tuple = ()
    cycles: int = 20
    substeps: int = 5
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        power = np.asarray(self.power, dtype=np.float64).reshape(-1, 3)
        vias = np.asarray(self.vias, dtype=np.float64).reshape(-1, 2)
        if not (self.width > 0 and self.length > 0):
            raise ValueError("chip dimensions must be positive")
        if not self.vdd > 0:
            raise ValueError("vdd must be positive")
        if len(ids) == 0:
            raise ValueError("no instances")
        if len(ids) != len(xy) or len(ids) != len(power):
            raise ValueError("ids, xy and power lengths differ")
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})[0]
            raise ValueError(f"duplicate instance id {dup!r}")
        _check_points(xy, self.width, self.length, "instance", ids)
        _check_points(vias, self.width, self.length, "via stack")
        if not np.all(np.isfinite(power)) or np.any(power < 0):
            raise ValueError("instance powers must be finite and >= 0")

        order = sorted(range(len(ids)), key=ids.__getitem__)
        if order != list(range(len(ids))):
            # remap slice instance indices to the sorted order
            rank = np.empty(len(ids), dtype=np.int64)
            rank[order] = np.arange(len(ids))
            slices = tuple(
                SliceTrace(s.slice_id, s.num_steps, rank[s.inst], s.step) for s in self.slices
            )
            ids = tuple(ids[k] for k in order)
            xy, power = xy[order], power[order]
        else:
            slices = tuple(self.slices)
        if len(vias):
            vias = vias[np.lexsort((vias[:, 1], vias[:, 0]))]
        slices = tuple(sorted(slices, key=lambda s: s.slice_id))
        steps = self.cycles * self.substeps
        for k, s in enumerate(slices):
            if s.slice_id != k:
                raise ValueError("slice ids must be contiguous 0..N-1")
            if s.num_steps != steps:
                raise ValueError(f"slice {k} has {s.num_steps} steps, expected {steps}")
            if s.inst.size and s.inst.max() >= len(ids):
                raise ValueError(f"slice {k} references an unknown instance")

        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "xy", _frozen(xy))
        object.__setattr__(self, "power", _frozen(power))
        object.__setattr__(self, "vias", _frozen(vias))
        object.__setattr__(self, "slices", slices)
        object.__setattr__(self, "_index", {name: k for k, name in enumerate(ids)})

    @property
    def num_instances(self) -> int:
        return len(self.ids)

    @property
    def num_steps(self) -> int:
        return self.cycles * self.substeps

    @property
    def p_i(self) -> np.ndarray:
        return self.power[:, 0]

    @property
    def p_s(self) -> np.ndarray:
        return self.power[:, 1]

    @property
    def p_l(self) -> np.ndarray:
        return self.power[:, 2]

    def index_of(self, instance_id: str) -> int:
        return self._index[instance_id]

    def instances(self) -> Iterator[InstanceRecord]:
        for k, name in enumerate(self.ids):
            x, y = self.xy[k]
            p_i, p_s, p_l = self.power[k]
            yield InstanceRecord(name, float(x), float(y), float(p_i), float(p_s), float(p_l))

    def with_slices(self, slices: Iterable[SliceTrace]) -> "DesignBundle":
        return DesignBundle(
            self.width, self.length, self.vdd, self.ids, self.xy, self.power, self.vias,
            tuple(slices), self.cycles, self.substeps,
        )

    def __eq__(self, other):
        if not isinstance(other, DesignBundle):
            return NotImplemented
        return (
            self.width == other.width
            and self.length == other.length
            and self.vdd == other.vdd
            and self.cycles == other.cycles
            and self.substeps == other.substeps
            and self.ids == other.ids
            and np.array_equal(self.xy, other.xy)
            and np.array_equal(self.power, other.power)
            and np.array_equal(self.vias, other.vias)
            and self.slices == other.slices
        )

    __hash__ = None


def _check_points(pts: np.ndarray, width: float, length: float, what: str, ids=None):
    bad = ~np.isfinite(pts).all(axis=1)
    bad |= (pts[:, 0] < 0) | (pts[:, 1] < 0) | (pts[:, 0] > width) | (pts[:, 1] > length)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        label = f" {ids[k]!r}" if ids is not None else f" #{k}"
        raise ValueError(
            f"{what}{label} at ({pts[k, 0]}, {pts[k, 1]}) is out of bounds "
            f"[0, {width}] x [0, {length}]"
        )


# ---------------------------------------------------------------------------
# line reader


class _Lines:
    def __init__(self, path):
        self.path = path
        with open(path, "r", encoding="utf-8") as fh:
            raw = fh.read().splitlines()
        self.items = []
        for no, text in enumerate(raw, start=1):
            text = text.split("#", 1)[0].strip()
            if text:
                self.items.append((no, text.split()))
        self.pos = 0

    def error(self, msg, line=None):
        if line is None:
            line = self.items[self.pos - 1][0] if self.pos else None
        return FormatError(msg, self.path, line)

    def next(self, what):
        if self.pos >= len(self.items):
            raise FormatError(f"unexpected end of file, expected {what}", self.path)
        item = self.items[self.pos]
        self.pos += 1
        return item

    def header(self, keyword):
        no, toks = self.next(f"{keyword} header")
        if toks[0] != keyword:
            raise FormatError(f"expected {keyword} header, got {toks[0]!r}", self.path, no)
        return no, _keyvals(toks[1:], self.path, no)

    def done(self):
        return self.pos >= len(self.items)


def _keyvals(tokens, path, line) -> dict:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise FormatError(f"expected key=value, got {tok!r}", path, line)
        k, v = tok.split("=", 1)
        out[k] = v
    return out


def _field(kv, key, conv, path, line):
    if key not in kv:
        raise FormatError(f"missing header field {key!r}", path, line)
    try:
        return conv(kv[key])
    except ValueError:
        raise FormatError(f"bad value for {key!r}: {kv[key]!r}", path, line) from None


def _check_version(kv, path, line):
    v = _field(kv, "format_version", int, path, line)
    if v != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {v}", path, line)


def _read_slice_section(lines: _Lines, index: Mapping[str, int], num_steps: int) -> SliceTrace:
    no, kv = lines.header("SLICE")
    sid = _field(kv, "id", int, lines.path, no)
    count = _field(kv, "count", int, lines.path, no)
    if sid < 0:
        raise FormatError("slice id must be >= 0", lines.path, no)
    inst = np.empty(count, dtype=np.int64)
    step = np.empty(count, dtype=np.int64)
    for k in range(count):
        ln, toks = lines.next("toggle record")
        if len(toks) != 2:
            raise FormatError("toggle record must be '<instance> <step>'", lines.path, ln)
        if toks[0] not in index:
            raise FormatError(f"unknown instance id {toks[0]!r}", lines.path, ln)
        try:
            j = int(toks[1])
        except ValueError:
            raise FormatError(f"bad time step {toks[1]!r}", lines.path, ln) from None
        if not 0 <= j < num_steps:
            raise FormatError(f"time step {j} outside [0, {num_steps})", lines.path, ln)
        inst[k] = index[toks[0]]
        step[k] = j
    return SliceTrace(sid, num_steps, inst, step)


def parse_design(path) -> DesignBundle:
    """Read a ``.design`` file into a validated :class:`DesignBundle`."""
    lines = _Lines(path)
    no, kv = lines.header("DESIGN")
    _check_version(kv, path, no)
    width = _field(kv, "width", float, path, no)
    length = _field(kv, "length", float, path, no)
    vdd = _field(kv, "vdd", float, path, no)
    cycles = _field(kv, "cycles", int, path, no) if "cycles" in kv else 20
    substeps = _field(kv, "substeps", int, path, no) if "substeps" in kv else 5

    no, kv = lines.header("INSTANCES")
    count = _field(kv, "count", int, path, no)
    if count <= 0:
        raise FormatError("no instances", path, no)
    ids, xy, power = [], np.empty((count, 2)), np.empty((count, 3))
    seen = {}
    for k in range(count):
        ln, toks = lines.next("instance record")
        if len(toks) != 6:
            raise FormatError("instance record must be '<id> x y p_i p_s p_l'", path, ln)
        try:
            vals = [float(t) for t in toks[1:]]
        except ValueError:
            raise FormatError("non-numeric instance field", path, ln) from None
        if toks[0] in seen:
            raise FormatError(f"duplicate instance id {toks[0]!r}", path, ln)
        seen[toks[0]] = ln
        x, y = vals[0], vals[1]
        if not (0 <= x <= width and 0 <= y <= length):
            raise FormatError(f"instance {toks[0]!r} at ({x}, {y}) is out of bounds", path, ln)
        if not all(math.isfinite(v) and v >= 0 for v in vals[2:]):
            raise FormatError(f"instance {toks[0]!r} has a negative or non-finite power", path, ln)
        ids.append(toks[0])
        xy[k] = vals[:2]
        power[k] = vals[2:]

    no, kv = lines.header("VIAS")
    count = _field(kv, "count", int, path, no)
    vias = np.empty((count, 2))
    for k in range(count):
        ln, toks = lines.next("via record")
        if len(toks) != 2:
            raise FormatError("via record must be 'x y'", path, ln)
        try:
            x, y = float(toks[0]), float(toks[1])
        except ValueError:
            raise FormatError("non-numeric via coordinate", path, ln) from None
        if not (0 <= x <= width and 0 <= y <= length):
            raise FormatError(f"via stack at ({x}, {y}) is out of bounds", path, ln)
        vias[k] = x, y

    slices = []
    if not lines.done():
        no, kv = lines.header("SLICES")
        count = _field(kv, "count", int, path, no)
        index = {name: k for k, name in enumerate(ids)}
        for _ in range(count):
            slices.append(_read_slice_section(lines, index, cycles * substeps))
    if not lines.done():
        raise lines.error("trailing content", lines.items[lines.pos][0])
    try:
        return DesignBundle(width, length, vdd, ids, xy, power, vias, tuple(slices), cycles, substeps)
    except ValueError as exc:
        raise FormatError(str(exc), path) from None


def parse_slice_trace(path, design: DesignBundle) -> SliceTrace:
    lines = _Lines(path)
    no, kv = lines.header("SLICEFILE")
    _check_version(kv, path, no)
    trace = _read_slice_section(lines, design._index, design.num_steps)
    if not lines.done():
        raise lines.error("trailing content", lines.items[lines.pos][0])
    return trace


def _write_slice_section(fh, trace: SliceTrace, ids: Sequence[str]):
    fh.write(f"SLICE id={trace.slice_id} count={trace.inst.size}\n")
    for i, j in zip(trace.inst.tolist(), trace.step.tolist()):
        fh.write(f"{ids[i]} {j}\n")


def write_design(design: DesignBundle, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            f"DESIGN format_version={FORMAT_VERSION} width={design.width!r} "
            f"length={design.length!r} vdd={design.vdd!r} cycles={design.cycles} "
            f"substeps={design.substeps}\n"
        )
        fh.write(f"INSTANCES count={design.num_instances}\n")
        for name, (x, y), (pi, ps, pl) in zip(design.ids, design.xy.tolist(), design.power.tolist()):
            fh.write(f"{name} {x!r} {y!r} {pi!r} {ps!r} {pl!r}\n")
        fh.write(f"VIAS count={len(design.vias)}\n")
        for x, y in design.vias.tolist():
            fh.write(f"{x!r} {y!r}\n")
        if design.slices:
            fh.write(f"SLICES count={len(design.slices)}\n")
            for s in design.slices:
                _write_slice_section(fh, s, design.ids)


def write_slice_trace(trace: SliceTrace, design: DesignBundle, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"SLICEFILE format_version={FORMAT_VERSION}\n")
        _write_slice_section(fh, trace, design.ids)


# ---------------------------------------------------------------------------
# weights


def write_weights(
    path,
    config: Mapping[str, str],
    params: Mapping[str, np.ndarray],
    norm: Mapping[str, float] | None = None,
) -> None:
    """Write named parameter arrays with a self-describing header.

    Values are written with 17 significant digits so float64 round-trips
    exactly.
    """
    norm = dict(norm or {})
    for key, value in list(config.items()) + list(norm.items()):
        if any(c.isspace() for c in f"{key}{value}") or "=" in key:
            raise ValueError(f"config entry {key}={value} must not contain whitespace")
    tmp = Path(f"{path}.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(f"WEIGHTS format_version={FORMAT_VERSION} tensors={len(params)}\n")
        fh.write("CONFIG " + " ".join(f"{k}={v}" for k, v in config.items()) + "\n")
        fh.write("NORM " + " ".join(f"{k}={float(v):.17g}" for k, v in norm.items()) + "\n")
        for name, arr in params.items():
            arr = np.asarray(arr, dtype=np.float64)
            shape = ",".join(str(d) for d in arr.shape)
            fh.write(f"TENSOR name={name} shape={shape}\n")
            flat = arr.reshape(-1)
            for start in range(0, flat.size, 8):
                fh.write(" ".join(f"{v:.17g}" for v in flat[start:start + 8].tolist()) + "\n")
        fh.write("END\n")
    os.replace(tmp, path)


def read_weights(path, expect_config: Mapping[str, str] | None = None):
    """Return ``(config, params, norm)`` from a weights file.

    With ``expect_config``, every expected key must be present with an equal
    value, otherwise a :class:`FormatError` is raised before any tensor is
    read.
    """
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    rows = text.splitlines()
    if not rows or not rows[0].startswith("WEIGHTS"):
        raise FormatError("not a weights file", path, 1)
    head = _keyvals(rows[0].split()[1:], path, 1)
    _check_version(head, path, 1)
    ntensors = _field(head, "tensors", int, path, 1)
    if len(rows) < 3 or not rows[1].startswith("CONFIG") or not rows[2].startswith("NORM"):
        raise FormatError("missing CONFIG/NORM header", path, 2)
    config = _keyvals(rows[1].split()[1:], path, 2)
    norm = {k: float(v) for k, v in _keyvals(rows[2].split()[1:], path, 3).items()}
    if expect_config is not None:
        for key, want in expect_config.items():
            got = config.get(key)
            if got != str(want):
                raise FormatError(
                    f"architecture mismatch: {key}={got!r} in file, expected {want!r}", path, 2
                )
    params: dict[str, np.ndarray] = {}
    pos = 3
    for _ in range(ntensors):
        if pos >= len(rows) or not rows[pos].startswith("TENSOR"):
            raise FormatError("truncated weights file (missing TENSOR header)", path, pos + 1)
        kv = _keyvals(rows[pos].split()[1:], path, pos + 1)
        name = kv["name"]
        shape = tuple(int(d) for d in kv["shape"].split(",")) if kv["shape"] else ()
        size = int(np.prod(shape)) if shape else 1
        pos += 1
        values: list[float] = []
        while len(values) < size:
            if pos >= len(rows) or rows[pos][:1].isalpha():
                raise FormatError(f"truncated weights file in tensor {name!r}", path, pos + 1)
            try:
                values.extend(float(v) for v in rows[pos].split())
            except ValueError:
                raise FormatError("non-numeric weight value", path, pos + 1) from None
            pos += 1
        if len(values) != size:
            raise FormatError(f"tensor {name!r} has {len(values)} values, expected {size}", path, pos)
        params[name] = np.array(values, dtype=np.float64).reshape(shape)
    if pos >= len(rows) or rows[pos].strip() != "END":
        raise FormatError("truncated weights file (missing END)", path, pos + 1)
    return config, params, norm


# ---------------------------------------------------------------------------
# heatmaps

# viridis sampled at 9 points; linear interpolation in between
_CMAP = np.array([
    [68, 1, 84], [71, 44, 122], [59, 81, 139], [44, 113, 142], [33, 144, 141],
    [39, 173, 129], [92, 200, 99], [170, 220, 50], [253, 231, 37],
], dtype=np.float64)


def colorize(grid: np.ndarray, scale: tuple[float, float] | None = None) -> np.ndarray:
    """Map a 2D array to ``uint8`` RGB with a fixed viridis-like ramp."""
    grid = np.asarray(grid, dtype=np.float64)
    lo, hi = scale if scale is not None else (float(grid.min()), float(grid.max()))
    if hi > lo:
        u = np.clip((grid - lo) / (hi - lo), 0.0, 1.0)
    else:
        u = np.zeros_like(grid)
    pos = u * (len(_CMAP) - 1)
    k = np.minimum(pos.astype(np.int64), len(_CMAP) - 2)
    frac = (pos - k)[..., None]
    rgb = _CMAP[k] * (1 - frac) + _CMAP[k + 1] * frac
    return np.rint(rgb).astype(np.uint8)


def write_heatmap(grid, path, scale: tuple[float, float] | None = None) -> tuple[Path, Path]:
    """Write ``<path>.csv`` with exact values and ``<path>.ppm`` (binary P6).

    Row ``r`` of the CSV / image is ``grid[r, :]``. Returns both paths.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError("heatmap grid must be 2D")
    if not np.all(np.isfinite(grid)):
        raise ValueError("heatmap grid contains NaN or inf")
    base = Path(path)
    if base.suffix in (".csv", ".ppm"):
        base = base.with_suffix("")
    csv_path, ppm_path = Path(f"{base}.csv"), Path(f"{base}.ppm")
    with open(csv_path, "w", encoding="utf-8") as fh:
        for row in grid.tolist():
            fh.write(",".join(repr(v) for v in row) + "\n")
    rgb = colorize(grid, scale)
    with open(ppm_path, "wb") as fh:
        fh.write(f"P6\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())
    return csv_path, ppm_path


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise FormatError("not a binary PPM", path, 1)
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8)[: w * h * 3].reshape(h, w, 3)


def read_grid_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


# ---------------------------------------------------------------------------
# per-instance value CSVs


def write_instance_values(path, ids: Sequence[str], values, column: str = "ir_volts") -> None:
    values = np.asarray(values, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"instance_id,{column}\n")
        for name, v in zip(ids, values.tolist()):
            fh.write(f"{name},{v!r}\n")


def read_instance_values(path) -> tuple[list[str], np.ndarray]:
    ids, vals = [], []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("instance_id,"):
            raise FormatError("expected 'instance_id,<column>' header", path, 1)
        for no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            name, _, v = line.partition(",")
            try:
                vals.append(float(v))
            except ValueError:
                raise FormatError(f"bad value {v!r}", path, no) from None
            ids.append(name)
    return ids, np.array(vals)
