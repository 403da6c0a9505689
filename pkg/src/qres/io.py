"""Dataset persistence, external record ingestion, and the config file format.

QRES binary layout (little-endian)::

    b"QRES"  u16 version  f64 tau  u32 n_sets
    per set: u32 set_index  u32 n  f64 start_time  ceil(n/8) bytes of packed bits
             u8 truth flag  [u32 K  K*f64 omegas  K*f64 phis]

Bits are packed least-significant first.  Only single-shot data fit the
format; readout fidelity and provenance go to a JSON sidecar next to it.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestError
from .signal_model import ProbeConfig
from .simulator import Dataset, MeasurementSet, SetTruth

MAGIC = b"QRES"
VERSION = 1
GAP_FACTOR = 10.0
TAU_RTOL = 1e-6


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def dataset_to_bytes(dataset: Dataset) -> bytes:
    if dataset.probe.shots_per_point != 1:
        raise ConfigError("QRES stores single-shot outcomes only", field="probe.shots_per_point")
    out = [MAGIC, struct.pack("<HdI", VERSION, dataset.probe.tau, dataset.n_sets)]
    for s in dataset.sets:
        bits = np.asarray(s.outcomes)
        out.append(struct.pack("<IId", s.set_index, s.n, s.start_time))
        out.append(np.packbits(bits.astype(np.uint8), bitorder="little").tobytes())
        if s.truth is None:
            out.append(b"\x00")
        else:
            K = len(s.truth.omegas)
            out.append(b"\x01" + struct.pack("<I", K))
            out.append(np.asarray(s.truth.omegas, dtype="<f8").tobytes())
            out.append(np.asarray(s.truth.phis, dtype="<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos, self.record = buf, 0, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise IngestError("file truncated", record=self.record)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def dataset_from_bytes(buf: bytes, readout_fidelity: float = 1.0, metadata=None) -> Dataset:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise IngestError("bad magic, not a QRES file", record=0)
    version, tau, n_sets = r.unpack("<HdI")
    if version != VERSION:
        raise IngestError(f"unsupported QRES version {version}", record=0)
    if not tau > 0:
        raise IngestError("tau must be positive", record=0)
    sets = []
    for j in range(n_sets):
        r.record = j + 1
        idx, n, start = r.unpack("<IId")
        if idx != j:
            raise IngestError(f"set index {idx} out of order (expected {j})", record=j + 1)
        raw = np.frombuffer(r.take((n + 7) // 8), dtype=np.uint8)
        bits = np.unpackbits(raw, count=n, bitorder="little").astype(np.uint8)
        flag = r.take(1)[0]
        truth = None
        if flag == 1:
            (K,) = r.unpack("<I")
            om = np.frombuffer(r.take(8 * K), dtype="<f8").astype(float)
            ph = np.frombuffer(r.take(8 * K), dtype="<f8").astype(float)
            truth = SetTruth(om, ph)
        elif flag != 0:
            raise IngestError(f"bad truth flag {flag}", record=j + 1)
        sets.append(MeasurementSet(idx, bits, start, truth))
    if r.pos != len(buf):
        raise IngestError("trailing bytes after last set", record=n_sets)
    try:
        probe = ProbeConfig(tau, readout_fidelity)
    except ConfigError as e:
        raise IngestError(str(e), record=0) from e
    return Dataset(probe, tuple(sets), dict(metadata or {}))


def write_dataset(dataset: Dataset, path, sidecar: bool = True) -> None:
    """Write ``dataset`` as QRES plus a ``<path>.json`` metadata sidecar."""
    Path(path).write_bytes(dataset_to_bytes(dataset))
    if sidecar:
        meta = {"readout_fidelity": dataset.probe.readout_fidelity,
                "shots_per_point": dataset.probe.shots_per_point,
                "metadata": dataset.metadata}
        sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True,
                                                 default=_json_default) + "\n")


def read_dataset(path) -> Dataset:
    """Read a QRES file, picking up fidelity and metadata from its sidecar if present."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise IngestError(f"cannot read {path}: {e}", record=0) from e
    fid, meta = 1.0, {}
    side = sidecar_path(path)
    if side.exists():
        try:
            info = json.loads(side.read_text())
        except json.JSONDecodeError as e:
            raise IngestError(f"bad sidecar: {e}", record=0) from e
        fid = float(info.get("readout_fidelity", 1.0))
        meta = info.get("metadata", {})
    return dataset_from_bytes(buf, fid, meta)


# ---------------------------------------------------------------------------
# CSV records

def export_csv(dataset: Dataset, path) -> None:
    """One row per outcome: ``set_index,time_s,outcome`` with absolute times.

    A leading ``# tau_s=`` comment records the exact block length.
    """
    tau = dataset.probe.tau
    with open(path, "w", newline="") as fh:
        fh.write(f"# tau_s={tau!r}\n")
        w = csv.writer(fh)
        w.writerow(["set_index", "time_s", "outcome"])
        for s in dataset.sets:
            t = s.start_time + s.times(tau)
            for ti, yi in zip(t, s.outcomes):
                w.writerow([s.set_index, repr(float(ti)), int(yi)])


def _group_by_gaps(times, tau):
    breaks = np.flatnonzero(np.diff(times) > GAP_FACTOR * tau) + 1
    return np.split(np.arange(times.size), breaks)


def ingest_csv(path, readout_fidelity: float = 1.0, tau: float | None = None) -> Dataset:
    """Load time-stamped bit records.

    Columns ``time_s`` and ``outcome`` are required; ``set_index`` is
    optional.  Without it, a gap longer than ``10 tau`` starts a new set.
    ``tau`` comes from the argument, a ``# tau_s=`` comment, or the
    smallest time step, in that order.  Timestamps must increase within a
    set with uniform spacing (relative tolerance 1e-6).
    """
    times, bits, labels, rows = [], [], [], []
    header = None
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            if text.startswith("#"):
                key, _, val = text[1:].partition("=")
                if key.strip() == "tau_s" and tau is None:
                    try:
                        tau = float(val)
                    except ValueError as e:
                        raise IngestError(f"bad tau_s comment {val!r}", record=lineno) from e
                continue
            fields = next(csv.reader([text]))
            if header is None:
                header = [f.strip() for f in fields]
                if "time_s" not in header or "outcome" not in header:
                    raise IngestError("header must name time_s and outcome", record=lineno)
                continue
            if len(fields) != len(header):
                raise IngestError(f"expected {len(header)} fields, got {len(fields)}", record=lineno)
            rec = dict(zip(header, (f.strip() for f in fields)))
            try:
                ti = float(rec["time_s"])
            except ValueError as e:
                raise IngestError(f"bad time {rec['time_s']!r}", record=lineno) from e
            if rec["outcome"] not in ("0", "1"):
                raise IngestError(f"outcome {rec['outcome']!r} is not a bit", record=lineno)
            if "set_index" in rec:
                try:
                    labels.append(int(rec["set_index"]))
                except ValueError as e:
                    raise IngestError(f"bad set_index {rec['set_index']!r}", record=lineno) from e
            times.append(ti)
            bits.append(int(rec["outcome"]))
            rows.append(lineno)
    if header is None or not times:
        raise IngestError("no records", record=0)
    times = np.asarray(times)
    bits = np.asarray(bits, dtype=np.uint8)
    rows = np.asarray(rows)

    if labels:
        labels = np.asarray(labels)
        change = np.flatnonzero(np.diff(labels) != 0) + 1
        groups = np.split(np.arange(times.size), change)
        for g_i, g in enumerate(groups):
            if labels[g[0]] != g_i:
                raise IngestError(f"set_index {labels[g[0]]} out of order (expected {g_i})",
                                  record=int(rows[g[0]]))
    else:
        step = np.diff(times)
        bad = np.flatnonzero(step <= 0)
        if bad.size:
            raise IngestError("timestamps not increasing", record=int(rows[bad[0] + 1]))
        if tau is None:
            tau = float(step.min()) if step.size else None
        if tau is None:
            raise IngestError("cannot infer tau from a single record", record=int(rows[0]))
        groups = _group_by_gaps(times, tau)

    if tau is None:
        steps = np.concatenate([np.diff(times[g]) for g in groups])
        if steps.size == 0:
            raise IngestError("cannot infer tau", record=int(rows[0]))
        tau = float(steps.min())
    if not tau > 0:
        raise IngestError("tau must be positive", record=0)

    sets = []
    for j, g in enumerate(groups):
        t = times[g]
        d = np.diff(t)
        bad = np.flatnonzero(d <= 0)
        if bad.size:
            raise IngestError("timestamps not increasing", record=int(rows[g[bad[0] + 1]]))
        bad = np.flatnonzero(np.abs(d - tau) > TAU_RTOL * tau)
        if bad.size:
            raise IngestError(f"spacing {float(d[bad[0]])!r} differs from tau {tau!r}",
                              record=int(rows[g[bad[0] + 1]]))
        sets.append(MeasurementSet(j, bits[g].copy(), float(t[0])))
    try:
        probe = ProbeConfig(tau, readout_fidelity)
    except ConfigError as e:
        raise IngestError(str(e), record=0) from e
    return Dataset(probe, tuple(sets), {"source": str(path)})


def ingest_external(path, fmt: str = "csv", readout_fidelity: float = 1.0) -> Dataset:
    """Load lab records from ``csv`` or QRES ``binary`` files."""
    if fmt == "csv":
        return ingest_csv(path, readout_fidelity)
    if fmt == "binary":
        ds = read_dataset(path)
        if readout_fidelity != 1.0:
            ds = Dataset(ProbeConfig(ds.probe.tau, readout_fidelity), ds.sets, ds.metadata)
        return ds
    raise ConfigError(f"unknown record format {fmt!r}", field="format")


# ---------------------------------------------------------------------------
# config files: ``section.key = value`` lines

def _parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    if "," in text:
        return [_parse_value(p) for p in text.split(",") if p.strip()]
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    return text


def parse_config(text: str) -> dict:
    """Parse flat ``key = value`` text into ``{"section.key": value}``.

    ``#`` starts a comment; commas make lists; ``true``/``false``/``none``
    are recognized.  Duplicate keys and missing ``=`` raise
    :class:`ConfigError`.
    """
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'", field=None)
        key, _, val = line.partition("=")
        key = key.strip()
        if not key or key.count(".") > 1 or any(c.isspace() for c in key):
            raise ConfigError(f"line {lineno}: bad key {key!r}", field=key)
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}", field=key)
        out[key] = _parse_value(val)
    return out


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, (list, tuple)):
        return ", ".join(_format_value(x) for x in v) + ("," if len(v) == 1 else "")
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: dict) -> str:
    return "".join(f"{k} = {_format_value(cfg[k])}\n" for k in sorted(cfg))


def read_config(path) -> dict:
    return parse_config(Path(path).read_text())
