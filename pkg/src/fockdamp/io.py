"""Artifact file formats.

Every artifact starts with ``#`` lines naming the artifact, the config hash
and the seed.  Tables then carry one comma-separated header row naming the
columns (with units) followed by data rows.  Floats are written with
``repr`` so that files round-trip exactly and are byte-stable.
"""
from __future__ import annotations

import io
import math
from pathlib import Path

import numpy as np

from .ensemble import DistributionTimeline, FockSelectionEvent
from .trajsim import JumpPath, SequenceRecord

__all__ = [
    "ArtifactError",
    "SequenceFormatError",
    "ingest_sequences",
    "read_events",
    "read_keyvalue",
    "read_posteriors",
    "read_table",
    "read_timelines",
    "write_events",
    "write_keyvalue",
    "write_posteriors",
    "write_sequences",
    "write_table",
    "write_timelines",
]

SEQUENCE_COLUMNS = ("sequence_id", "time_s", "phase_index", "outcome", "truth_n")


class ArtifactError(ValueError):
    """An artifact file is missing, unreadable or ill-formed."""


class SequenceFormatError(ArtifactError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def header_lines(artifact: str, config_hash: str, seed: int, notes=()) -> list[str]:
    out = [f"# fockdamp {artifact}", f"# config_hash={config_hash} seed={seed}"]
    out += [f"# {n}" for n in notes]
    return out


def _meta_from_comments(comments) -> dict:
    meta = {}
    for c in comments:
        for tok in c.lstrip("#").split():
            if "=" in tok:
                k, v = tok.split("=", 1)
                meta.setdefault(k, v)
    return meta


# --- sequences ------------------------------------------------------------


def write_sequences(path, seqs, config_hash: str, seed: int, probe_notes=()) -> Path:
    """Write sequences as line-delimited text (see module docstring).

    A ``# record`` line per sequence carries its duration and, for
    synthetic data, the exact jump path; data rows carry ``truth_n`` then.
    """
    path = Path(path)
    seqs = list(seqs)
    has_truth = any(s.truth is not None for s in seqs)
    cols = SEQUENCE_COLUMNS if has_truth else SEQUENCE_COLUMNS[:4]
    lines = header_lines(
        "sequences", config_hash, seed,
        list(probe_notes) + [
            "units: time_s seconds; outcome 0 = atom detected in e, 1 = in g; "
            "truth_n photons",
            "columns: " + ",".join(cols),
        ])
    for s in seqs:
        rec = f"# record {s.id} detections={len(s)}"
        if s.duration is not None:
            rec += f" duration={_fmt(s.duration)}"
        if s.truth is not None:
            jumps = ";".join(f"{_fmt(t)}:{n}" for t, n in s.truth.events)
            rec += f" initial_n={s.truth.initial_n} jumps={jumps}"
        lines.append(rec)
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
        for s in seqs:
            sid = str(s.id)
            t = s.times.tolist()
            k = s.phase_index.tolist()
            j = s.outcome.tolist()
            if has_truth:
                tn = s.truth_n().tolist() if s.truth is not None else [-1] * len(s)
                fh.write("".join(f"{sid},{a!r},{b},{c},{d}\n" for a, b, c, d in zip(t, k, j, tn)))
            else:
                fh.write("".join(f"{sid},{a!r},{b},{c}\n" for a, b, c in zip(t, k, j)))
    return path


def _parse_record(path, lineno, text):
    toks = text.split()
    # "# record <id> key=value ..."
    if len(toks) < 3:
        raise SequenceFormatError(path, lineno, "record line lacks a sequence id")
    try:
        sid = int(toks[2])
    except ValueError:
        raise SequenceFormatError(path, lineno, f"record id {toks[2]!r} is not an integer") from None
    info = {}
    for tok in toks[3:]:
        if "=" not in tok:
            raise SequenceFormatError(path, lineno, f"record {sid}: malformed field {tok!r}")
        k, v = tok.split("=", 1)
        info[k] = v
    out = {"lineno": lineno}
    try:
        if "duration" in info:
            out["duration"] = float(info["duration"])
        if "detections" in info:
            out["detections"] = int(info["detections"])
        if "initial_n" in info:
            events = []
            if info.get("jumps"):
                for pair in info["jumps"].split(";"):
                    t, n = pair.split(":")
                    events.append((float(t), int(n)))
            out["truth"] = JumpPath(int(info["initial_n"]), tuple(events))
    except ValueError as exc:
        raise SequenceFormatError(path, lineno, f"record {sid}: {exc}") from None
    return sid, out


def _slow_parse(path, lines, n_phases):
    """Line-by-line parser used to locate the first error precisely."""
    ncols = None
    last = {}
    count = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f.strip() for f in line.split(",")]
        if ncols is None:
            ncols = len(fields)
            if ncols not in (4, 5):
                raise SequenceFormatError(path, lineno, f"expected 4 or 5 fields, found {ncols}")
        if len(fields) != ncols:
            raise SequenceFormatError(path, lineno, f"expected {ncols} fields, found {len(fields)}")
        names = SEQUENCE_COLUMNS[:ncols]
        vals = []
        for name, f in zip(names, fields):
            try:
                vals.append(float(f) if name == "time_s" else int(f))
            except ValueError:
                raise SequenceFormatError(path, lineno, f"field {name!r}: cannot parse {f!r}") from None
        sid, t, k, j = vals[:4]
        d = count.get(sid, 0)
        where = f"record {sid}, detection {d}"
        if not math.isfinite(t):
            raise SequenceFormatError(path, lineno, f"{where}: field 'time_s' is not finite")
        if sid in last and not t > last[sid]:
            raise SequenceFormatError(
                path, lineno, f"{where}: field 'time_s' {t!r} does not increase "
                f"(previous {last[sid]!r})")
        if k < 0 or (n_phases is not None and k >= n_phases):
            raise SequenceFormatError(path, lineno, f"{where}: field 'phase_index' {k} out of range")
        if j not in (0, 1):
            raise SequenceFormatError(path, lineno, f"{where}: field 'outcome' {j} is not 0 or 1")
        last[sid] = t
        count[sid] = d + 1
    return None


def ingest_sequences(path, n_phases: int | None = None) -> list[SequenceRecord]:
    """Read a sequence file; validates field syntax, monotone times per
    record and index ranges, reporting the line, record and field at fault.

    ``n_phases`` defaults to the ``phase_settings`` count in the header when
    present.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ArtifactError(f"{path}: cannot read ({exc.strerror})") from None
    lines = text.splitlines()
    records = {}
    comments = []
    data_start = None
    for lineno, line in enumerate(lines, 1):
        s = line.strip()
        if s.startswith("#"):
            comments.append(s)
            if s.startswith("# record"):
                sid, info = _parse_record(path, lineno, s)
                if sid in records:
                    raise SequenceFormatError(path, lineno, f"record {sid} declared twice")
                records[sid] = info
        elif s and data_start is None:
            data_start = lineno
    meta = _meta_from_comments(comments)
    if n_phases is None and "n_phases" in meta:
        n_phases = int(meta["n_phases"])
    if data_start is None:
        return [SequenceRecord(sid, [], [], [], truth=r.get("truth"), duration=r.get("duration"))
                for sid, r in records.items()]
    try:
        with np.errstate(all="ignore"):
            raw = np.loadtxt(io.StringIO(text), delimiter=",", comments="#", ndmin=2, dtype=float)
    except ValueError:
        _slow_parse(path, lines, n_phases)
        raise SequenceFormatError(path, data_start, "unparseable data") from None
    ncols = raw.shape[1]
    bad = ncols not in (4, 5) or not np.all(np.isfinite(raw))
    ints = raw[:, [0, 2, 3] + ([4] if ncols == 5 else [])] if ncols in (4, 5) else raw
    bad = bad or not np.array_equal(ints, np.round(ints))
    if not bad:
        sid = raw[:, 0].astype(np.int64)
        order = np.argsort(sid, kind="stable")
        ss = sid[order]
        tt = raw[order, 1]
        same = ss[1:] == ss[:-1]
        bad = bool(np.any(same & (np.diff(tt) <= 0)))
        k = raw[:, 2]
        bad = bad or bool(np.any(k < 0)) or (n_phases is not None and bool(np.any(k >= n_phases)))
        bad = bad or bool(np.any((raw[:, 3] != 0) & (raw[:, 3] != 1)))
    if bad:
        _slow_parse(path, lines, n_phases)
        raise SequenceFormatError(path, data_start, "invalid data")
    bounds = np.flatnonzero(np.concatenate([[True], ~same, [True]]))
    out = {}
    for a, b in zip(bounds[:-1], bounds[1:]):
        rows = order[a:b]
        i = int(ss[a])
        r = records.get(i, {})
        seq = SequenceRecord(i, raw[rows, 1], raw[rows, 2].astype(np.int64),
                             raw[rows, 3].astype(np.int64), truth=r.get("truth"),
                             duration=r.get("duration"))
        if ncols == 5:
            tn = raw[rows, 4].astype(np.int64)
            if seq.truth is not None and not np.array_equal(seq.truth_n(), tn):
                raise SequenceFormatError(path, r["lineno"],
                                          f"record {i}: truth_n column disagrees with its jump path")
            if seq.truth is None:
                seq.meta["truth_n"] = tn
        if "detections" in r and r["detections"] != len(seq):
            raise SequenceFormatError(path, r["lineno"], f"record {i}: declares {r['detections']} "
                                      f"detections, file holds {len(seq)}")
        out[i] = seq
    for i, r in records.items():
        if i not in out:
            if r.get("detections", 0):
                raise SequenceFormatError(path, r["lineno"], f"record {i}: declared detections missing")
            out[i] = SequenceRecord(i, [], [], [], truth=r.get("truth"), duration=r.get("duration"))
    first_seen = {}
    for i in list(records) + [int(x) for x in ss[bounds[:-1]]]:
        first_seen.setdefault(i, len(first_seen))
    return [out[i] for i in sorted(out, key=first_seen.__getitem__)]


# --- generic tables -------------------------------------------------------


def write_table(path, artifact, config_hash, seed, columns, rows, notes=()) -> Path:
    path = Path(path)
    lines = header_lines(artifact, config_hash, seed, notes)
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_table(path) -> tuple[dict, list[str], np.ndarray]:
    """``(meta, columns, data)`` of a numeric table written by :func:`write_table`."""
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"{path}: missing")
    comments, columns, rows = [], None, []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            comments.append(s)
            continue
        if columns is None:
            columns = s.split(",")
            continue
        fields = s.split(",")
        if len(fields) != len(columns):
            raise ArtifactError(f"{path}:{lineno}: expected {len(columns)} fields, found {len(fields)}")
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            raise ArtifactError(f"{path}:{lineno}: non-numeric field") from None
    if columns is None:
        raise ArtifactError(f"{path}: no header row")
    data = np.array(rows, float).reshape(len(rows), len(columns))
    return _meta_from_comments(comments), columns, data


def write_keyvalue(path, artifact, config_hash, seed, items, notes=()) -> Path:
    path = Path(path)
    lines = header_lines(artifact, config_hash, seed, notes)
    lines += [f"{k} = {_fmt(v)}" for k, v in items]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_keyvalue(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"{path}: missing")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ArtifactError(f"{path}:{lineno}: expected key = value")
        k, v = s.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# --- posteriors -----------------------------------------------------------


def write_posteriors(path, timelines, config_hash, seed, index_path) -> tuple[Path, Path]:
    """Posteriors as raw little-endian float32 after a one-line text header,
    plus an index table mapping sequences to row ranges."""
    path = Path(path)
    timelines = list(timelines)
    D = timelines[0].posteriors.shape[1] if timelines else 0
    total = sum(len(tl) for tl in timelines)
    head = (f"# fockdamp posteriors config_hash={config_hash} seed={seed} "
            f"dtype=<f4 rows={total} columns={D}\n")
    with open(path, "wb") as fh:
        fh.write(head.encode())
        for tl in timelines:
            fh.write(np.ascontiguousarray(tl.posteriors, dtype="<f4").tobytes())
    rows, r = [], 0
    for tl in timelines:
        rows.append((tl.sequence_id, r, len(tl), tl.t_start))
        r += len(tl)
    prior = timelines[0].prior if timelines else []
    write_table(index_path, "posterior_index", config_hash, seed,
                ["sequence_id", "first_row", "row_count", "t_start_s"], rows,
                notes=["rows index the float32 posterior file; column n is P(n | detections so far)",
                       "prior=" + ";".join(_fmt(float(p)) for p in prior)])
    return path, Path(index_path)


def read_posteriors(path, index_path):
    """``(matrix, index)``; ``index`` maps sequence id -> (first_row, row_count, t_start)."""
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"{path}: missing")
    with open(path, "rb") as fh:
        head = fh.readline().decode(errors="replace")
        meta = _meta_from_comments([head])
        try:
            rows, cols = int(meta["rows"]), int(meta["columns"])
        except (KeyError, ValueError):
            raise ArtifactError(f"{path}:1: malformed posterior header") from None
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != rows * cols:
        raise ArtifactError(f"{path}: expected {rows * cols} values, found {data.size}")
    _, _, idx = read_table(index_path)
    index = {int(s): (int(a), int(c), float(t)) for s, a, c, t in idx}
    return data.reshape(rows, cols), index


# --- events and timelines -------------------------------------------------


def write_events(path, events, config_hash, seed, truth=None) -> Path:
    truth = truth or {}
    rows = [(e.sequence_id, e.t0, e.n0, e.posterior_peak, truth.get(i, -1))
            for i, e in enumerate(events)]
    return write_table(path, "fock_events", config_hash, seed,
                       ["sequence_id", "t0_s", "n0", "posterior_peak", "truth_n"], rows,
                       notes=["truth_n is -1 when no ground truth is available"])


def read_events(path) -> list[FockSelectionEvent]:
    _, cols, data = read_table(path)
    c = {name: i for i, name in enumerate(cols)}
    return [FockSelectionEvent(int(r[c["sequence_id"]]), float(r[c["t0_s"]]), int(r[c["n0"]]),
                               float(r[c["posterior_peak"]])) for r in data]


def write_timelines(path, artifact, timelines: dict, config_hash, seed, notes=()) -> Path:
    """Long-format table of ``label -> DistributionTimeline``."""
    rows = []
    D = None
    for label in sorted(timelines):
        tl = timelines[label]
        D = tl.table.shape[1]
        sparse = set(tl.sparse)
        for g, t in enumerate(tl.grid):
            rows.append((label, t, int(tl.counts[g]), int(g in sparse), *tl.table[g]))
    cols = ["label", "time_s", "realizations", "sparse"] + [f"P{n}" for n in range(D or 0)]
    return write_table(path, artifact, config_hash, seed, cols, rows,
                       notes=list(notes) + ["P columns are photon-number probabilities; "
                                            "nan marks grid times without data"])


def read_timelines(path) -> dict:
    _, cols, data = read_table(path)
    if cols[:4] != ["label", "time_s", "realizations", "sparse"]:
        raise ArtifactError(f"{path}: unexpected columns {cols[:4]}")
    out = {}
    for label in np.unique(data[:, 0]):
        rows = data[data[:, 0] == label]
        sparse = list(np.flatnonzero(rows[:, 3] > 0))
        out[int(label)] = DistributionTimeline(rows[:, 1], rows[:, 4:], rows[:, 2].astype(np.int64),
                                               sparse=sparse)
    return out
