"""File formats: MOTChallenge lines, embedding sidecars, checkpoints and flat run configs.

Floats are written so that reading them back gives the identical 64-bit
value: MOT and CSV fields use Python's shortest round-trip repr (integral
values without a trailing ``.0``), embedding sidecars use 17 significant
digits, and checkpoints store arrays as JSON numbers.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import BoundingBox, Detection
from .embed import EmbeddingModel, OffsetHead, ProjectionHead
from .metrics import FrameBoxes
from .mtcl import TrainConfig
from .sim import ScenarioConfig
from .tracker import TrackerConfig

CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    pass


def format_number(x: float) -> str:
    x = float(x)
    if x.is_integer() and abs(x) < 2 ** 53:
        return str(int(x))
    return repr(x)


# -- MOTChallenge lines -------------------------------------------------------

@dataclass(frozen=True)
class MotLine:
    frame: int
    id: int
    bb_left: float
    bb_top: float
    bb_width: float
    bb_height: float
    conf: float = 1.0
    x: float = -1.0
    y: float = -1.0
    z: float = -1.0

    @property
    def box(self) -> BoundingBox:
        return BoundingBox(self.bb_left, self.bb_top, self.bb_width, self.bb_height)


def parse_mot_line(text: str, lineno: int | None = None) -> MotLine:
    where = f"line {lineno}: " if lineno is not None else ""
    parts = [p.strip() for p in text.strip().split(",")]
    if len(parts) != 10:
        raise FormatError(f"{where}expected 10 comma-separated fields, got {len(parts)}")
    try:
        vals = [float(p) for p in parts]
    except ValueError as exc:
        raise FormatError(f"{where}non-numeric field ({exc})") from None
    for k in (0, 1):
        if not vals[k].is_integer():
            raise FormatError(f"{where}field {k + 1} must be an integer")
    frame, ident = int(vals[0]), int(vals[1])
    if frame < 1:
        raise FormatError(f"{where}frame must be >= 1")
    if ident < 1 and ident != -1:
        raise FormatError(f"{where}id must be >= 1 or -1")
    return MotLine(frame, ident, *vals[2:])


def write_mot_line(m: MotLine) -> str:
    return ",".join([str(m.frame), str(m.id)] + [
        format_number(v) for v in (m.bb_left, m.bb_top, m.bb_width, m.bb_height,
                                   m.conf, m.x, m.y, m.z)])


def read_mot_file(path) -> list[MotLine]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            if line.strip():
                out.append(parse_mot_line(line, n))
    return out


def write_mot_file(path, lines) -> None:
    with open(path, "w") as fh:
        for m in lines:
            fh.write(write_mot_line(m) + "\n")


def lines_to_frames(lines) -> list[FrameBoxes]:
    by_frame: dict = {}
    for m in lines:
        by_frame.setdefault(m.frame, []).append((m.id, m.box))
    return [FrameBoxes(f, objs) for f, objs in sorted(by_frame.items())]


def frames_to_lines(frames) -> list[MotLine]:
    return [MotLine(fr.frame, ident, box.left, box.top, box.width, box.height)
            for fr in frames for ident, box in fr.objects]


# -- embedding sidecar ----------------------------------------------------------

def write_embeddings(path, frames, embeddings) -> None:
    """Header ``D=<dim>``, then ``frame,det_index,v1..vD`` per detection line.

    ``det_index`` counts detections within their frame, starting at 0.
    """
    e = np.asarray(embeddings, dtype=float).reshape(len(frames), -1)
    counts: dict = {}
    with open(path, "w") as fh:
        fh.write(f"D={e.shape[1]}\n")
        for frame, row in zip(frames, e):
            idx = counts.get(frame, 0)
            counts[frame] = idx + 1
            fh.write(f"{frame},{idx}," + ",".join("%.17g" % v for v in row) + "\n")


def read_embeddings(path) -> tuple[list, np.ndarray]:
    """``([(frame, det_index), ...], embeddings)`` from a sidecar file."""
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("D="):
            raise FormatError("line 1: embedding file must start with 'D=<dim>'")
        try:
            dim = int(header[2:])
        except ValueError:
            raise FormatError("line 1: bad dimension in header") from None
        keys, rows = [], []
        for n, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != dim + 2:
                raise FormatError(f"line {n}: expected {dim + 2} fields, got {len(parts)}")
            try:
                keys.append((int(parts[0]), int(parts[1])))
                rows.append([float(v) for v in parts[2:]])
            except ValueError as exc:
                raise FormatError(f"line {n}: bad value ({exc})") from None
    return keys, np.array(rows, dtype=float).reshape(len(rows), dim)


def detections_from_files(det_path, emb_path) -> dict:
    """``{frame: [Detection]}`` from a MOT detection file and its embedding sidecar."""
    lines = read_mot_file(det_path)
    keys, emb = read_embeddings(emb_path)
    if len(emb) != len(lines):
        raise FormatError(f"{len(lines)} detections but {len(emb)} embedding rows")
    out: dict = {}
    for n, (m, (frame, idx), e) in enumerate(zip(lines, keys, emb), start=1):
        if frame != m.frame or idx != len(out.get(frame, [])):
            raise FormatError(f"detection {n}: embedding row ({frame},{idx}) does not match "
                              f"frame {m.frame}")
        out.setdefault(m.frame, []).append(
            Detection(m.frame, m.box, min(1.0, max(0.0, m.conf)), e))
    return out


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, model: EmbeddingModel, eta=None, metadata: dict | None = None) -> None:
    params = {name: {"shape": list(p.shape), "data": p.ravel().tolist()}
              for name, p in model.params().items()}
    params["offset.pattern"] = {"shape": list(model.offset.pattern.shape),
                                "data": model.offset.pattern.ravel().tolist()}
    doc = {
        "version": CHECKPOINT_VERSION,
        "metadata": metadata or {},
        "offset_units": model.offset.units,
        "normalize_output": model.proj.normalize_output,
        "eta": None if eta is None else [float(v) for v in eta],
        "params": params,
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[EmbeddingModel, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {doc.get('version')!r}")

    def arr(name):
        p = doc["params"][name]
        return np.array(p["data"], dtype=float).reshape(p["shape"])

    model = EmbeddingModel(
        OffsetHead(arr("offset.W"), arr("offset.pattern"), doc["offset_units"]),
        ProjectionHead([arr(f"proj.W{k}") for k in range(1, 5)],
                       [arr(f"proj.b{k}") for k in range(1, 5)], doc["normalize_output"]),
    )
    return model, doc


# -- flat key=value run configuration ---------------------------------------------

SECTIONS = {"scenario": ScenarioConfig, "train": TrainConfig, "tracker": TrackerConfig}


def _schema() -> dict:
    """key -> list of (section, field). ``seed`` is shared by scenario and training."""
    out: dict = {}
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            out.setdefault(f.name, []).append((section, f))
    return out


def _coerce(raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig = ScenarioConfig()
    train: TrainConfig = TrainConfig()
    tracker: TrackerConfig = TrackerConfig()

    def with_values(self, values: dict) -> "RunConfig":
        """Apply string ``key -> value`` overrides; unknown keys raise ValueError."""
        schema = _schema()
        updates = {s: {} for s in SECTIONS}
        for key, raw in values.items():
            if key not in schema:
                raise ValueError(f"unknown config key {key!r}")
            for section, f in schema[key]:
                default = getattr(getattr(self, section), f.name)
                try:
                    updates[section][f.name] = _coerce(str(raw), default)
                except ValueError as exc:
                    raise ValueError(f"bad value for {key}: {exc}") from None
        return RunConfig(**{s: dataclasses.replace(getattr(self, s), **u)
                            for s, u in updates.items()})

    def to_text(self) -> str:
        lines, seen = [], set()
        for section in SECTIONS:
            obj = getattr(self, section)
            lines.append(f"# [{section}]")
            for f in dataclasses.fields(obj):
                if f.name in seen:
                    continue
                seen.add(f.name)
                v = getattr(obj, f.name)
                text = str(v).lower() if isinstance(v, bool) else \
                    format_number(v) if isinstance(v, float) else str(v)
                lines.append(f"{f.name}={text}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ValueError(f"config line {n}: duplicate key {key!r}")
        values[key] = val
    return (base or RunConfig()).with_values(values)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    return parse_config_text(Path(path).read_text(), base)


# -- training outputs -------------------------------------------------------------

LOSS_COLUMNS = ("epoch", "iteration", "l_tcl", "l_det", "l_total", "eta1", "eta2")


def write_loss_csv(path, history) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(LOSS_COLUMNS) + "\n")
        for rec in history:
            fh.write(",".join(format_number(getattr(rec, c)) for c in LOSS_COLUMNS) + "\n")


def write_embedding_dump(path, rows) -> None:
    """``trajectory_id,frame,v1..vD`` per target, 17 significant digits."""
    with open(path, "w") as fh:
        for ident, frame, vec in rows:
            fh.write(f"{ident},{frame}," + ",".join("%.17g" % v for v in vec) + "\n")
