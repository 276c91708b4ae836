"""Biosemi BDF reading and writing.

Layout: a 256-byte main header, 256 bytes of per-channel header for each
channel, then data records. Inside a record every channel contributes
``samples_per_record`` little-endian 24-bit two's-complement samples. The
status (trigger) channel is the last channel; its lower 16 bits carry the
trigger code.
"""

import io
import os
from dataclasses import dataclass, field

import numpy as np

from erp_forge.errors import InconsistentShape, MalformedHeader, TruncatedRecords

BDF_MAGIC = b"\xffBIOSEMI"
STATUS_LABEL = "Status"
TARGET_CODE = 115
NONTARGET_CODE = 234

_UNIT_SCALE = {"uv": 1.0, "µv": 1.0, "mv": 1e3, "v": 1e6, "nv": 1e-3}


@dataclass(frozen=True)
class BdfHeader:
    record_count: int
    record_duration_s: float
    labels: tuple
    physical_min: tuple
    physical_max: tuple
    digital_min: tuple
    digital_max: tuple
    samples_per_record: tuple
    patient_id: str = ""
    recording_id: str = ""
    start_date: str = "01.01.00"
    start_time: str = "00.00.00"
    transducer: tuple = None
    physical_dim: tuple = None
    prefiltering: tuple = None
    version_magic: bytes = BDF_MAGIC

    def __post_init__(self):
        n = len(self.labels)
        for name in ("physical_min", "physical_max", "digital_min", "digital_max", "samples_per_record"):
            if len(getattr(self, name)) != n:
                raise MalformedHeader(f"{name} has {len(getattr(self, name))} entries for {n} channels")
        if self.transducer is None:
            object.__setattr__(self, "transducer", ("",) * n)
        if self.physical_dim is None:
            object.__setattr__(self, "physical_dim", tuple("" if lab == STATUS_LABEL else "uV" for lab in self.labels))
        if self.prefiltering is None:
            object.__setattr__(self, "prefiltering", ("",) * n)
        self.validate()

    @property
    def channel_count(self):
        return len(self.labels)

    def validate(self):
        if self.channel_count < 1:
            raise MalformedHeader("channel_count must be >= 1")
        if self.record_count < 0:
            raise MalformedHeader(f"record_count {self.record_count} < 0")
        if not self.record_duration_s > 0:
            raise MalformedHeader(f"record duration {self.record_duration_s} must be > 0")
        for i, lab in enumerate(self.labels):
            if self.digital_max[i] <= self.digital_min[i]:
                raise MalformedHeader(f"channel {lab!r}: digital_max <= digital_min")
            if self.physical_max[i] <= self.physical_min[i]:
                raise MalformedHeader(f"channel {lab!r}: physical_max <= physical_min")
            if self.samples_per_record[i] < 1:
                raise MalformedHeader(f"channel {lab!r}: samples_per_record < 1")
            if not -(2 ** 23) <= self.digital_min[i] < self.digital_max[i] <= 2 ** 23 - 1:
                raise MalformedHeader(f"channel {lab!r}: digital range exceeds 24 bits")
        if len(set(self.samples_per_record)) != 1:
            raise MalformedHeader("channels with differing samples_per_record are not supported")

    @property
    def header_bytes(self):
        return 256 * (self.channel_count + 1)

    @property
    def sample_rate_hz(self):
        return self.samples_per_record[0] / self.record_duration_s

    def gain_offset(self):
        """Per-channel (gain, offset) mapping digital values to physical units."""
        pmin, pmax = np.asarray(self.physical_min, float), np.asarray(self.physical_max, float)
        dmin, dmax = np.asarray(self.digital_min, float), np.asarray(self.digital_max, float)
        gain = (pmax - pmin) / (dmax - dmin)
        return gain, pmin - dmin * gain

    def status_index(self):
        for i, lab in enumerate(self.labels):
            if lab.strip().lower() == STATUS_LABEL.lower():
                return i
        return self.channel_count - 1


@dataclass
class RawRecording:
    """Continuous EEG in microvolts plus trigger events.

    ``samples`` holds the EEG channels only (status excluded). ``digital``
    keeps the undecoded integers of every channel, status included, so a
    parsed file can be written back bit-exactly.
    """

    samples: np.ndarray
    sample_rate_hz: float
    events: list
    labels: tuple = ()
    digital: np.ndarray = field(default=None, repr=False)

    @property
    def n_samples(self):
        return self.samples.shape[1]


@dataclass(frozen=True)
class LabeledEvent:
    sample_index: int
    label: int


def decode_sample24(bytes3):
    """Little-endian 24-bit two's-complement integer."""
    if len(bytes3) != 3:
        raise ValueError(f"expected 3 bytes, got {len(bytes3)}")
    return int.from_bytes(bytes(bytes3), "little", signed=True)


def encode_sample24(value):
    if not -(2 ** 23) <= value < 2 ** 23:
        raise ValueError(f"{value} does not fit in 24 bits")
    return int(value).to_bytes(3, "little", signed=True)


def _decode_block(raw):
    b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
    v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
    return np.where(v >= 1 << 23, v - (1 << 24), v).astype(np.int32)


def _encode_block(values):
    v = np.asarray(values, dtype=np.int64)
    if v.size and (v.min() < -(2 ** 23) or v.max() > 2 ** 23 - 1):
        raise InconsistentShape("digital values exceed the 24-bit range")
    u = (v & 0xFFFFFF).astype(np.uint32)
    out = np.empty((u.size, 3), dtype=np.uint8)
    out[:, 0] = u & 0xFF
    out[:, 1] = (u >> 8) & 0xFF
    out[:, 2] = (u >> 16) & 0xFF
    return out.tobytes()


def events_from_status(status):
    """Rising edges of the 16-bit trigger word: (sample_index, code) pairs."""
    code = np.asarray(status, dtype=np.int64) & 0xFFFF
    prev = np.concatenate([[0], code[:-1]])
    idx = np.flatnonzero((code != 0) & (prev == 0))
    return [(int(i), int(code[i])) for i in idx]


def _field(buf, pos, width):
    return buf[pos:pos + width].decode("ascii", errors="replace").strip()


def _num(text, what, cast=float):
    try:
        return cast(text) if cast is not int else int(float(text))
    except ValueError:
        raise MalformedHeader(f"non-numeric {what}: {text!r}") from None


def _read_header(buf):
    if len(buf) < 256:
        raise MalformedHeader("file shorter than the 256-byte main header")
    if buf[:8] != BDF_MAGIC:
        raise MalformedHeader(f"bad identification bytes {buf[:8]!r}")
    patient_id = _field(buf, 8, 80)
    recording_id = _field(buf, 88, 80)
    start_date = _field(buf, 168, 8)
    start_time = _field(buf, 176, 8)
    header_bytes = _num(_field(buf, 184, 8), "header byte count", int)
    record_count = _num(_field(buf, 236, 8), "record count", int)
    duration = _num(_field(buf, 244, 8), "record duration")
    ns = _num(_field(buf, 252, 4), "channel count", int)
    if ns < 1:
        raise MalformedHeader(f"channel count {ns} < 1")
    if header_bytes != 256 * (ns + 1):
        raise MalformedHeader(f"header byte count {header_bytes} != 256 * ({ns} + 1)")
    if len(buf) < header_bytes:
        raise MalformedHeader("file shorter than its declared header")

    pos = 256

    def block(width):
        nonlocal pos
        vals = [_field(buf, pos + i * width, width) for i in range(ns)]
        pos += ns * width
        return vals

    labels = block(16)
    transducer = block(80)
    physical_dim = block(8)
    pmin = [_num(v, "physical minimum") for v in block(8)]
    pmax = [_num(v, "physical maximum") for v in block(8)]
    dmin = [_num(v, "digital minimum", int) for v in block(8)]
    dmax = [_num(v, "digital maximum", int) for v in block(8)]
    prefiltering = block(80)
    spr = [_num(v, "samples per record", int) for v in block(8)]
    if record_count == -1 and spr and spr[0] > 0:
        # recording interrupted before the count was written: infer from size
        record_count = (len(buf) - header_bytes) // (3 * sum(spr))
    return BdfHeader(
        record_count=record_count,
        record_duration_s=duration,
        labels=tuple(labels),
        physical_min=tuple(pmin),
        physical_max=tuple(pmax),
        digital_min=tuple(dmin),
        digital_max=tuple(dmax),
        samples_per_record=tuple(spr),
        patient_id=patient_id,
        recording_id=recording_id,
        start_date=start_date,
        start_time=start_time,
        transducer=tuple(transducer),
        physical_dim=tuple(physical_dim),
        prefiltering=tuple(prefiltering),
    )


def _read_all(source):
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return fh.read()
    return source.read()


def parse_bdf(source):
    """Parse a BDF file (path, bytes or binary stream) into (BdfHeader, RawRecording)."""
    buf = _read_all(source)
    header = _read_header(buf)
    ns = header.channel_count
    spr = header.samples_per_record[0]
    record_bytes = 3 * spr * ns
    needed = header.header_bytes + header.record_count * record_bytes
    if len(buf) < needed:
        raise TruncatedRecords(f"need {needed} bytes for {header.record_count} records, file has {len(buf)}")
    data = buf[header.header_bytes:needed]
    digital = _decode_block(data).reshape(header.record_count, ns, spr)
    digital = digital.transpose(1, 0, 2).reshape(ns, header.record_count * spr)

    st = header.status_index()
    eeg = [i for i in range(ns) if i != st]
    gain, offset = header.gain_offset()
    scale = np.array([_UNIT_SCALE.get(header.physical_dim[i].strip().lower(), 1.0) for i in eeg])
    samples = (digital[eeg] * gain[eeg, None] + offset[eeg, None]) * scale[:, None]
    events = events_from_status(digital[st]) if ns > 1 else []
    rec = RawRecording(
        samples=samples,
        sample_rate_hz=header.sample_rate_hz,
        events=events,
        labels=tuple(header.labels[i] for i in eeg),
        digital=digital,
    )
    return header, rec


def load_recording(source):
    """Just the RawRecording of :func:`parse_bdf`."""
    return parse_bdf(source)[1]


def _pad(text, width):
    raw = str(text).encode("ascii", errors="replace")[:width]
    return raw + b" " * (width - len(raw))


def _fmt_num(value, width=8):
    v = float(value)
    if v.is_integer() and len(str(int(v))) <= width:
        return str(int(v))
    for prec in range(width, 0, -1):
        text = f"{v:.{prec}g}"
        if len(text) <= width:
            return text
    raise InconsistentShape(f"{value!r} does not fit an {width}-character header field")


def header_bytes(header):
    ns = header.channel_count
    out = [
        header.version_magic,
        _pad(header.patient_id, 80),
        _pad(header.recording_id, 80),
        _pad(header.start_date, 8),
        _pad(header.start_time, 8),
        _pad(header.header_bytes, 8),
        _pad("24BIT", 44),
        _pad(header.record_count, 8),
        _pad(_fmt_num(header.record_duration_s), 8),
        _pad(ns, 4),
    ]
    for values, width in (
        (header.labels, 16),
        (header.transducer, 80),
        (header.physical_dim, 8),
        ([_fmt_num(v) for v in header.physical_min], 8),
        ([_fmt_num(v) for v in header.physical_max], 8),
        ([_fmt_num(v) for v in header.digital_min], 8),
        ([_fmt_num(v) for v in header.digital_max], 8),
        (header.prefiltering, 80),
        (header.samples_per_record, 8),
        ([""] * ns, 32),
    ):
        out.extend(_pad(v, width) for v in values)
    return b"".join(out)


def status_from_events(events, n_samples, hold=8):
    """Status channel holding each code for ``hold`` samples (or until the next event)."""
    status = np.zeros(n_samples, dtype=np.int32)
    events = sorted(events)
    for k, (idx, code) in enumerate(events):
        end = idx + hold
        if k + 1 < len(events):
            end = min(end, events[k + 1][0] - 1)
        status[idx:max(end, idx + 1)] = code
    return status


def to_digital(header, recording):
    """Digital matrix (all channels, status included) for ``recording``."""
    if recording.digital is not None:
        return np.asarray(recording.digital)
    ns = header.channel_count
    st = header.status_index()
    eeg = [i for i in range(ns) if i != st]
    n = recording.samples.shape[1]
    if recording.samples.shape[0] != len(eeg):
        raise InconsistentShape(f"{recording.samples.shape[0]} EEG rows for {len(eeg)} EEG channels in header")
    gain, offset = header.gain_offset()
    dig = np.zeros((ns, n), dtype=np.int64)
    phys = np.asarray(recording.samples, dtype=np.float64)
    q = np.rint((phys - offset[eeg, None]) / gain[eeg, None])
    lo = np.asarray(header.digital_min)[eeg, None]
    hi = np.asarray(header.digital_max)[eeg, None]
    dig[eeg] = np.clip(q, lo, hi).astype(np.int64)
    dig[st] = status_from_events(recording.events, n)
    return dig


def write_bdf(header, recording, dest=None):
    """Serialise to BDF bytes; also written to ``dest`` (path or stream) when given."""
    digital = to_digital(header, recording)
    ns = header.channel_count
    spr = header.samples_per_record[0]
    if digital.shape != (ns, header.record_count * spr):
        raise InconsistentShape(
            f"digital block {digital.shape} != ({ns}, {header.record_count} records x {spr} samples)"
        )
    dmin = np.asarray(header.digital_min)[:, None]
    dmax = np.asarray(header.digital_max)[:, None]
    st = header.status_index()
    eeg = np.ones(ns, bool)
    eeg[st] = False
    if digital.size and ((digital[eeg] < dmin[eeg]).any() or (digital[eeg] > dmax[eeg]).any()):
        raise InconsistentShape("digital samples outside the header's digital range")
    blocks = digital.reshape(ns, header.record_count, spr).transpose(1, 0, 2)
    payload = header_bytes(header) + _encode_block(blocks.reshape(-1))
    if dest is not None:
        if isinstance(dest, (str, os.PathLike)):
            with open(dest, "wb") as fh:
                fh.write(payload)
        else:
            dest.write(payload)
    return payload


def make_header(labels, n_samples, sample_rate_hz, *, record_duration_s=1.0, physical_range_uv=262144.0,
                patient_id="", recording_id=""):
    """Header for EEG ``labels`` plus a trailing Status channel.

    The default physical range maps one digital step to 1/32 microvolt,
    matching the Biosemi ActiveTwo convention.
    """
    spr = int(round(sample_rate_hz * record_duration_s))
    if n_samples % spr:
        raise InconsistentShape(f"{n_samples} samples is not a whole number of {spr}-sample records")
    n_eeg = len(labels)
    dmin, dmax = -(2 ** 23), 2 ** 23 - 1
    return BdfHeader(
        record_count=n_samples // spr,
        record_duration_s=record_duration_s,
        labels=tuple(labels) + (STATUS_LABEL,),
        physical_min=(-physical_range_uv,) * n_eeg + (float(dmin),),
        physical_max=(physical_range_uv,) * n_eeg + (float(dmax),),
        digital_min=(dmin,) * (n_eeg + 1),
        digital_max=(dmax,) * (n_eeg + 1),
        samples_per_record=(spr,) * (n_eeg + 1),
        patient_id=patient_id,
        recording_id=recording_id,
    )


def label_events(events, target_code=TARGET_CODE, nontarget_code=NONTARGET_CODE):
    """Map trigger events to binary labels; events with any other code are discarded."""
    if target_code == nontarget_code:
        raise ValueError("target and non-target codes must differ")
    out = []
    for idx, code in events:
        if code == target_code:
            out.append(LabeledEvent(int(idx), 1))
        elif code == nontarget_code:
            out.append(LabeledEvent(int(idx), 0))
    return out


def events_to_csv(events, labeled=None):
    """CSV text with columns sample_index, trigger_code[, label]."""
    buf = io.StringIO()
    lab = {e.sample_index: e.label for e in (labeled or [])}
    buf.write("sample_index,trigger_code,label\n")
    for idx, code in events:
        buf.write(f"{idx},{code},{lab.get(idx, '')}\n")
    return buf.getvalue()
