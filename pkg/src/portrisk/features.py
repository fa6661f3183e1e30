"""Feature extraction: time-bucketed code counts plus expert features.

Every index event becomes one example: an ``n_buckets x |vocab|`` count
matrix over the lookback window (bucket 0 = the most recent pre-discharge
window) and a small expert vector.  The lookback covers day offsets
``1 .. n_buckets*bucket_days - 1`` strictly before the discharge date; a
claim admitting exactly at the boundary is out.  Claims are anchored on
their admit date.

Expert features, in order: age at discharge, female indicator, male
indicator, comorbidity score, claim count in lookback, total inpatient
days in lookback.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import numpy as np

from .claims import PatientHistory, Setting, Sex
from .cohort import IndexEvent
from .errors import ConfigError, DataError

EXPERT_FEATURE_NAMES = (
    "age_at_discharge",
    "sex_f",
    "sex_m",
    "cci_score",
    "claim_count",
    "inpatient_days",
)

DATASET_MAGIC = b"PRSK"
DATASET_VERSION = 1

_CCI_DEFAULT_PATH = Path(__file__).parent / "data" / "cci_weights.json"


@dataclass(frozen=True)
class FeatureSchema:
    vocab: tuple[str, ...]
    n_buckets: int = 12
    bucket_days: int = 30
    expert_feature_names: tuple[str, ...] = EXPERT_FEATURE_NAMES

    def __post_init__(self):
        if self.n_buckets < 1 or self.bucket_days < 1:
            raise ConfigError("n_buckets and bucket_days must be positive")

    @property
    def vocab_index(self) -> dict[str, int]:
        return {code: i for i, code in enumerate(self.vocab)}

    @property
    def lookback_days(self) -> int:
        return self.n_buckets * self.bucket_days

    @property
    def version_hash(self) -> str:
        payload = json.dumps({
            "vocab": list(self.vocab),
            "n_buckets": self.n_buckets,
            "bucket_days": self.bucket_days,
            "expert_feature_names": list(self.expert_feature_names),
        }, sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "vocab": list(self.vocab),
            "n_buckets": self.n_buckets,
            "bucket_days": self.bucket_days,
            "expert_feature_names": list(self.expert_feature_names),
            "version_hash": self.version_hash,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "FeatureSchema":
        schema = cls(vocab=tuple(raw["vocab"]),
                     n_buckets=raw["n_buckets"],
                     bucket_days=raw["bucket_days"],
                     expert_feature_names=tuple(raw["expert_feature_names"]))
        if "version_hash" in raw and raw["version_hash"] != schema.version_hash:
            raise DataError("schema version_hash does not match its fields")
        return schema


@dataclass(frozen=True)
class EncodedExample:
    sequence: np.ndarray   # (n_buckets, |vocab|) nonnegative counts
    expert: np.ndarray     # (len(expert_feature_names),)
    label: bool


@dataclass
class LabeledDataset:
    examples: list[EncodedExample]
    schema: FeatureSchema
    site_name: str
    example_ids: list[tuple[str, date]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.examples], dtype=np.int64)

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(sequences, experts, labels) as contiguous arrays."""
        if not self.examples:
            shape = (0, self.schema.n_buckets, len(self.schema.vocab))
            return (np.zeros(shape), np.zeros((0, len(self.schema.expert_feature_names))),
                    np.zeros(0, dtype=np.int64))
        seq = np.stack([e.sequence for e in self.examples])
        exp = np.stack([e.expert for e in self.examples])
        return seq, exp, self.labels

    def subset(self, indices) -> "LabeledDataset":
        idx = list(indices)
        return LabeledDataset(
            examples=[self.examples[i] for i in idx],
            schema=self.schema,
            site_name=self.site_name,
            example_ids=[self.example_ids[i] for i in idx] if self.example_ids else [],
        )


def fit_schema(events: list[IndexEvent], histories: list[PatientHistory],
               vocab_size_cap: int, n_buckets: int = 12,
               bucket_days: int = 30) -> FeatureSchema:
    """Vocabulary = top-k codes by document frequency over lookback windows.

    A document is one index event; a code counts once per event no matter
    how often it occurs.  Ties break lexicographically.
    """
    if not events:
        raise DataError("cannot fit a schema on an empty cohort")
    if vocab_size_cap < 1:
        raise ConfigError("vocab_size_cap must be positive")
    by_patient = {h.patient_id: h for h in histories}
    lookback = n_buckets * bucket_days
    doc_freq: dict[str, int] = {}
    for event in events:
        history = by_patient[event.patient_id]
        seen: set[str] = set()
        for claim in history.claims:
            offset = (event.discharge_date - claim.admit_date).days
            if not (1 <= offset < lookback):
                continue
            seen.update(claim.dx_codes)
            seen.update(claim.proc_codes)
            seen.update(claim.drug_codes)
        for code in seen:
            doc_freq[code] = doc_freq.get(code, 0) + 1
    ranked = sorted(doc_freq, key=lambda c: (-doc_freq[c], c))
    return FeatureSchema(vocab=tuple(ranked[:vocab_size_cap]),
                         n_buckets=n_buckets, bucket_days=bucket_days)


def load_cci_config(path: str | Path | None = None) -> tuple[dict[str, int], dict[str, list[str]]]:
    """Load (weight_table, category_prefix_map) from JSON config."""
    raw = json.loads(Path(path or _CCI_DEFAULT_PATH).read_text(encoding="utf-8"))
    weights = {k: int(v) for k, v in raw["weights"].items()}
    prefixes = {k: list(v) for k, v in raw["category_prefixes"].items()}
    unknown = set(prefixes) - set(weights)
    if unknown:
        raise ConfigError(f"categories without weights: {sorted(unknown)}")
    return weights, prefixes


def compute_cci(dx_codes, weight_table: dict[str, int],
                category_prefix_map: dict[str, list[str]]) -> int:
    """Sum of weights over distinct matched categories; multiplicity is ignored."""
    total = 0
    for category, weight in weight_table.items():
        prefixes = category_prefix_map.get(category, [])
        if any(code.startswith(p) for code in dx_codes for p in prefixes):
            total += weight
    return total


def encode_example(event: IndexEvent, history: PatientHistory,
                   schema: FeatureSchema,
                   cci_weights: dict[str, int],
                   cci_prefixes: dict[str, list[str]]) -> EncodedExample:
    index = schema.vocab_index
    seq = np.zeros((schema.n_buckets, len(schema.vocab)), dtype=np.float64)
    lookback_dx: list[str] = []
    claim_count = 0
    inpatient_days = 0
    for claim in history.claims:
        offset = (event.discharge_date - claim.admit_date).days
        if not (1 <= offset < schema.lookback_days):
            continue
        bucket = (offset - 1) // schema.bucket_days
        claim_count += 1
        if claim.setting is Setting.INPATIENT:
            inpatient_days += claim.duration_days()
        lookback_dx.extend(claim.dx_codes)
        for code in (*claim.dx_codes, *claim.proc_codes, *claim.drug_codes):
            col = index.get(code)
            if col is not None:
                seq[bucket, col] += 1.0

    demo = history.demographics
    expert = np.array([
        float(event.discharge_date.year - demo.birth_year),
        1.0 if demo.sex is Sex.F else 0.0,
        1.0 if demo.sex is Sex.M else 0.0,
        float(compute_cci(lookback_dx, cci_weights, cci_prefixes)),
        float(claim_count),
        float(inpatient_days),
    ], dtype=np.float64)
    return EncodedExample(sequence=seq, expert=expert, label=event.label_30d)


def encode_dataset(events: list[IndexEvent], histories: list[PatientHistory],
                   schema: FeatureSchema, site_name: str,
                   cci_config_path: str | Path | None = None) -> LabeledDataset:
    """Encode a cohort; events are processed in (patient_id, date) order so
    the result never depends on input ordering."""
    weights, prefixes = load_cci_config(cci_config_path)
    by_patient = {h.patient_id: h for h in histories}
    ordered = sorted(events, key=lambda e: (e.patient_id, e.discharge_date))
    examples, ids = [], []
    for event in ordered:
        history = by_patient.get(event.patient_id)
        if history is None:
            raise DataError(f"no history for cohort patient {event.patient_id}")
        examples.append(encode_example(event, history, schema, weights, prefixes))
        ids.append((event.patient_id, event.discharge_date))
    return LabeledDataset(examples=examples, schema=schema,
                          site_name=site_name, example_ids=ids)


@dataclass(frozen=True)
class ExpertStats:
    means: tuple[float, ...]
    stds: tuple[float, ...]
    clamped: tuple[bool, ...]

    def to_dict(self) -> dict:
        return {"means": list(self.means), "stds": list(self.stds),
                "clamped": list(self.clamped)}

    @classmethod
    def from_dict(cls, raw: dict) -> "ExpertStats":
        return cls(means=tuple(raw["means"]), stds=tuple(raw["stds"]),
                   clamped=tuple(bool(c) for c in raw["clamped"]))

    def apply(self, expert: np.ndarray) -> np.ndarray:
        return (expert - np.asarray(self.means)) / np.asarray(self.stds)


def fit_expert_stats(dataset: LabeledDataset) -> ExpertStats:
    _, experts, _ = dataset.stacked()
    means = experts.mean(axis=0)
    stds = experts.std(axis=0)  # population form: values {1, 3} map to -1, +1
    clamped = stds == 0.0
    stds = np.where(clamped, 1.0, stds)
    return ExpertStats(means=tuple(float(m) for m in means),
                       stds=tuple(float(s) for s in stds),
                       clamped=tuple(bool(c) for c in clamped))


def standardize_expert(dataset: LabeledDataset,
                       stats: ExpertStats | None = None
                       ) -> tuple[LabeledDataset, ExpertStats]:
    """Standardize expert features; fits stats on the dataset when absent.

    Zero-variance features keep their values (std clamped to 1) and are
    flagged in the returned stats.  Reusing fitted stats on another site's
    data is the intended path for remote application, so means there need
    not be zero.
    """
    if stats is None:
        stats = fit_expert_stats(dataset)
    standardized = [
        EncodedExample(sequence=e.sequence, expert=stats.apply(e.expert), label=e.label)
        for e in dataset.examples
    ]
    return (LabeledDataset(examples=standardized, schema=dataset.schema,
                           site_name=dataset.site_name,
                           example_ids=list(dataset.example_ids)), stats)


# --- binary dataset container -------------------------------------------

def save_dataset(path: str | Path, dataset: LabeledDataset) -> None:
    """Write the PRSK container: magic, version, header JSON, then
    row-major example blocks (label u8 | id | date | expert f64 | sequence f64)."""
    header = json.dumps({
        "schema": dataset.schema.to_dict(),
        "site_name": dataset.site_name,
        "n_examples": len(dataset.examples),
    }, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<II", DATASET_VERSION, len(header)))
        fh.write(header)
        for i, ex in enumerate(dataset.examples):
            pid, d = (dataset.example_ids[i] if dataset.example_ids
                      else ("", date(1970, 1, 1)))
            pid_bytes = pid.encode("utf-8")
            fh.write(struct.pack("<BH", int(ex.label), len(pid_bytes)))
            fh.write(pid_bytes)
            fh.write(d.isoformat().encode("ascii"))
            fh.write(np.ascontiguousarray(ex.expert, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(ex.sequence, dtype="<f8").tobytes())


def load_dataset(path: str | Path) -> LabeledDataset:
    data = Path(path).read_bytes()
    if data[:4] != DATASET_MAGIC:
        raise DataError(f"{path}: not a dataset file (bad magic)")
    version, header_len = struct.unpack_from("<II", data, 4)
    if version != DATASET_VERSION:
        raise DataError(f"{path}: unsupported dataset version {version}")
    off = 12
    header = json.loads(data[off:off + header_len].decode("utf-8"))
    off += header_len
    schema = FeatureSchema.from_dict(header["schema"])
    n_expert = len(schema.expert_feature_names)
    seq_shape = (schema.n_buckets, len(schema.vocab))
    seq_bytes = 8 * seq_shape[0] * seq_shape[1]
    examples, ids = [], []
    for _ in range(header["n_examples"]):
        label, pid_len = struct.unpack_from("<BH", data, off)
        off += 3
        pid = data[off:off + pid_len].decode("utf-8")
        off += pid_len
        d = date.fromisoformat(data[off:off + 10].decode("ascii"))
        off += 10
        expert = np.frombuffer(data, dtype="<f8", count=n_expert, offset=off).copy()
        off += 8 * n_expert
        seq = np.frombuffer(data, dtype="<f8", count=seq_shape[0] * seq_shape[1],
                            offset=off).reshape(seq_shape).copy()
        off += seq_bytes
        examples.append(EncodedExample(sequence=seq, expert=expert, label=bool(label)))
        ids.append((pid, d))
    return LabeledDataset(examples=examples, schema=schema,
                          site_name=header["site_name"], example_ids=ids)
