"""Feature engineering, vocabularies, scaling, splits, and prefix-suffix pairs.

Every event gets four engineered clock features (case elapsed, event
elapsed, day of week, time of day). Categorical attributes are indexed with
reserved missing/unknown classes appended after the seen labels, and the
activity vocabulary carries an extra end-of-sequence class. Continuous
attributes are standard-scaled, optionally in ln(1+x) space when the run
assumes log-normal noise. Everything is fitted on the training split only.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .config import LOG_NORMAL, TIME_FEATURES, HyperparameterSetting
from .errors import ConfigError, DataError
from .eventlog import (CATEGORICAL, CONTINUOUS, EOS_LABEL, MISSING_LABEL,
                       UNKNOWN_LABEL, Case, EventLog, Schema)

ACTIVITY = "activity"

ENCODER_INPUT = "encoder-input"
DECODER_INPUT = "decoder-input"
DECODER_TARGET = "decoder-target"

LOG_CAP = 45.0  # ln-space ceiling before exponentiation; keeps decodes finite


def embedding_dim(n_seen: int) -> int:
    """Width heuristic from the seen-class count (missing/unknown included)."""
    return min(600, int(math.floor(1.6 * (n_seen + 2) ** 0.56 + 0.5)))


@dataclass(frozen=True)
class Vocab:
    """Label index for one categorical attribute.

    Seen labels take 0..K-1, missing takes K, unknown K+1; the activity
    vocabulary appends an end-of-sequence class at K+2.
    """

    labels: tuple[str, ...]
    with_eos: bool

    @property
    def n_seen(self) -> int:
        return len(self.labels)

    @property
    def nan_index(self) -> int:
        return len(self.labels)

    @property
    def unk_index(self) -> int:
        return len(self.labels) + 1

    @property
    def eos_index(self) -> int:
        if not self.with_eos:
            raise ValueError("vocabulary has no end-of-sequence class")
        return len(self.labels) + 2

    @property
    def size(self) -> int:
        return len(self.labels) + (3 if self.with_eos else 2)

    @property
    def embed_dim(self) -> int:
        return embedding_dim(self.n_seen)

    @cached_property
    def _index(self) -> dict[str, int]:
        return {label: i for i, label in enumerate(self.labels)}

    def encode(self, label: str) -> int:
        if label == MISSING_LABEL:
            return self.nan_index
        if self.with_eos and label == EOS_LABEL:
            return self.eos_index
        return self._index.get(label, self.unk_index)

    def decode(self, index: int) -> str:
        if index < len(self.labels):
            return self.labels[index]
        if index == self.nan_index:
            return MISSING_LABEL
        if index == self.unk_index:
            return UNKNOWN_LABEL
        if self.with_eos and index == self.eos_index:
            return EOS_LABEL
        raise IndexError(f"index {index} outside vocabulary of size {self.size}")


@dataclass(frozen=True)
class Scaler:
    """Standard scaler, optionally fitted/applied in ln(1+x) space."""

    mean: float
    std: float
    transform: str  # "standard" | "log-standard"

    @classmethod
    def fit(cls, values: Sequence[float], transform: str) -> "Scaler":
        xs = np.asarray(values, dtype=np.float64)
        if xs.size == 0:
            raise DataError("no observed values to fit a scaler")
        if transform == "log-standard":
            xs = np.log1p(np.maximum(xs, 0.0))
        mean = float(xs.mean())
        std = float(xs.std())
        if std <= 0.0:
            std = 1.0  # constant training column
        return cls(mean=mean, std=std, transform=transform)

    def encode(self, x: float | None) -> float:
        if x is None:
            return 0.0  # missing continuous values enter the model as 0
        if self.transform == "log-standard":
            x = math.log1p(max(float(x), 0.0))
        return (float(x) - self.mean) / self.std

    def decode(self, v: float) -> float:
        raw = float(v) * self.std + self.mean
        if self.transform == "log-standard":
            return max(math.expm1(min(raw, LOG_CAP)), 0.0)
        return raw


@dataclass(frozen=True)
class Routing:
    """Which attributes feed the encoder input, decoder input, and heads."""

    encoder_cat: tuple[str, ...]
    encoder_cont: tuple[str, ...]
    decoder_cat: tuple[str, ...]
    decoder_cont: tuple[str, ...]
    target_cat: tuple[str, ...]
    target_cont: tuple[str, ...]


def build_routing(schema: Schema, setting: HyperparameterSetting) -> Routing:
    extra_cat = tuple(n for n, k in schema if k == CATEGORICAL)
    extra_cont = tuple(n for n, k in schema if k == CONTINUOUS)
    enc_cat = (ACTIVITY,) + extra_cat
    enc_cont = TIME_FEATURES + extra_cont
    if setting.decoder_features == "all":
        dec_cat, dec_cont = enc_cat, enc_cont
    elif setting.decoder_features == "activity_time":
        dec_cat, dec_cont = (ACTIVITY,), TIME_FEATURES
    else:
        raise ConfigError(f"unknown decoder_features {setting.decoder_features!r}")
    return Routing(encoder_cat=enc_cat, encoder_cont=enc_cont,
                   decoder_cat=dec_cat, decoder_cont=dec_cont,
                   target_cat=dec_cat, target_cont=dec_cont)


@dataclass
class FeaturedEvent:
    activity: str
    cats: dict[str, str]
    conts: dict[str, float | None]  # engineered clock features + schema attrs

    def cat_label(self, name: str) -> str:
        if name == ACTIVITY:
            return self.activity
        return self.cats.get(name, MISSING_LABEL)


def engineer_time_features(case: Case) -> list[FeaturedEvent]:
    """Clock features per event; elapsed times are in seconds."""
    out: list[FeaturedEvent] = []
    first_ms = case.events[0].timestamp_ms
    prev_ms = first_ms
    for ev in case.events:
        dt = ev.utc()
        conts: dict[str, float | None] = {
            "case_elapsed": (ev.timestamp_ms - first_ms) / 1000.0,
            "event_elapsed": (ev.timestamp_ms - prev_ms) / 1000.0,
            "day_of_week": float(dt.weekday()),  # Monday = 0
            "time_of_day": float(dt.hour * 3600 + dt.minute * 60 + dt.second
                                 + dt.microsecond / 1e6),
        }
        conts.update(dict(ev.conts))
        out.append(FeaturedEvent(activity=ev.activity, cats=dict(ev.cats), conts=conts))
        prev_ms = ev.timestamp_ms
    return out


@dataclass(frozen=True)
class Split:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]
    seed: int


def split_cases(log: EventLog, ratios: tuple[float, float, float] = (0.65, 0.15, 0.20),
                seed: int = 0) -> Split:
    """Case-level split with floor rounding; the remainder goes to train."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    ids = sorted(log.cases)
    if len(ids) < 3:
        raise DataError(f"need at least 3 cases to split, got {len(ids)}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    n_val = int(n * ratios[1])
    n_test = int(n * ratios[2])
    n_train = n - n_val - n_test
    return Split(train=tuple(shuffled[:n_train]),
                 validation=tuple(shuffled[n_train:n_train + n_val]),
                 test=tuple(shuffled[n_train + n_val:]),
                 seed=seed)


@dataclass
class EncodingModel:
    """The train-time/inference-time contract for turning events into tensors."""

    vocabs: dict[str, Vocab]
    scalers: dict[str, Scaler]
    pad_length: int
    routing: Routing
    setting_id: int

    @property
    def activity_vocab(self) -> Vocab:
        return self.vocabs[ACTIVITY]

    def content_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(encoding_to_json(self), sort_keys=True).encode()).hexdigest()


def pad_length_for(lengths: Sequence[int], drop_fraction: float = 0.015) -> int:
    """Max training case length after excluding the longest ``drop_fraction``."""
    if not lengths:
        raise DataError("no training cases")
    ordered = sorted(lengths)
    drop = int(math.floor(len(ordered) * drop_fraction))
    kept = ordered[: len(ordered) - drop] if drop else ordered
    return kept[-1]


def fit_encoding(train_cases: Iterable[Case], schema: Schema,
                 setting: HyperparameterSetting) -> EncodingModel:
    """Fit vocabularies, scalers and padding on the training split only."""
    cases = list(train_cases)
    if not cases:
        raise DataError("cannot fit an encoding on an empty training set")
    featured = {c.case_id: engineer_time_features(c) for c in cases}

    cat_names = [ACTIVITY] + [n for n, k in schema if k == CATEGORICAL]
    cont_names = list(TIME_FEATURES) + [n for n, k in schema if k == CONTINUOUS]

    vocabs: dict[str, Vocab] = {}
    for name in cat_names:
        seen: set[str] = set()
        for evs in featured.values():
            for fe in evs:
                label = fe.cat_label(name)
                if label != MISSING_LABEL:
                    seen.add(label)
        if not seen:
            raise DataError(f"categorical attribute {name!r} has no observed values")
        vocabs[name] = Vocab(labels=tuple(sorted(seen)), with_eos=(name == ACTIVITY))

    log_time = setting.distribution == LOG_NORMAL
    scalers: dict[str, Scaler] = {}
    for name in cont_names:
        values = [fe.conts[name] for evs in featured.values() for fe in evs
                  if fe.conts.get(name) is not None]
        if not values:
            raise DataError(f"continuous attribute {name!r} has no observed values")
        transform = "log-standard" if (log_time and name in TIME_FEATURES) else "standard"
        scalers[name] = Scaler.fit(values, transform)

    return EncodingModel(
        vocabs=vocabs,
        scalers=scalers,
        pad_length=pad_length_for([len(c) for c in cases]),
        routing=build_routing(schema, setting),
        setting_id=setting.id,
    )


def encode_event(fe: FeaturedEvent, enc: EncodingModel,
                 role: str) -> tuple[np.ndarray, np.ndarray]:
    """Index bundle + scaled continuous vector under the role's routing."""
    if role == ENCODER_INPUT:
        cat_names, cont_names = enc.routing.encoder_cat, enc.routing.encoder_cont
    elif role == DECODER_INPUT:
        cat_names, cont_names = enc.routing.decoder_cat, enc.routing.decoder_cont
    elif role == DECODER_TARGET:
        cat_names, cont_names = enc.routing.target_cat, enc.routing.target_cont
    else:
        raise ConfigError(f"unknown encoding role {role!r}")
    cat = np.array([enc.vocabs[n].encode(fe.cat_label(n)) for n in cat_names],
                   dtype=np.int32)
    cont = np.array([enc.scalers[n].encode(fe.conts.get(n)) for n in cont_names],
                    dtype=np.float32)
    return cat, cont


def decode_continuous(v: float, enc: EncodingModel, attribute: str) -> float:
    return enc.scalers[attribute].decode(v)


@dataclass
class PrefixSuffixPair:
    """One training/evaluation example: an encoded prefix plus its targets.

    The prefix is left-padded to ``pad_length`` with zero vectors and a
    validity mask; the target window holds the next ``S`` events, padded
    with end-of-sequence rows once the case runs out. ``eos_mask`` is 1 on
    real-event positions and 0 from the first padded position onward.
    """

    case_id: str
    k: int
    prefix_cat: np.ndarray
    prefix_cont: np.ndarray
    prefix_mask: np.ndarray
    dec0_cat: np.ndarray
    dec0_cont: np.ndarray
    target_cat: np.ndarray
    target_cont: np.ndarray
    eos_mask: np.ndarray
    true_suffix_activities: tuple[str, ...]
    true_suffix_event_elapsed: np.ndarray
    true_remaining_s: float
    prefix_end_elapsed_s: float

    @property
    def true_length(self) -> int:
        return len(self.true_suffix_activities)


def make_pairs(case: Case, enc: EncodingModel, window: int) -> list[PrefixSuffixPair]:
    """One pair per prefix length k in [1, M-1]."""
    m = len(case.events)
    if m < 2:
        raise DataError(f"case {case.case_id} has fewer than 2 events")
    featured = engineer_time_features(case)
    enc_rows = [encode_event(fe, enc, ENCODER_INPUT) for fe in featured]
    dec_rows = [encode_event(fe, enc, DECODER_INPUT) for fe in featured]

    p = enc.pad_length
    n_enc_cat = len(enc.routing.encoder_cat)
    n_enc_cont = len(enc.routing.encoder_cont)
    n_tgt_cat = len(enc.routing.target_cat)
    n_tgt_cont = len(enc.routing.target_cont)
    eos_cat = np.array([enc.vocabs[n].eos_index if n == ACTIVITY else enc.vocabs[n].nan_index
                        for n in enc.routing.target_cat], dtype=np.int32)

    pairs = []
    for k in range(1, m):
        lo = max(0, k - p)  # cases longer than pad keep the most recent events
        rows = enc_rows[lo:k]
        prefix_cat = np.zeros((p, n_enc_cat), dtype=np.int32)
        prefix_cont = np.zeros((p, n_enc_cont), dtype=np.float32)
        prefix_mask = np.zeros(p, dtype=np.float32)
        for j, (cat, cont) in enumerate(rows):
            pos = p - len(rows) + j
            prefix_cat[pos] = cat
            prefix_cont[pos] = cont
            prefix_mask[pos] = 1.0

        target_cat = np.empty((window, n_tgt_cat), dtype=np.int32)
        target_cont = np.zeros((window, n_tgt_cont), dtype=np.float32)
        eos_mask = np.zeros(window, dtype=np.float32)
        for s in range(window):
            src = k + s  # 0-based index of event k+1+s
            if src < m:
                target_cat[s], target_cont[s] = dec_rows[src]
                eos_mask[s] = 1.0
            else:
                target_cat[s] = eos_cat
        suffix = featured[k:]
        elapsed = np.array([fe.conts["event_elapsed"] for fe in suffix], dtype=np.float64)
        pairs.append(PrefixSuffixPair(
            case_id=case.case_id,
            k=k,
            prefix_cat=prefix_cat,
            prefix_cont=prefix_cont,
            prefix_mask=prefix_mask,
            dec0_cat=dec_rows[k - 1][0],
            dec0_cont=dec_rows[k - 1][1],
            target_cat=target_cat,
            target_cont=target_cont,
            eos_mask=eos_mask,
            true_suffix_activities=tuple(fe.activity for fe in suffix),
            true_suffix_event_elapsed=elapsed,
            true_remaining_s=float(elapsed.sum()),
            prefix_end_elapsed_s=float(featured[k - 1].conts["case_elapsed"]),
        ))
    return pairs


@dataclass
class PairBatch:
    """Stacked arrays for a list of pairs (leading axis = batch)."""

    prefix_cat: np.ndarray
    prefix_cont: np.ndarray
    prefix_mask: np.ndarray
    dec0_cat: np.ndarray
    dec0_cont: np.ndarray
    target_cat: np.ndarray
    target_cont: np.ndarray
    eos_mask: np.ndarray

    @classmethod
    def from_pairs(cls, pairs: Sequence[PrefixSuffixPair]) -> "PairBatch":
        return cls(
            prefix_cat=np.stack([p.prefix_cat for p in pairs]),
            prefix_cont=np.stack([p.prefix_cont for p in pairs]),
            prefix_mask=np.stack([p.prefix_mask for p in pairs]),
            dec0_cat=np.stack([p.dec0_cat for p in pairs]),
            dec0_cont=np.stack([p.dec0_cont for p in pairs]),
            target_cat=np.stack([p.target_cat for p in pairs]),
            target_cont=np.stack([p.target_cont for p in pairs]),
            eos_mask=np.stack([p.eos_mask for p in pairs]),
        )

    def __len__(self) -> int:
        return self.prefix_cat.shape[0]


# ---------------------------------------------------------------------------
# serialization


def encoding_to_json(enc: EncodingModel) -> dict:
    return {
        "format": 1,
        "setting_id": enc.setting_id,
        "pad_length": enc.pad_length,
        "vocabs": {n: {"labels": list(v.labels), "with_eos": v.with_eos}
                   for n, v in enc.vocabs.items()},
        "scalers": {n: {"mean": s.mean, "std": s.std, "transform": s.transform}
                    for n, s in enc.scalers.items()},
        "routing": {
            "encoder_cat": list(enc.routing.encoder_cat),
            "encoder_cont": list(enc.routing.encoder_cont),
            "decoder_cat": list(enc.routing.decoder_cat),
            "decoder_cont": list(enc.routing.decoder_cont),
            "target_cat": list(enc.routing.target_cat),
            "target_cont": list(enc.routing.target_cont),
        },
    }


def encoding_from_json(doc: dict) -> EncodingModel:
    routing = Routing(**{k: tuple(v) for k, v in doc["routing"].items()})
    return EncodingModel(
        vocabs={n: Vocab(labels=tuple(v["labels"]), with_eos=v["with_eos"])
                for n, v in doc["vocabs"].items()},
        scalers={n: Scaler(mean=s["mean"], std=s["std"], transform=s["transform"])
                 for n, s in doc["scalers"].items()},
        pad_length=int(doc["pad_length"]),
        routing=routing,
        setting_id=int(doc["setting_id"]),
    )
