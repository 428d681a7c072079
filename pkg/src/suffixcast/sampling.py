"""Monte-Carlo suffix sampling and most-likely suffix decoding.

Each MC trial re-encodes the prefix under fresh variational encoder masks,
then rolls the decoder forward autoregressively: continuous attributes are
drawn from Normal(mean, exp(log-variance)), categorical attributes from
Categorical(Softmax(z)) with z itself drawn from Normal(logits,
exp(log-variance)) elementwise. Decoder dropout defaults to naive
(resampled every step); a toggle switches it to variational for ablation.

Trials are vectorized into one batch but every trial consumes only its own
pre-drawn noise stream (stream id = trial index), so results do not depend
on scheduling or on how many trials run together, and a T=2N run equals two
offset T=N runs concatenated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as md
from .config import TIME_FEATURES
from .errors import ConfigError
from .features import ACTIVITY, EncodingModel, PrefixSuffixPair
from .losses import LOGVAR_MAX, LOGVAR_MIN
from .model import ModelParams

_STREAM_SAMPLE = 200

VARIATIONAL = "variational"
NAIVE = "naive"


def clamp_sigma(lv: np.ndarray) -> np.ndarray:
    """Noise scale from a log-variance head output.

    The clamp floor is treated as "noise off": exactly zero sigma, so a head
    pinned at the floor degenerates to deterministic decoding.
    """
    lvc = np.clip(lv, LOGVAR_MIN, LOGVAR_MAX)
    sigma = np.exp(0.5 * lvc)
    return np.where(lvc <= LOGVAR_MIN, 0.0, sigma).astype(lv.dtype)


def sample_categorical(logits: np.ndarray, sigma: np.ndarray, eps: np.ndarray,
                       u: np.ndarray) -> np.ndarray:
    """Draw classes from Categorical(Softmax(logits + sigma*eps)) per row.

    ``u`` is one uniform per row, mapped through the inverse CDF, so equal
    inputs and draws give equal classes regardless of batch shape.
    """
    z = logits + sigma * eps
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    cdf = np.cumsum(p, axis=1)
    idx = (u[:, None] > cdf).sum(axis=1)
    return np.minimum(idx, logits.shape[1] - 1).astype(np.int32)


@dataclass
class SampleSet:
    """T sampled suffixes for one prefix, as flat per-trial arrays.

    Activity sequences exclude the end-of-sequence terminator; lengths and
    remaining-time aggregates do too (the terminator's attribute values are
    modeling artifacts). ``rt_last`` is the last real event's decoded
    case-elapsed value minus the prefix-end elapsed time, floored at 0.
    """

    prefix_id: str
    act_seqs: list[np.ndarray]
    lengths: np.ndarray
    rt_sum: np.ndarray
    rt_last: np.ndarray
    stop_reasons: list[str]
    prefix_end_elapsed_s: float
    events: list[list[dict]] | None = None  # per trial, only when requested

    @property
    def n_trials(self) -> int:
        return len(self.act_seqs)


@dataclass
class ProbabilisticSummary:
    mean_length: float
    mean_rt_sum: float
    mean_rt_last: float
    lengths: np.ndarray
    rt_sum: np.ndarray
    rt_last: np.ndarray


def aggregate(sample_set: SampleSet) -> ProbabilisticSummary:
    if sample_set.n_trials == 0:
        raise ConfigError("cannot aggregate an empty sample set")
    return ProbabilisticSummary(
        mean_length=float(sample_set.lengths.mean()),
        mean_rt_sum=float(sample_set.rt_sum.mean()),
        mean_rt_last=float(sample_set.rt_last.mean()),
        lengths=sample_set.lengths,
        rt_sum=sample_set.rt_sum,
        rt_last=sample_set.rt_last,
    )


def _mask_dims(params: ModelParams):
    return md.layer_in_dims(params, "enc"), md.layer_in_dims(params, "dec")


def _stack_masksets(sets: list[md.MaskSet]) -> md.MaskSet:
    """Per-trial (1, d) mask sets -> one (T, d) mask set."""
    inputs = [np.concatenate([s.inputs[i] for s in sets], axis=0)
              for i in range(len(sets[0].inputs))]
    recs = [np.concatenate([s.recs[i] for s in sets], axis=0)
            for i in range(len(sets[0].recs))]
    head = None
    if sets[0].head is not None:
        head = np.concatenate([s.head for s in sets], axis=0)
    return md.MaskSet(inputs, recs, head)


def mc_suffix_sampling(params: ModelParams, enc: EncodingModel,
                       pair: PrefixSuffixPair, t_trials: int, m_max: int,
                       p: float, seed: int, stream_key: tuple[int, ...] = (),
                       trial_offset: int = 0,
                       decoder_dropout_mode: str = NAIVE,
                       keep_events: bool = False) -> SampleSet:
    """Approximate the suffix distribution with ``t_trials`` MC samples."""
    if t_trials < 1 or m_max < 1:
        raise ConfigError("t_trials and m_max must be >= 1")
    if decoder_dropout_mode not in (NAIVE, VARIATIONAL):
        raise ConfigError(f"unknown decoder_dropout_mode {decoder_dropout_mode!r}")
    enc_dims, dec_dims = _mask_dims(params)
    hidden = params.hidden
    routing = enc.routing
    n_cont = len(routing.decoder_cont)
    cat_sizes = [enc.vocabs[a].size for a in routing.decoder_cat]
    act_pos = routing.decoder_cat.index(ACTIVITY)
    eos_index = enc.vocabs[ACTIVITY].eos_index
    ce_pos = routing.decoder_cont.index("case_elapsed")
    ee_pos = routing.decoder_cont.index("event_elapsed")
    time_pos = [i for i, a in enumerate(routing.decoder_cont) if a in TIME_FEATURES]

    # pre-draw every trial's noise from its own stream, in a fixed order
    enc_sets, dec_step_sets, cont_eps, cat_eps, cat_u = [], [], [], [], []
    from .training import rng_for  # stream derivation shared with the trainer

    n_dec_sets = m_max if decoder_dropout_mode == NAIVE else 1
    for t in range(t_trials):
        rng = rng_for(seed, _STREAM_SAMPLE, *stream_key, trial_offset + t)
        enc_sets.append(md.sample_masks(rng, p, 1, enc_dims, hidden))
        dec_step_sets.append([md.sample_masks(rng, p, 1, dec_dims, hidden,
                                              with_head=True)
                              for _ in range(n_dec_sets)])
        cont_eps.append(rng.standard_normal((m_max, n_cont)).astype(np.float32))
        cat_eps.append([rng.standard_normal((m_max, c)).astype(np.float32)
                        for c in cat_sizes])
        cat_u.append(rng.random(size=(m_max, len(cat_sizes))))
    enc_masks = _stack_masksets(enc_sets)
    dec_masks = [_stack_masksets([dec_step_sets[t][s] for t in range(t_trials)])
                 for s in range(n_dec_sets)]
    cont_eps = np.stack(cont_eps)                      # (T, M, n_cont)
    cat_eps = [np.stack([cat_eps[t][j] for t in range(t_trials)])
               for j in range(len(cat_sizes))]         # per attr (T, M, C)
    cat_u = np.stack(cat_u)                            # (T, M, n_cat)

    prefix_cat = np.repeat(pair.prefix_cat[None], t_trials, axis=0)
    prefix_cont = np.repeat(pair.prefix_cont[None], t_trials, axis=0)
    prefix_mask = np.repeat(pair.prefix_mask[None], t_trials, axis=0)
    state = md.encode_np(params, enc, prefix_cat, prefix_cont, prefix_mask, enc_masks)

    x_cat = np.repeat(pair.dec0_cat[None], t_trials, axis=0).astype(np.int32)
    x_cont = np.repeat(pair.dec0_cont[None], t_trials, axis=0).astype(np.float32)

    active = np.ones(t_trials, dtype=bool)
    stop_reasons = ["max_len"] * t_trials
    act_seqs: list[list[int]] = [[] for _ in range(t_trials)]
    rt_sum = np.zeros(t_trials, dtype=np.float64)
    rt_last = np.zeros(t_trials, dtype=np.float64)
    running_elapsed = np.full(t_trials, pair.prefix_end_elapsed_s, dtype=np.float64)
    events: list[list[dict]] | None = [[] for _ in range(t_trials)] if keep_events else None

    ce_scaler = enc.scalers["case_elapsed"]
    scalers = [enc.scalers[a] for a in routing.decoder_cont]

    for s in range(m_max):
        masks = dec_masks[s if decoder_dropout_mode == NAIVE else 0]
        head, state = md.decoder_step_np(params, enc, x_cat, x_cont, state, masks)

        cont_scaled = np.empty((t_trials, n_cont), dtype=np.float32)
        cont_decoded = np.empty((t_trials, n_cont), dtype=np.float64)
        for d, attr in enumerate(routing.decoder_cont):
            mu, lv = head.cont[attr]
            sigma = clamp_sigma(lv[:, 0])
            val = mu[:, 0] + sigma * cont_eps[:, s, d]
            cont_scaled[:, d] = val
            decoded = _decode_array(scalers[d], val)
            if d in time_pos:
                decoded = np.maximum(decoded, 0.0)
            cont_decoded[:, d] = decoded

        cat_idx = np.empty((t_trials, len(cat_sizes)), dtype=np.int32)
        for j, attr in enumerate(routing.decoder_cat):
            logits, lv = head.cat[attr]
            sigma = clamp_sigma(lv)
            cat_idx[:, j] = sample_categorical(logits, sigma, cat_eps[j][:, s, :],
                                               cat_u[:, s, j])

        is_eos = cat_idx[:, act_pos] == eos_index
        newly_stopped = active & is_eos
        still = active & ~is_eos

        # record the sampled event for active trials (EOS terminators are
        # recorded as stop reasons, not as suffix events)
        for t in np.flatnonzero(still):
            act_seqs[t].append(int(cat_idx[t, act_pos]))
        rt_sum[still] += cont_decoded[still, ee_pos]
        rt_last[still] = cont_decoded[still, ce_pos]
        if events is not None:
            for t in np.flatnonzero(active):  # EOS terminators kept in the dump
                events[t].append({
                    "step": s,
                    "activity": int(cat_idx[t, act_pos]),
                    "event_elapsed_s": float(cont_decoded[t, ee_pos]),
                    "case_elapsed_s": float(cont_decoded[t, ce_pos]),
                })
        for t in np.flatnonzero(newly_stopped):
            stop_reasons[t] = "eos"
        active = still

        if not active.any():
            break

        # feed the sampled event back; the case-elapsed input is recomputed
        # as a running sum so the two time features stay consistent
        running_elapsed[still] += np.maximum(cont_decoded[still, ee_pos], 0.0)
        x_cat = cat_idx
        x_cont = cont_scaled.copy()
        x_cont[:, ce_pos] = _encode_array(ce_scaler, running_elapsed).astype(np.float32)

    prefix_id = f"{pair.case_id}:{pair.k}"
    rt_last = np.maximum(rt_last - pair.prefix_end_elapsed_s, 0.0)
    return SampleSet(
        prefix_id=prefix_id,
        act_seqs=[np.asarray(a, dtype=np.int32) for a in act_seqs],
        lengths=np.array([len(a) for a in act_seqs], dtype=np.int64),
        rt_sum=rt_sum,
        rt_last=rt_last,
        stop_reasons=stop_reasons,
        prefix_end_elapsed_s=pair.prefix_end_elapsed_s,
        events=events,
    )


def _decode_array(scaler, v: np.ndarray) -> np.ndarray:
    raw = v.astype(np.float64) * scaler.std + scaler.mean
    if scaler.transform == "log-standard":
        from .features import LOG_CAP

        return np.maximum(np.expm1(np.minimum(raw, LOG_CAP)), 0.0)
    return raw


def _encode_array(scaler, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if scaler.transform == "log-standard":
        x = np.log1p(np.maximum(x, 0.0))
    return (x - scaler.mean) / scaler.std


@dataclass
class DecodedSuffix:
    """A single decoded suffix (used for the most-likely decode)."""

    act_seq: np.ndarray
    length: int
    rt_sum: float
    rt_last: float
    stop_reason: str


def most_likely_suffix(params: ModelParams, enc: EncodingModel,
                       pair: PrefixSuffixPair, m_max: int) -> DecodedSuffix:
    """Greedy decode: dropout off, means for continuous values, argmax labels."""
    routing = enc.routing
    act_pos = routing.decoder_cat.index(ACTIVITY)
    eos_index = enc.vocabs[ACTIVITY].eos_index
    ce_pos = routing.decoder_cont.index("case_elapsed")
    ee_pos = routing.decoder_cont.index("event_elapsed")
    time_pos = [i for i, a in enumerate(routing.decoder_cont) if a in TIME_FEATURES]
    scalers = [enc.scalers[a] for a in routing.decoder_cont]
    ce_scaler = enc.scalers["case_elapsed"]

    enc_dims, dec_dims = _mask_dims(params)
    enc_masks = md.sample_masks(None, 0.0, 1, enc_dims, params.hidden)
    dec_masks = md.sample_masks(None, 0.0, 1, dec_dims, params.hidden, with_head=True)
    state = md.encode_np(params, enc, pair.prefix_cat[None], pair.prefix_cont[None],
                         pair.prefix_mask[None], enc_masks)
    x_cat = pair.dec0_cat[None].astype(np.int32)
    x_cont = pair.dec0_cont[None].astype(np.float32)

    acts: list[int] = []
    rt_sum = 0.0
    rt_last = 0.0
    running = pair.prefix_end_elapsed_s
    stop = "max_len"
    for s in range(m_max):
        head, state = md.decoder_step_np(params, enc, x_cat, x_cont, state, dec_masks)
        cat_idx = np.array([[int(np.argmax(head.cat[a][0][0]))
                             for a in routing.decoder_cat]], dtype=np.int32)
        if cat_idx[0, act_pos] == eos_index:
            stop = "eos"
            break
        cont_scaled = np.array([[head.cont[a][0][0, 0] for a in routing.decoder_cont]],
                               dtype=np.float32)
        decoded = np.empty(len(scalers), dtype=np.float64)
        for d in range(len(scalers)):
            val = _decode_array(scalers[d], cont_scaled[0, d:d + 1])[0]
            decoded[d] = max(val, 0.0) if d in time_pos else val
        acts.append(int(cat_idx[0, act_pos]))
        rt_sum += decoded[ee_pos]
        rt_last = decoded[ce_pos]
        running += max(decoded[ee_pos], 0.0)
        x_cat = cat_idx
        x_cont = cont_scaled.copy()
        x_cont[0, ce_pos] = np.float32(_encode_array(ce_scaler, np.array([running]))[0])

    return DecodedSuffix(
        act_seq=np.asarray(acts, dtype=np.int32),
        length=len(acts),
        rt_sum=rt_sum,
        rt_last=max(rt_last - pair.prefix_end_elapsed_s, 0.0) if acts else 0.0,
        stop_reason=stop,
    )
