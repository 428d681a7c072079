"""Optimizers, teacher-forcing schedule, and the training loop.

Every stochastic draw (shuffling, dropout masks, teacher-forcing coins,
loss-side noise) comes from a stream keyed on (seed, purpose, epoch, batch),
never from sequential global state. That makes runs reproducible
bit-for-bit and lets a resumed run replay the remaining epochs exactly as
the uninterrupted run would have.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as lo
from . import model as md
from .config import HyperparameterSetting
from .errors import DataError, NumericError
from .features import EncodingModel, PairBatch, PrefixSuffixPair
from .losses import TaskWeights

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def rng_for(seed: int, *key: int) -> np.random.Generator:
    """Deterministic stream addressed by integer coordinates."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


# purpose codes for rng_for streams
_SHUFFLE, _MASKS, _TFCOIN, _EPS, _VAL = 100, 101, 102, 103, 104


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str                       # "adam" | "adamw"
    lr: float
    weight_decay: float = 0.0      # applied decoupled, adamw only
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, kind: str, named: dict[str, ad.Tensor], lr: float,
             weight_decay: float = 0.0) -> "OptimizerState":
        state = cls(kind=kind, lr=lr, weight_decay=weight_decay)
        for name, t in named.items():
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        return state


def optimizer_step(state: OptimizerState, named: dict[str, ad.Tensor],
                   grads: dict[str, np.ndarray]) -> None:
    """Bias-corrected Adam update; adamw first shrinks params by (1 - lr*wd)."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for name, tensor in named.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        if state.kind == "adamw" and state.weight_decay > 0.0:
            tensor.data *= np.float32(1.0 - state.lr * state.weight_decay)
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        tensor.data = (tensor.data - state.lr * update).astype(tensor.data.dtype)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Global-norm clipping in place; returns the pre-clip norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * np.float32(factor)
    return norm


def teacher_forcing_prob(epoch: int, epochs: int, start: float = 0.8,
                         decay_start: float = 0.2) -> float:
    """Constant until floor(decay_start*epochs), then linear to 0 at the end."""
    if epochs <= 1:
        return start
    d0 = int(math.floor(decay_start * epochs))
    if epoch <= d0 or epochs - 1 <= d0:
        return start
    return start * (epochs - 1 - epoch) / (epochs - 1 - d0)


# ---------------------------------------------------------------------------
# single training step


@dataclass
class TrainConfig:
    setting: HyperparameterSetting
    epochs: int
    batch_size: int = 128
    learning_rate: float = 1e-4
    seq_window: int = 5
    tf_start: float = 0.8
    tf_decay_start: float = 0.2
    t_mc: int = 10
    gradnorm_alpha: float = 1.5
    gradnorm_lr: float = 0.025
    clip_norm: float = 5.0
    checkpoint_every: int = 25
    seed: int = 0
    hidden: int | None = None

    def task_names(self, enc: EncodingModel) -> list[str]:
        return ([f"con:{a}" for a in enc.routing.target_cont]
                + [f"cat:{a}" for a in enc.routing.target_cat])


def _check_routing(enc: EncodingModel) -> None:
    r = enc.routing
    if r.decoder_cat != r.target_cat or r.decoder_cont != r.target_cont:
        raise DataError("decoder input and target routings must match for "
                        "prediction feedback")


def _predicted_inputs(head: md.HeadOutputs, enc: EncodingModel) -> tuple[np.ndarray, np.ndarray]:
    """Detached argmax classes and mean continuous values as next inputs."""
    cats = [np.argmax(head.cat[a][0].data, axis=1).astype(np.int32)
            for a in enc.routing.decoder_cat]
    conts = [head.cont[a][0].data[:, 0] for a in enc.routing.decoder_cont]
    return np.stack(cats, axis=1), np.stack(conts, axis=1).astype(np.float32)


def rollout(params: md.ModelParams, enc: EncodingModel, batch: PairBatch,
            s_window: int, p: float, tf_prob: float,
            mask_rng: np.random.Generator | None,
            tf_rng: np.random.Generator | None):
    """Encoder pass + S decoder steps with probabilistic teacher forcing.

    Returns per-attribute stacked head outputs. Training uses variational
    masks on both sides: one mask set per call, reused across steps.
    """
    n = len(batch)
    enc_masks = md.sample_masks(mask_rng, p, n, md.layer_in_dims(params, "enc"),
                                params.hidden)
    dec_masks = md.sample_masks(mask_rng, p, n, md.layer_in_dims(params, "dec"),
                                params.hidden, with_head=True)
    state = md.encode(params, enc, batch.prefix_cat, batch.prefix_cont,
                      batch.prefix_mask, enc_masks)
    x_cat, x_cont = batch.dec0_cat, batch.dec0_cont
    cont_steps: dict[str, list] = {a: [] for a in enc.routing.target_cont}
    cont_lv_steps: dict[str, list] = {a: [] for a in enc.routing.target_cont}
    cat_steps: dict[str, list] = {a: [] for a in enc.routing.target_cat}
    cat_lv_steps: dict[str, list] = {a: [] for a in enc.routing.target_cat}
    for s in range(s_window):
        head, state = md.decoder_step(params, enc, x_cat, x_cont, state, dec_masks)
        for a in enc.routing.target_cont:
            mu, lv = head.cont[a]
            cont_steps[a].append(mu)
            cont_lv_steps[a].append(lv)
        for a in enc.routing.target_cat:
            logits, lv = head.cat[a]
            cat_steps[a].append(logits)
            cat_lv_steps[a].append(lv)
        if s + 1 < s_window:
            if tf_prob >= 1.0 or tf_rng is None:
                forced = np.ones(n, dtype=bool)
            elif tf_prob <= 0.0:
                forced = np.zeros(n, dtype=bool)
            else:
                forced = tf_rng.random(n) < tf_prob
            pred_cat, pred_cont = _predicted_inputs(head, enc)
            tgt_cat = batch.target_cat[:, s, :]
            tgt_cont = batch.target_cont[:, s, :]
            x_cat = np.where(forced[:, None], tgt_cat, pred_cat)
            x_cont = np.where(forced[:, None], tgt_cont, pred_cont).astype(np.float32)
    return cont_steps, cont_lv_steps, cat_steps, cat_lv_steps


def batch_losses(params: md.ModelParams, enc: EncodingModel, batch: PairBatch,
                 cfg: TrainConfig, p: float, tf_prob: float,
                 mask_rng, tf_rng, eps_rng) -> dict[str, ad.Tensor]:
    """Per-task attenuated losses for one batch (graph tensors)."""
    s_window = batch.target_cat.shape[1]
    cont_steps, cont_lv, cat_steps, cat_lv = rollout(
        params, enc, batch, s_window, p, tf_prob, mask_rng, tf_rng)
    n = len(batch)
    task: dict[str, ad.Tensor] = {}
    for d, attr in enumerate(enc.routing.target_cont):
        mu = ad.concat(cont_steps[attr], axis=1)
        lv = ad.concat(cont_lv[attr], axis=1)
        task[f"con:{attr}"] = lo.continuous_loss(batch.target_cont[:, :, d], mu, lv,
                                                 batch.eos_mask)
    for j, attr in enumerate(enc.routing.target_cat):
        logits = ad.concat(cat_steps[attr], axis=0)      # (S*N, C), step-major
        lv = ad.concat(cat_lv[attr], axis=0)
        target = batch.target_cat[:, :, j].T.reshape(-1)
        c = enc.vocabs[attr].size
        eps = eps_rng.standard_normal((cfg.t_mc, s_window * n, c)).astype(np.float32)
        # the activity head must learn to emit EOS, so its padded positions
        # stay in the loss; other categorical heads mask them like the
        # continuous ones
        if attr == "activity":
            mask = np.ones(s_window * n, dtype=np.float32)
        else:
            mask = batch.eos_mask.T.reshape(-1)
        task[f"cat:{attr}"] = lo.categorical_loss(target, logits, lv, eps, mask)
    return task


@dataclass
class StepResult:
    breakdown: lo.LossBreakdown
    grad_norm: float
    task_grad_norms: dict[str, float]


def train_step(params: md.ModelParams, enc: EncodingModel, batch: PairBatch,
               cfg: TrainConfig, weights: TaskWeights, opt: OptimizerState,
               tf_prob: float, mask_rng, tf_rng, eps_rng) -> StepResult:
    """One forward/backward/update cycle, plus per-task norms for GradNorm."""
    task = batch_losses(params, enc, batch, cfg, cfg.setting.dropout, tf_prob,
                        mask_rng, tf_rng, eps_rng)
    include_l2 = opt.kind == "adam"  # adamw regularizes via decoupled decay
    total, breakdown = lo.total_loss(task, weights.weights,
                                     cfg.setting.weight_decay,
                                     params.encoder_side(), params.decoder_side(),
                                     include_l2=include_l2)
    if not math.isfinite(breakdown.total):
        raise NumericError(f"non-finite training loss: {breakdown.total}")

    named = params.named()
    grads_by_id = ad.backward(total, wrt=list(named.values()))
    grads = {name: grads_by_id[id(t)] for name, t in named.items()}
    norm = clip_gradients(grads, cfg.clip_norm)

    shared = params.shared_task_layer()
    task_norms: dict[str, float] = {}
    for name, loss_t in task.items():
        g = ad.backward(loss_t, wrt=shared)
        task_norms[name] = ad.grad_norm(g) * weights.weights[name]

    optimizer_step(opt, named, grads)
    return StepResult(breakdown=breakdown, grad_norm=norm, task_grad_norms=task_norms)


def evaluate_loss(params: md.ModelParams, enc: EncodingModel,
                  pairs: list[PrefixSuffixPair], cfg: TrainConfig, p: float,
                  weights: TaskWeights, rng_base: tuple[int, ...]) -> float:
    """Weighted validation loss under full forcing, in batches, no graph."""
    total = 0.0
    count = 0
    with ad.no_grad():
        for bi in range(0, len(pairs), cfg.batch_size):
            chunk = pairs[bi:bi + cfg.batch_size]
            batch = PairBatch.from_pairs(chunk)
            mask_rng = rng_for(cfg.seed, *rng_base, _MASKS, bi)
            eps_rng = rng_for(cfg.seed, *rng_base, _EPS, bi)
            task = batch_losses(params, enc, batch, cfg, p, 1.0, mask_rng, None,
                                eps_rng)
            weighted = sum(weights.weights[n] * float(t.data) for n, t in task.items())
            total += weighted * len(chunk)
            count += len(chunk)
    return total / max(count, 1)


# ---------------------------------------------------------------------------
# fit loop


@dataclass
class FitResult:
    params: md.ModelParams
    weights: TaskWeights
    history: list[dict]
    checkpoint_path: Path
    history_path: Path


def _history_columns(task_names: list[str]) -> list[str]:
    safe = [n.replace(":", "_") for n in task_names]
    return (["epoch", "train_total"]
            + [f"train_task_{n}" for n in safe]
            + ["val_total_det", "val_total_mc", "tf_prob"]
            + [f"w_task_{n}" for n in safe])


def _write_history(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def fit(train_pairs: list[PrefixSuffixPair], val_pairs: list[PrefixSuffixPair],
        enc: EncodingModel, cfg: TrainConfig, out_dir: str | Path,
        resume_from: str | Path | None = None) -> FitResult:
    """Train to completion (no early stopping), checkpointing as it goes.

    On a non-finite loss the run aborts with the last written checkpoint
    left in place. ``resume_from`` continues a run bit-identically from a
    training-state container.
    """
    if not train_pairs:
        raise DataError("no training pairs")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.uedl"
    state_path = out_dir / "train_state.uedl"
    history_path = out_dir / "history.csv"
    _check_routing(enc)

    task_names = cfg.task_names(enc)
    columns = _history_columns(task_names)
    start_epoch = 0
    history: list[dict] = []

    if resume_from is None:
        params = md.init_params(cfg.setting, enc, seed=cfg.seed, hidden=cfg.hidden)
        opt = OptimizerState.init(cfg.setting.optimizer, params.named(),
                                  cfg.learning_rate, cfg.setting.weight_decay)
        weights = TaskWeights.uniform(task_names, alpha=cfg.gradnorm_alpha,
                                      lr=cfg.gradnorm_lr)
    else:
        params, opt, weights, start_epoch, history = load_train_state(
            resume_from, enc, cfg)

    for epoch in range(start_epoch, cfg.epochs):
        order_rng = rng_for(cfg.seed, _SHUFFLE, epoch)
        order = order_rng.permutation(len(train_pairs))
        tf_prob = teacher_forcing_prob(epoch, cfg.epochs, cfg.tf_start,
                                       cfg.tf_decay_start)
        sums = {n: 0.0 for n in task_names}
        total_sum = 0.0
        seen = 0
        for bi, lo_idx in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[lo_idx:lo_idx + cfg.batch_size]
            batch = PairBatch.from_pairs([train_pairs[i] for i in idx])
            try:
                result = train_step(
                    params, enc, batch, cfg, weights, opt, tf_prob,
                    mask_rng=rng_for(cfg.seed, _MASKS, epoch, bi),
                    tf_rng=rng_for(cfg.seed, _TFCOIN, epoch, bi),
                    eps_rng=rng_for(cfg.seed, _EPS, epoch, bi))
            except NumericError:
                _write_history(history_path, columns, history)
                raise
            lo.gradnorm_step(weights, result.task_grad_norms, result.breakdown.tasks)
            n = len(batch)
            for name in task_names:
                sums[name] += result.breakdown.tasks[name] * n
            total_sum += result.breakdown.total * n
            seen += n

        row: dict = {"epoch": epoch, "train_total": total_sum / seen,
                     "tf_prob": tf_prob}
        for name in task_names:
            row[f"train_task_{name.replace(':', '_')}"] = sums[name] / seen
            row[f"w_task_{name.replace(':', '_')}"] = weights.weights[name]
        row["val_total_det"] = (evaluate_loss(params, enc, val_pairs, cfg, 0.0,
                                              weights, (_VAL, epoch, 0))
                                if val_pairs else float("nan"))
        row["val_total_mc"] = (evaluate_loss(params, enc, val_pairs, cfg,
                                             cfg.setting.dropout, weights,
                                             (_VAL, epoch, 1))
                               if val_pairs else float("nan"))
        history.append(row)
        _write_history(history_path, columns, history)

        last = epoch == cfg.epochs - 1
        if last or (cfg.checkpoint_every > 0 and (epoch + 1) % cfg.checkpoint_every == 0):
            md.save_checkpoint(ckpt_path, params, cfg.setting)
            save_train_state(state_path, params, opt, weights, epoch + 1, history,
                             cfg.setting)

    return FitResult(params=params, weights=weights, history=history,
                     checkpoint_path=ckpt_path, history_path=history_path)


# ---------------------------------------------------------------------------
# training-state container (optimizer moments + task weights + epoch)


def save_train_state(path, params: md.ModelParams, opt: OptimizerState,
                     weights: TaskWeights, next_epoch: int, history: list[dict],
                     setting: HyperparameterSetting) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, t in params.named().items():
        arrays[f"param/{name}"] = t.data
        arrays[f"adam_m/{name}"] = opt.m[name]
        arrays[f"adam_v/{name}"] = opt.v[name]
    meta = {
        "kind": "train_state",
        "setting_id": params.setting_id,
        "hidden": params.hidden,
        "layers": setting.layers,
        "seed": params.seed,
        "encoding_hash": params.encoding_hash,
        "optimizer": {"kind": opt.kind, "lr": opt.lr,
                      "weight_decay": opt.weight_decay, "step": opt.step},
        "weights": weights.as_dict(),
        "initial_losses": weights.initial_losses,
        "gradnorm": {"alpha": weights.alpha, "lr": weights.lr},
        "next_epoch": next_epoch,
        "history": history,
    }
    md.save_container(path, meta, arrays)


def load_train_state(path, enc: EncodingModel, cfg: TrainConfig):
    manifest, arrays = md.load_container(path)
    if manifest.get("kind") != "train_state":
        raise DataError(f"{path}: not a training-state container")
    if manifest["encoding_hash"] != enc.content_hash():
        raise DataError(f"{path}: encoding model changed since this run started")
    params = md.init_params(cfg.setting, enc, seed=int(manifest["seed"]),
                            hidden=int(manifest["hidden"]))
    opt = OptimizerState.init(manifest["optimizer"]["kind"], params.named(),
                              manifest["optimizer"]["lr"],
                              manifest["optimizer"]["weight_decay"])
    opt.step = int(manifest["optimizer"]["step"])
    for name, t in params.named().items():
        t.data = arrays[f"param/{name}"].copy()
        opt.m[name] = arrays[f"adam_m/{name}"].copy()
        opt.v[name] = arrays[f"adam_v/{name}"].copy()
    weights = TaskWeights(weights=dict(manifest["weights"]),
                          alpha=manifest["gradnorm"]["alpha"],
                          lr=manifest["gradnorm"]["lr"],
                          initial_losses=manifest["initial_losses"])
    return params, opt, weights, int(manifest["next_epoch"]), list(manifest["history"])
