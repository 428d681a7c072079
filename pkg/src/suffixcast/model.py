"""Stochastic encoder-decoder LSTM with mean/log-variance output heads.

The encoder compresses a padded prefix into per-layer (h, c) states; the
decoder starts from those states and the last prefix event and predicts one
event per step. Every output attribute gets two neurons per value: a mean
(or logit vector) and a log-variance. Dropout enters only as mask
multiplication, so the caller chooses variational (one mask per sequence)
or naive (fresh mask per step) behavior by how it supplies masks.

Two forward implementations share the same fused gate kernels: a graph
version used for training and a plain-numpy version used for sampling and
decoding. With identical masks they agree bit-for-bit (tested).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import kernels
from .config import HyperparameterSetting
from .errors import DataError
from .features import EncodingModel
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"UEDL1\x00"
CHECKPOINT_FORMAT = 1

GATE_ORDER = "ifgo"  # preactivation column blocks: input, forget, cell, output


@dataclass
class LayerParams:
    w: Tensor  # (in_dim, 4H)
    u: Tensor  # (H, 4H)
    b: Tensor  # (4H,)


@dataclass
class HeadLayout:
    """Column layout of the fully-connected output layer."""

    cont: dict[str, tuple[int, int]]            # attr -> (mean col, log-var col)
    cat: dict[str, tuple[int, int, int]]        # attr -> (logit lo, log-var lo, C)
    width: int


def build_head_layout(enc: EncodingModel) -> HeadLayout:
    cont: dict[str, tuple[int, int]] = {}
    cat: dict[str, tuple[int, int, int]] = {}
    col = 0
    for name in enc.routing.target_cont:
        cont[name] = (col, col + 1)
        col += 2
    for name in enc.routing.target_cat:
        c = enc.vocabs[name].size
        cat[name] = (col, col + c, c)
        col += 2 * c
    return HeadLayout(cont=cont, cat=cat, width=col)


class ModelParams:
    """All trainable tensors plus enough metadata to rebuild the model."""

    def __init__(self, embeddings: dict[str, Tensor], encoder: list[LayerParams],
                 decoder: list[LayerParams], head_w: Tensor, head_b: Tensor,
                 layout: HeadLayout, hidden: int, setting_id: int, seed: int,
                 encoding_hash: str):
        self.embeddings = embeddings
        self.encoder = encoder
        self.decoder = decoder
        self.head_w = head_w
        self.head_b = head_b
        self.layout = layout
        self.hidden = hidden
        self.setting_id = setting_id
        self.seed = seed
        self.encoding_hash = encoding_hash

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for attr in sorted(self.embeddings):
            out[f"emb.{attr}"] = self.embeddings[attr]
        for side, layers in (("enc", self.encoder), ("dec", self.decoder)):
            for i, lp in enumerate(layers):
                out[f"{side}.l{i}.w"] = lp.w
                out[f"{side}.l{i}.u"] = lp.u
                out[f"{side}.l{i}.b"] = lp.b
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def encoder_side(self) -> list[Tensor]:
        """Encoder-owned tensors for the L2 term (embeddings counted here)."""
        out = [self.embeddings[a] for a in sorted(self.embeddings)]
        for lp in self.encoder:
            out += [lp.w, lp.u, lp.b]
        return out

    def decoder_side(self) -> list[Tensor]:
        """Decoder-owned tensors for the L2 term (heads counted here)."""
        out = []
        for lp in self.decoder:
            out += [lp.w, lp.u, lp.b]
        out += [self.head_w, self.head_b]
        return out

    def shared_task_layer(self) -> list[Tensor]:
        """The last layer shared by all heads: the top decoder LSTM layer."""
        top = self.decoder[-1]
        return [top.w, top.u, top.b]


def init_params(setting: HyperparameterSetting, enc: EncodingModel, seed: int,
                hidden: int | None = None) -> ModelParams:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) weights, forget-gate bias 1, zero heads."""
    h = hidden if hidden is not None else setting.hidden
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(10,)))
    bound = 1.0 / np.sqrt(h)

    def uni(shape):
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    embeddings: dict[str, Tensor] = {}
    for attr in enc.routing.encoder_cat:
        v = enc.vocabs[attr]
        embeddings[attr] = ad.param(uni((v.size, v.embed_dim)), f"emb.{attr}")

    def make_layers(side: str, in_dim: int) -> list[LayerParams]:
        layers = []
        for i in range(setting.layers):
            d = in_dim if i == 0 else h
            b = np.zeros(4 * h, dtype=np.float32)
            b[h:2 * h] = 1.0  # forget-gate bias stabilizer
            layers.append(LayerParams(
                w=ad.param(uni((d, 4 * h)), f"{side}.l{i}.w"),
                u=ad.param(uni((h, 4 * h)), f"{side}.l{i}.u"),
                b=ad.param(b, f"{side}.l{i}.b"),
            ))
        return layers

    enc_in = sum(enc.vocabs[a].embed_dim for a in enc.routing.encoder_cat) \
        + len(enc.routing.encoder_cont)
    dec_in = sum(enc.vocabs[a].embed_dim for a in enc.routing.decoder_cat) \
        + len(enc.routing.decoder_cont)
    layout = build_head_layout(enc)
    return ModelParams(
        embeddings=embeddings,
        encoder=make_layers("enc", enc_in),
        decoder=make_layers("dec", dec_in),
        head_w=ad.param(uni((h, layout.width)), "head.w"),
        head_b=ad.param(np.zeros(layout.width, dtype=np.float32), "head.b"),
        layout=layout,
        hidden=h,
        setting_id=setting.id,
        seed=seed,
        encoding_hash=enc.content_hash(),
    )


# ---------------------------------------------------------------------------
# dropout masks


@dataclass
class MaskSet:
    """Masks for one forward pass: one input+recurrent pair per layer, plus a
    head-input mask on the decoder side. Entries are 0 or 1/(1-p)."""

    inputs: list[np.ndarray]
    recs: list[np.ndarray]
    head: np.ndarray | None = None


def sample_masks(rng: np.random.Generator | None, p: float, batch: int,
                 in_dims: list[int], hidden: int, with_head: bool = False,
                 dtype=np.float32) -> MaskSet:
    """Draw one mask set. p=0 produces all-ones without consuming the rng,
    so disabled dropout is bit-deterministic regardless of rng state."""
    if p == 0.0 or rng is None:
        inputs = [np.ones((batch, d), dtype=dtype) for d in in_dims]
        recs = [np.ones((batch, hidden), dtype=dtype) for _ in in_dims]
        head = np.ones((batch, hidden), dtype=dtype) if with_head else None
        return MaskSet(inputs, recs, head)
    keep = 1.0 - p

    def draw(shape):
        return (rng.random(shape) < keep).astype(dtype) / dtype(keep)

    inputs = [draw((batch, d)) for d in in_dims]
    recs = [draw((batch, hidden)) for _ in in_dims]
    head = draw((batch, hidden)) if with_head else None
    return MaskSet(inputs, recs, head)


def layer_in_dims(params: ModelParams, side: str) -> list[int]:
    layers = params.encoder if side == "enc" else params.decoder
    return [lp.w.data.shape[0] for lp in layers]


# ---------------------------------------------------------------------------
# graph forward (training)


@dataclass
class HeadOutputs:
    cont: dict[str, tuple[Tensor, Tensor]]     # attr -> (mean, log-variance), (N,1)
    cat: dict[str, tuple[Tensor, Tensor]]      # attr -> (logits, log-variance), (N,C)


def embed_events(params: ModelParams, enc: EncodingModel, cat_idx: np.ndarray,
                 cont: np.ndarray, cat_names, dtype=np.float32) -> Tensor:
    """Concatenate per-attribute embedding rows with the continuous features."""
    parts = []
    for j, attr in enumerate(cat_names):
        parts.append(ad.gather_rows(params.embeddings[attr], cat_idx[:, j]))
    parts.append(ad.const(np.asarray(cont, dtype=dtype)))
    return ad.concat(parts, axis=1)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, lp: LayerParams,
              m_in: np.ndarray, m_rec: np.ndarray) -> tuple[Tensor, Tensor]:
    """One masked LSTM step; dropout hits the layer input and the recurrent
    path, never the cell state."""
    pre = ad.add(ad.add(ad.matmul(ad.dropout_apply(x, m_in), lp.w),
                        ad.matmul(ad.dropout_apply(h, m_rec), lp.u)), lp.b)
    hidden = c.data.shape[1]
    hc = ad.lstm_gates(pre, c)
    return (ad.slice_axis(hc, 1, 0, hidden),
            ad.slice_axis(hc, 1, hidden, 2 * hidden))


def encode(params: ModelParams, enc: EncodingModel, prefix_cat: np.ndarray,
           prefix_cont: np.ndarray, prefix_mask: np.ndarray,
           masks: MaskSet) -> list[tuple[Tensor, Tensor]]:
    """Run the encoder over a padded prefix batch.

    Padded (invalid) positions carry state through unchanged, which makes
    the result independent of how far the prefix was left-padded.
    """
    n, p, _ = prefix_cat.shape
    if np.any(prefix_mask.sum(axis=1) < 1):
        raise DataError("encoder got an all-padding prefix")
    h = params.hidden
    dtype = params.encoder[0].w.data.dtype
    states = [(ad.const(np.zeros((n, h), dtype=dtype)),
               ad.const(np.zeros((n, h), dtype=dtype)))
              for _ in params.encoder]
    for t in range(p):
        x = embed_events(params, enc, prefix_cat[:, t, :], prefix_cont[:, t, :],
                         enc.routing.encoder_cat, dtype)
        keep = prefix_mask[:, t]
        for li, lp in enumerate(params.encoder):
            h_old, c_old = states[li]
            h_new, c_new = lstm_cell(x, h_old, c_old, lp, masks.inputs[li], masks.recs[li])
            h_t = ad.blend_rows(h_new, h_old, keep)
            c_t = ad.blend_rows(c_new, c_old, keep)
            states[li] = (h_t, c_t)
            x = h_t
    return states


def decoder_step(params: ModelParams, enc: EncodingModel, x_cat: np.ndarray,
                 x_cont, state: list[tuple[Tensor, Tensor]],
                 masks: MaskSet) -> tuple[HeadOutputs, list[tuple[Tensor, Tensor]]]:
    """Advance the decoder one event; x_cont may be a Tensor to keep the
    graph connected under self-feeding (gradients are still cut by the
    caller when feeding back predictions)."""
    dtype = params.decoder[0].w.data.dtype
    if isinstance(x_cont, Tensor):
        cont_t = x_cont
    else:
        cont_t = ad.const(np.asarray(x_cont, dtype=dtype))
    parts = []
    for j, attr in enumerate(enc.routing.decoder_cat):
        parts.append(ad.gather_rows(params.embeddings[attr], x_cat[:, j]))
    parts.append(cont_t)
    x = ad.concat(parts, axis=1)

    new_state = []
    for li, lp in enumerate(params.decoder):
        h_old, c_old = state[li]
        h_new, c_new = lstm_cell(x, h_old, c_old, lp, masks.inputs[li], masks.recs[li])
        new_state.append((h_new, c_new))
        x = h_new
    top = new_state[-1][0]
    if masks.head is not None:
        top = ad.dropout_apply(top, masks.head)
    out = ad.add(ad.matmul(top, params.head_w), params.head_b)

    cont = {}
    for attr, (mu_col, lv_col) in params.layout.cont.items():
        cont[attr] = (ad.slice_axis(out, 1, mu_col, mu_col + 1),
                      ad.slice_axis(out, 1, lv_col, lv_col + 1))
    cat = {}
    for attr, (lo_logit, lo_lv, c) in params.layout.cat.items():
        cat[attr] = (ad.slice_axis(out, 1, lo_logit, lo_logit + c),
                     ad.slice_axis(out, 1, lo_lv, lo_lv + c))
    return HeadOutputs(cont=cont, cat=cat), new_state


# ---------------------------------------------------------------------------
# plain-numpy forward (sampling / decoding)


def embed_events_np(params: ModelParams, enc: EncodingModel, cat_idx: np.ndarray,
                    cont: np.ndarray, cat_names) -> np.ndarray:
    parts = [params.embeddings[attr].data[cat_idx[:, j]]
             for j, attr in enumerate(cat_names)]
    parts.append(np.asarray(cont, dtype=np.float32))
    return np.concatenate(parts, axis=1)


def _cell_np(x, h, c, lp: LayerParams, m_in, m_rec):
    pre = (x * m_in) @ lp.w.data + (h * m_rec) @ lp.u.data + lp.b.data
    hc, _ = kernels.cell_forward(np.ascontiguousarray(pre), np.ascontiguousarray(c))
    hidden = c.shape[1]
    return hc[:, :hidden].copy(), hc[:, hidden:].copy()


def encode_np(params: ModelParams, enc: EncodingModel, prefix_cat, prefix_cont,
              prefix_mask, masks: MaskSet) -> list[tuple[np.ndarray, np.ndarray]]:
    n, p, _ = prefix_cat.shape
    if np.any(prefix_mask.sum(axis=1) < 1):
        raise DataError("encoder got an all-padding prefix")
    h = params.hidden
    states = [(np.zeros((n, h), dtype=np.float32), np.zeros((n, h), dtype=np.float32))
              for _ in params.encoder]
    for t in range(p):
        x = embed_events_np(params, enc, prefix_cat[:, t, :], prefix_cont[:, t, :],
                            enc.routing.encoder_cat)
        keep = prefix_mask[:, t].reshape(-1, 1)
        for li, lp in enumerate(params.encoder):
            h_old, c_old = states[li]
            h_new, c_new = _cell_np(x, h_old, c_old, lp, masks.inputs[li], masks.recs[li])
            h_t = h_new * keep + h_old * (1.0 - keep)
            c_t = c_new * keep + c_old * (1.0 - keep)
            states[li] = (h_t, c_t)
            x = h_t
    return states


@dataclass
class HeadOutputsNp:
    cont: dict[str, tuple[np.ndarray, np.ndarray]]
    cat: dict[str, tuple[np.ndarray, np.ndarray]]


def decoder_step_np(params: ModelParams, enc: EncodingModel, x_cat, x_cont,
                    state, masks: MaskSet):
    x = embed_events_np(params, enc, x_cat, x_cont, enc.routing.decoder_cat)
    new_state = []
    for li, lp in enumerate(params.decoder):
        h_old, c_old = state[li]
        h_new, c_new = _cell_np(x, h_old, c_old, lp, masks.inputs[li], masks.recs[li])
        new_state.append((h_new, c_new))
        x = h_new
    top = new_state[-1][0]
    if masks.head is not None:
        top = top * masks.head
    out = top @ params.head_w.data + params.head_b.data
    cont = {attr: (out[:, mu:mu + 1], out[:, lv:lv + 1])
            for attr, (mu, lv) in params.layout.cont.items()}
    cat = {attr: (out[:, lo:lo + c], out[:, lv:lv + c])
           for attr, (lo, lv, c) in params.layout.cat.items()}
    return HeadOutputsNp(cont=cont, cat=cat), new_state


# ---------------------------------------------------------------------------
# checkpoint container: magic, u32 manifest length, JSON manifest, raw
# little-endian float32 arrays in manifest order


def save_container(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    names = list(arrays)
    manifest = dict(meta)
    manifest["format"] = CHECKPOINT_FORMAT
    manifest["arrays"] = [{"name": n, "shape": list(arrays[n].shape)} for n in names]
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            arr = np.ascontiguousarray(arrays[n], dtype=np.float32)
            fh.write(arr.astype("<f4", copy=False).tobytes())


def load_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a checkpoint file (bad magic)")
        (length,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(length).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for spec in manifest["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 4)
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f4").astype(
                np.float32).reshape(shape)
    return manifest, arrays


def save_checkpoint(path: str | Path, params: ModelParams, setting: HyperparameterSetting,
                    extra_meta: dict | None = None) -> None:
    meta = {
        "kind": "model",
        "setting_id": params.setting_id,
        "hidden": params.hidden,
        "layers": setting.layers,
        "seed": params.seed,
        "encoding_hash": params.encoding_hash,
    }
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint_arrays(path, meta, {n: t.data for n, t in params.named().items()})


def save_checkpoint_arrays(path, meta, arrays):
    save_container(path, meta, arrays)


def load_checkpoint(path: str | Path, enc: EncodingModel,
                    setting: HyperparameterSetting) -> ModelParams:
    manifest, arrays = load_container(path)
    if manifest.get("kind") != "model":
        raise DataError(f"{path}: container holds {manifest.get('kind')}, expected a model")
    if manifest["encoding_hash"] != enc.content_hash():
        raise DataError(
            "checkpoint was trained against a different encoding model "
            f"(hash {manifest['encoding_hash'][:12]} != {enc.content_hash()[:12]})")
    params = init_params(setting, enc, seed=int(manifest["seed"]),
                         hidden=int(manifest["hidden"]))
    named = params.named()
    if set(named) != set(arrays):
        raise DataError(f"{path}: checkpoint arrays do not match the model shape")
    for name, tensor in named.items():
        if tuple(arrays[name].shape) != tensor.data.shape:
            raise DataError(f"{path}: array {name} has shape {arrays[name].shape}, "
                            f"expected {tensor.data.shape}")
        tensor.data = arrays[name].copy()
    return params
