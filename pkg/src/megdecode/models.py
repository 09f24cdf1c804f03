"""Model builders, parameter accounting, and checkpoint archives.

Three classifier families over 4 classes:

  eegnet     compact conv stack over a (248, window, 1) image: temporal conv,
             channel-collapsing depthwise conv, separable conv, pooled and
             flattened into the classifier.
  cascade    per-stream conv stacks over (20, 21, depth) mesh tensors feeding
             a two-layer LSTM over the stream sequence.
  multiview  cascade's spatial route (merged by addition) in parallel with a
             temporal route that embeds raw (248, depth) windows per step,
             merged by concatenation before the classifier.

attention_mode picks how much attention is wired in: "none" (plain convs),
"self" (first conv layer gains a self-attention branch), or "self_global"
(additionally a global-attention block ahead of the classifier; for multiview
the attended summary is appended to the temporal sequence as an extra step).

Every stream carries its own conv-stack weights, so totals scale with the
stream count. count_params reports one row per distinct layer with its
per-copy count and multiplicity; the grand total always equals the summed
size of the live parameter arrays.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import AugmentedConv2D, GlobalAttention
from .dataio import NormStats, NUM_CLASSES
from .errors import ConfigError, DataFormatError, ShapeError
from .layers import (AvgPool2D, BatchNorm, Conv2D, Dense, DepthwiseConv2D,
                     Dropout, LSTM, SeparableConv2D)
from .meshing import GRID_COLS, GRID_ROWS

ARCHITECTURES = ("eegnet", "cascade", "multiview")
ATTENTION_MODES = ("none", "self", "self_global")


@dataclass
class ModelConfig:
    """Everything needed to rebuild a model and its input pipeline."""

    architecture: str
    attention_mode: str = "self_global"
    classes: int = NUM_CLASSES
    channels: int = 248
    seed: int = 0
    dtype: str = "float64"
    # mesh architectures
    streams: int = 10
    depth: int = 10
    stream_overlap: float = 0.5
    mesh_filters: tuple = (1, 2, 4)
    mesh_kernel: tuple = (7, 7)
    fc_units: int = 125
    lstm_hidden: int = 10
    # attention sizing
    heads: int = 2
    attn_dk: int | None = None
    attn_dv: int | None = None
    attn_out: int = 2
    ga_width: int | None = None
    # eegnet
    conv_filters: int = 16
    depthwise_mult: int = 2
    separable_filters: int = 32
    kernel_length: int = 128
    separable_length: int = 14
    pool1: int = 4
    pool2: int = 8
    dropout_rate: float = 0.25
    window: int = 1425
    window_overlap: float = 0.33
    scale_factor: float = 1e5

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"attention_mode must be one of {ATTENTION_MODES}, got {self.attention_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.mesh_filters = tuple(int(v) for v in self.mesh_filters)
        self.mesh_kernel = tuple(int(v) for v in self.mesh_kernel)
        if len(self.mesh_filters) != 3 or len(self.mesh_kernel) != 2:
            raise ConfigError("mesh_filters needs 3 entries and mesh_kernel 2")
        positives = dict(classes=self.classes, channels=self.channels, streams=self.streams,
                         depth=self.depth, fc_units=self.fc_units, lstm_hidden=self.lstm_hidden,
                         heads=self.heads, conv_filters=self.conv_filters,
                         depthwise_mult=self.depthwise_mult, separable_filters=self.separable_filters,
                         kernel_length=self.kernel_length, separable_length=self.separable_length,
                         pool1=self.pool1, pool2=self.pool2, window=self.window)
        for name, v in positives.items():
            if int(v) < 1:
                raise ConfigError(f"{name} must be >= 1, got {v}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not 0.0 <= self.window_overlap < 1.0:
            raise ConfigError(f"window_overlap must be in [0, 1), got {self.window_overlap}")
        if not 0.0 <= self.stream_overlap < 1.0:
            raise ConfigError(f"stream_overlap must be in [0, 1), got {self.stream_overlap}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def attention_widths(self, in_width):
        """(d_k, d_v) for the augmented conv branch over in_width channels.

        Mesh architectures default to width 2 per head; eegnet derives the
        width from its in-channel count.
        """
        if self.attn_dk is not None:
            d_k = self.attn_dk
        elif self.architecture in ("cascade", "multiview"):
            d_k = 2
        else:
            d_k = max(1, in_width // self.heads)
        d_v = self.attn_dv if self.attn_dv is not None else d_k
        return d_k, d_v


@dataclass
class LayerCount:
    """One row of the parameter table: per-copy count and copy multiplicity."""

    name: str
    count: int
    multiplier: int = 1


class Model:
    """Shared plumbing: named layers, parameters, state, forward contract."""

    def __init__(self, config):
        self.config = config
        self.train_subjects = None
        self.norm_stats = None
        self._layers = []

    def _add(self, name, layer):
        self._layers.append((name, layer))
        return layer

    def parameters(self):
        out = []
        for lname, layer in self._layers:
            for pname, p in layer.params():
                out.append((f"{lname}.{pname}", p))
        return out

    def param_total(self):
        return sum(int(p.size) for _, p in self.parameters())

    def state_arrays(self):
        out = []
        for lname, layer in self._layers:
            if isinstance(layer, BatchNorm):
                out.append((f"{lname}.running_mean", layer.running_mean))
                out.append((f"{lname}.running_var", layer.running_var))
        return out

    def zero_grad(self):
        for _, p in self.parameters():
            p.grad = None

    def loss(self, batch, onehot, training=False, rng=None):
        logits = self.forward(batch, training=training, rng=rng)
        return T.softmax_cross_entropy(logits, onehot), logits

    def predict_proba(self, batch):
        logits = self.forward(batch, training=False)
        return T.softmax(logits, axis=-1).data

    def forward(self, batch, training=False, rng=None, capture=None):
        raise NotImplementedError


def _mesh_stack_layers(cfg, rng, dtype, prefix, add):
    """One stream's conv tower: first (possibly augmented) conv, two convs, fc."""
    f1, f2, f3 = cfg.mesh_filters
    d_k, d_v = cfg.attention_widths(cfg.depth)
    if cfg.attention_mode == "none":
        conv1 = add(f"{prefix}.conv1", Conv2D(cfg.depth, f1, cfg.mesh_kernel, padding="same",
                                              bias=True, rng=rng, dtype=dtype))
        c1 = f1
    else:
        conv1 = add(f"{prefix}.conv1", AugmentedConv2D(cfg.depth, f1, cfg.mesh_kernel,
                                                       heads=cfg.heads, d_k=d_k, d_v=d_v,
                                                       attn_out=cfg.attn_out, conv_bias=True,
                                                       rng=rng, dtype=dtype))
        c1 = conv1.out_channels
    conv2 = add(f"{prefix}.conv2", Conv2D(c1, f2, cfg.mesh_kernel, padding="same",
                                          bias=True, rng=rng, dtype=dtype))
    conv3 = add(f"{prefix}.conv3", Conv2D(f2, f3, cfg.mesh_kernel, padding="same",
                                          bias=True, rng=rng, dtype=dtype))
    flat_width = GRID_ROWS * GRID_COLS * f3
    fc = add(f"{prefix}.fc", Dense(flat_width, cfg.fc_units, rng=rng, dtype=dtype))
    return conv1, conv2, conv3, fc


def _run_mesh_stack(stack, x, capture_maps=None):
    conv1, conv2, conv3, fc = stack
    m1 = T.relu(conv1(x))
    m2 = T.relu(conv2(m1))
    m3 = T.relu(conv3(m2))
    if capture_maps is not None:
        capture_maps.extend([m1.data, m2.data, m3.data])
    flat = T.reshape(m3, (m3.shape[0], -1))
    return T.relu(fc(flat))


def _check_mesh_batch(x, cfg, what):
    expect = (cfg.streams, GRID_ROWS, GRID_COLS, cfg.depth)
    if not (isinstance(x, np.ndarray) and x.ndim == 5 and x.shape[1:] == expect):
        got = x.shape if isinstance(x, np.ndarray) else type(x)
        raise ShapeError(f"{what} batch must be (batch, {', '.join(map(str, expect))}), got {got}")


class CascadeModel(Model):
    """Per-stream mesh towers -> stacked LSTMs -> classifier."""

    kind = "cascade"

    def __init__(self, config):
        super().__init__(config)
        cfg = config
        dtype = cfg.np_dtype
        rng = np.random.default_rng([cfg.seed, 11])
        self.stacks = [_mesh_stack_layers(cfg, rng, dtype, f"stream{w}", self._add)
                       for w in range(cfg.streams)]
        self.lstm1 = self._add("lstm1", LSTM(cfg.fc_units, cfg.lstm_hidden,
                                             return_sequences=True, rng=rng, dtype=dtype))
        self.lstm2 = self._add("lstm2", LSTM(cfg.lstm_hidden, cfg.lstm_hidden, rng=rng, dtype=dtype))
        if cfg.attention_mode == "self_global":
            width = cfg.ga_width if cfg.ga_width is not None else 128
            self.ga = self._add("global_attention",
                                GlobalAttention(cfg.lstm_hidden, cfg.lstm_hidden, width,
                                                rng=rng, dtype=dtype))
            head_in = width
        else:
            self.ga = None
            head_in = cfg.lstm_hidden
        self.fc_head = self._add("fc_head", Dense(head_in, cfg.fc_units, rng=rng, dtype=dtype))
        self.fc_out = self._add("fc_out", Dense(cfg.fc_units, cfg.classes, rng=rng, dtype=dtype))

    def forward(self, batch, training=False, rng=None, capture=None):
        cfg = self.config
        _check_mesh_batch(batch, cfg, "cascade")
        dtype = cfg.np_dtype
        vecs = []
        for w, stack in enumerate(self.stacks):
            x = T.Tensor(np.ascontiguousarray(batch[:, w], dtype=dtype))
            maps = [] if capture is not None and w == capture.get("stream", 0) else None
            try:
                vecs.append(_run_mesh_stack(stack, x, capture_maps=maps))
            except ShapeError as exc:
                raise ShapeError(f"stream {w}: {exc}") from exc
            if maps is not None:
                capture["conv_maps"] = maps
        seq = T.stack(vecs, axis=1)
        states = self.lstm1(seq)
        final = self.lstm2(states)
        if self.ga is not None:
            summary, weights = self.ga(states, final, return_weights=True)
            if capture is not None:
                capture["global_attention"] = weights.data
            feat = T.relu(self.fc_head(summary))
        else:
            feat = T.relu(self.fc_head(final))
        return self.fc_out(feat)

    def layer_table(self):
        cfg = self.config
        rows = [LayerCount("input", 0, cfg.streams)]
        names = ["conv1", "conv2", "conv3", "fc"]
        for name, layer in zip(names, [l for _, l in self._layers[:4]]):
            label = {"conv1": "attention_conv2d" if cfg.attention_mode != "none" else "conv2d",
                     "conv2": "conv2d", "conv3": "conv2d", "fc": "dense"}[name]
            rows.append(LayerCount(label, layer.param_count(), cfg.streams))
        rows.append(LayerCount("concatenate", 0))
        rows.append(LayerCount("lstm", self.lstm1.param_count()))
        rows.append(LayerCount("lstm", self.lstm2.param_count()))
        if self.ga is not None:
            rows.append(LayerCount("global_attention", self.ga.param_count()))
        rows.append(LayerCount("dense", self.fc_head.param_count()))
        rows.append(LayerCount("dense", self.fc_out.param_count()))
        return rows


class MultiviewModel(Model):
    """Spatial mesh route merged by addition, temporal route through LSTMs,
    joined by concatenation before the classifier."""

    kind = "multiview"

    def __init__(self, config):
        super().__init__(config)
        cfg = config
        dtype = cfg.np_dtype
        rng = np.random.default_rng([cfg.seed, 13])
        self.stacks = [_mesh_stack_layers(cfg, rng, dtype, f"stream{w}", self._add)
                       for w in range(cfg.streams)]
        self.embeds = [self._add(f"embed{w}", Dense(cfg.channels, cfg.fc_units, rng=rng, dtype=dtype))
                       for w in range(cfg.streams)]
        if cfg.attention_mode == "self_global":
            width = cfg.ga_width if cfg.ga_width is not None else cfg.fc_units
            if width != cfg.fc_units:
                raise ConfigError("multiview appends the attended summary to the sequence, "
                                  f"so ga_width must equal fc_units ({cfg.fc_units}), got {width}")
            self.ga = self._add("global_attention",
                                GlobalAttention(cfg.fc_units, cfg.fc_units, width, rng=rng, dtype=dtype))
        else:
            self.ga = None
        self.lstm1 = self._add("lstm1", LSTM(cfg.fc_units, cfg.lstm_hidden,
                                             return_sequences=True, rng=rng, dtype=dtype))
        self.lstm2 = self._add("lstm2", LSTM(cfg.lstm_hidden, cfg.lstm_hidden, rng=rng, dtype=dtype))
        self.fc_temporal = self._add("fc_temporal", Dense(cfg.lstm_hidden, cfg.fc_units, rng=rng, dtype=dtype))
        self.fc_out = self._add("fc_out", Dense(2 * cfg.fc_units, cfg.classes, rng=rng, dtype=dtype))

    def forward(self, batch, training=False, rng=None, capture=None):
        cfg = self.config
        if not (isinstance(batch, dict) and "spatial" in batch and "temporal" in batch):
            raise ShapeError("multiview batch must be a dict with 'spatial' and 'temporal' arrays")
        spatial, temporal = batch["spatial"], batch["temporal"]
        _check_mesh_batch(spatial, cfg, "multiview spatial")
        expect = (cfg.streams, cfg.channels, cfg.depth)
        if not (isinstance(temporal, np.ndarray) and temporal.ndim == 4 and temporal.shape[1:] == expect):
            got = temporal.shape if isinstance(temporal, np.ndarray) else type(temporal)
            raise ShapeError(f"multiview temporal batch must be (batch, {', '.join(map(str, expect))}), got {got}")
        dtype = cfg.np_dtype

        merged = None
        for w, stack in enumerate(self.stacks):
            x = T.Tensor(np.ascontiguousarray(spatial[:, w], dtype=dtype))
            maps = [] if capture is not None and w == capture.get("stream", 0) else None
            try:
                vec = _run_mesh_stack(stack, x, capture_maps=maps)
            except ShapeError as exc:
                raise ShapeError(f"stream {w}: {exc}") from exc
            if maps is not None:
                capture["conv_maps"] = maps
            merged = vec if merged is None else T.add(merged, vec)

        pieces = []
        for w, embed in enumerate(self.embeds):
            x = T.Tensor(np.ascontiguousarray(temporal[:, w].transpose(0, 2, 1), dtype=dtype))
            pieces.append(T.relu(embed(x)))
        seq = T.concat(pieces, axis=1)
        if self.ga is not None:
            query = seq[:, seq.shape[1] - 1, :]
            summary, weights = self.ga(seq, query, return_weights=True)
            if capture is not None:
                capture["global_attention"] = weights.data
            seq = T.concat([seq, T.reshape(summary, (summary.shape[0], 1, cfg.fc_units))], axis=1)
        states = self.lstm1(seq)
        final = self.lstm2(states)
        temporal_vec = T.relu(self.fc_temporal(final))
        feat = T.concat([merged, temporal_vec], axis=1)
        return self.fc_out(feat)

    def layer_table(self):
        cfg = self.config
        rows = [LayerCount("input", 0, cfg.streams)]
        names = ["conv1", "conv2", "conv3", "fc"]
        for name, layer in zip(names, [l for _, l in self._layers[:4]]):
            label = {"conv1": "attention_conv2d" if cfg.attention_mode != "none" else "conv2d",
                     "conv2": "conv2d", "conv3": "conv2d", "fc": "dense"}[name]
            rows.append(LayerCount(label, layer.param_count(), cfg.streams))
        rows.append(LayerCount("add", 0))
        rows.append(LayerCount("dense", self.embeds[0].param_count(), cfg.streams))
        if self.ga is not None:
            rows.append(LayerCount("global_attention", self.ga.param_count()))
        rows.append(LayerCount("lstm", self.lstm1.param_count()))
        rows.append(LayerCount("lstm", self.lstm2.param_count()))
        rows.append(LayerCount("dense", self.fc_temporal.param_count()))
        rows.append(LayerCount("concatenate", 0))
        rows.append(LayerCount("dense", self.fc_out.param_count()))
        return rows


class EEGNetModel(Model):
    """Temporal conv, channel-collapsing depthwise conv, separable conv,
    pooled/flattened into the classifier; ELU activations."""

    kind = "eegnet"

    def __init__(self, config):
        super().__init__(config)
        cfg = config
        dtype = cfg.np_dtype
        rng = np.random.default_rng([cfg.seed, 7])
        d_k, d_v = cfg.attention_widths(1)
        if cfg.attention_mode == "none":
            self.first = self._add("conv1", Conv2D(1, cfg.conv_filters, (1, cfg.kernel_length),
                                                   padding="same", bias=False, rng=rng, dtype=dtype))
            c1 = cfg.conv_filters
        else:
            self.first = self._add("conv1", AugmentedConv2D(1, cfg.conv_filters, (1, cfg.kernel_length),
                                                            heads=cfg.heads, d_k=d_k, d_v=d_v,
                                                            attn_out=cfg.attn_out, conv_bias=False,
                                                            rng=rng, dtype=dtype))
            c1 = self.first.out_channels
        self.bn1 = self._add("bn1", BatchNorm(c1, dtype=dtype))
        self.dw = self._add("depthwise", DepthwiseConv2D(c1, (cfg.channels, 1),
                                                         depth_multiplier=cfg.depthwise_mult,
                                                         padding="valid", rng=rng, dtype=dtype))
        c2 = c1 * cfg.depthwise_mult
        self.bn2 = self._add("bn2", BatchNorm(c2, dtype=dtype))
        self.pool1 = AvgPool2D((1, cfg.pool1))
        self.drop = Dropout(cfg.dropout_rate)
        self.sep = self._add("separable", SeparableConv2D(c2, cfg.separable_filters,
                                                          cfg.separable_length, rng=rng, dtype=dtype))
        self.bn3 = self._add("bn3", BatchNorm(cfg.separable_filters, dtype=dtype))
        self.pool2 = AvgPool2D((1, cfg.pool2))
        w1 = cfg.window // cfg.pool1
        w2 = w1 // cfg.pool2
        if w2 < 1:
            raise ConfigError(f"window {cfg.window} too short for pooling {cfg.pool1}x{cfg.pool2}")
        self.flat_width = w2 * cfg.separable_filters
        if cfg.attention_mode == "self_global":
            width = cfg.ga_width if cfg.ga_width is not None else 128
            self.ga = self._add("global_attention", GlobalAttention(1, 1, width, rng=rng, dtype=dtype))
            head_in = width
        else:
            self.ga = None
            head_in = self.flat_width
        self.fc_out = self._add("fc_out", Dense(head_in, cfg.classes, rng=rng, dtype=dtype))

    def forward(self, batch, training=False, rng=None, capture=None):
        cfg = self.config
        expect = (cfg.channels, cfg.window, 1)
        if not (isinstance(batch, np.ndarray) and batch.ndim == 4 and batch.shape[1:] == expect):
            got = batch.shape if isinstance(batch, np.ndarray) else type(batch)
            raise ShapeError(f"eegnet batch must be (batch, {', '.join(map(str, expect))}), got {got}")
        x = T.Tensor(np.ascontiguousarray(batch, dtype=cfg.np_dtype))
        h = self.bn1(self.first(x), training=training)
        if capture is not None:
            capture["conv_maps"] = [h.data]
        h = T.elu(self.bn2(self.dw(h), training=training))
        h = self.drop(self.pool1(h), training=training, rng=rng)
        h = T.elu(self.bn3(self.sep(h), training=training))
        if capture is not None:
            capture["conv_maps"].append(h.data)
        h = self.drop(self.pool2(h), training=training, rng=rng)
        flat = T.reshape(h, (h.shape[0], -1))
        if self.ga is not None:
            states = T.reshape(flat, (flat.shape[0], self.flat_width, 1))
            query = flat[:, self.flat_width - 1:self.flat_width]
            summary, weights = self.ga(states, query, return_weights=True)
            if capture is not None:
                capture["global_attention"] = weights.data
            return self.fc_out(summary)
        return self.fc_out(flat)

    def layer_table(self):
        cfg = self.config
        rows = [LayerCount("input", 0)]
        first_label = "attention_conv2d" if cfg.attention_mode != "none" else "conv2d"
        rows.append(LayerCount(first_label, self.first.param_count()))
        rows.append(LayerCount("batchnorm", self.bn1.param_count()))
        rows.append(LayerCount("depthwise_conv2d", self.dw.param_count()))
        rows.append(LayerCount("batchnorm", self.bn2.param_count()))
        rows.append(LayerCount("avg_pool", 0))
        rows.append(LayerCount("dropout", 0))
        rows.append(LayerCount("separable_conv2d", self.sep.param_count()))
        rows.append(LayerCount("batchnorm", self.bn3.param_count()))
        rows.append(LayerCount("avg_pool", 0))
        rows.append(LayerCount("dropout", 0))
        rows.append(LayerCount("flatten", 0))
        if self.ga is not None:
            rows.append(LayerCount("global_attention", self.ga.param_count()))
        rows.append(LayerCount("dense", self.fc_out.param_count()))
        return rows


_BUILDERS = {"eegnet": EEGNetModel, "cascade": CascadeModel, "multiview": MultiviewModel}


def build_model(config):
    return _BUILDERS[config.architecture](config)


def count_params(model):
    """(rows, total): per-layer rows with multiplicities plus the grand total.

    The total is cross-checked against the live parameter arrays; disagreement
    means the table logic is broken, so it raises rather than misreport.
    """
    rows = model.layer_table()
    total = sum(r.count * r.multiplier for r in rows)
    live = model.param_total()
    if total != live:
        raise ConfigError(f"parameter table total {total} != live parameter total {live}")
    return rows, total


def format_param_table(model):
    rows, total = count_params(model)
    lines = [f"{'layer':<22}{'params':>10}{'copies':>8}"]
    for r in rows:
        lines.append(f"{r.name:<22}{r.count:>10}{r.multiplier:>8}")
    lines.append(f"{'total':<22}{total:>10}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# checkpoint archive: json config block + named float32 tensors


_CKPT_MAGIC = b"MEGC"
_CKPT_VERSION = 1


def _config_blob(model):
    cfg = asdict(model.config)
    cfg["mesh_filters"] = list(cfg["mesh_filters"])
    cfg["mesh_kernel"] = list(cfg["mesh_kernel"])
    doc = {"config": cfg,
           "train_subjects": sorted(model.train_subjects) if model.train_subjects else None,
           "norm_subjects": sorted(model.norm_stats.subject_ids) if model.norm_stats else None}
    return json.dumps(doc, sort_keys=True).encode("utf-8")


def save_checkpoint(model, path):
    """Write the model as a json config block plus named float32 tensors."""
    named = [(n, p.data) for n, p in model.parameters()]
    named += model.state_arrays()
    if model.norm_stats is not None:
        named.append(("preproc.mean", model.norm_stats.mean))
        named.append(("preproc.std", model.norm_stats.std))
    blob = bytearray()
    blob += _CKPT_MAGIC
    blob += struct.pack("<B", _CKPT_VERSION)
    cfg = _config_blob(model)
    blob += struct.pack("<I", len(cfg))
    blob += cfg
    blob += struct.pack("<I", len(named))
    for name, arr in named:
        enc = name.encode("utf-8")
        blob += struct.pack("<H", len(enc))
        blob += enc
        arr = np.ascontiguousarray(arr, dtype="<f4")
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob[4:])))
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path):
    """Rebuild a model (and preprocessing stats) from a checkpoint file."""
    blob = Path(path).read_bytes()
    off = 0

    def need(n, what):
        nonlocal off
        if off + n > len(blob):
            raise DataFormatError(f"truncated while reading {what}", offset=off)
        piece = blob[off:off + n]
        off += n
        return piece

    if need(4, "magic") != _CKPT_MAGIC:
        raise DataFormatError(f"bad magic, expected {_CKPT_MAGIC!r}", offset=0)
    if need(1, "version")[0] != _CKPT_VERSION:
        raise DataFormatError("unsupported checkpoint version", offset=4)
    crc_in = struct.unpack("<I", blob[-4:])[0]
    if crc_in != zlib.crc32(blob[4:-4]):
        raise DataFormatError("checkpoint checksum mismatch", offset=len(blob) - 4)
    (cfg_len,) = struct.unpack("<I", need(4, "config length"))
    try:
        doc = json.loads(need(cfg_len, "config block").decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"config block is not valid json: {exc}", offset=9) from exc
    (count,) = struct.unpack("<I", need(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", need(2, "tensor name length"))
        name = need(nlen, "tensor name").decode("utf-8")
        rank = need(1, "tensor rank")[0]
        shape = struct.unpack(f"<{rank}I", need(4 * rank, "tensor shape")) if rank else ()
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(need(4 * size, f"tensor {name}"), dtype="<f4").reshape(shape)
        tensors[name] = data.copy()

    raw = doc["config"]
    raw["mesh_filters"] = tuple(raw["mesh_filters"])
    raw["mesh_kernel"] = tuple(raw["mesh_kernel"])
    known = {f.name for f in fields(ModelConfig)}
    unknown = set(raw) - known
    if unknown:
        raise DataFormatError(f"unknown config fields {sorted(unknown)}")
    model = build_model(ModelConfig(**raw))
    dtype = model.config.np_dtype

    expected = {n: p for n, p in model.parameters()}
    for name, p in expected.items():
        if name not in tensors:
            raise DataFormatError(f"checkpoint missing tensor {name!r}")
        if tensors[name].shape != p.data.shape:
            raise DataFormatError(f"tensor {name!r} has shape {tensors[name].shape}, "
                                  f"model expects {p.data.shape}")
        p.data = tensors.pop(name).astype(dtype)
    for name, arr in model.state_arrays():
        if name not in tensors:
            raise DataFormatError(f"checkpoint missing state {name!r}")
        arr[...] = tensors.pop(name).astype(arr.dtype)
    mean = tensors.pop("preproc.mean", None)
    std = tensors.pop("preproc.std", None)
    if tensors:
        raise DataFormatError(f"checkpoint has unexpected tensors {sorted(tensors)}")
    if doc.get("norm_subjects") is not None:
        if mean is None or std is None:
            raise DataFormatError("checkpoint lists norm subjects but lacks preproc tensors")
        model.norm_stats = NormStats(mean=mean.astype(np.float64), std=std.astype(np.float64),
                                     subject_ids=frozenset(doc["norm_subjects"]))
    if doc.get("train_subjects") is not None:
        model.train_subjects = tuple(doc["train_subjects"])
    return model
