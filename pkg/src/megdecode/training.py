"""Adam training loop, cross-subject evaluation, and introspection exports.

Training is fully deterministic for a fixed TrainConfig seed: batch
shuffling, dropout, and the validation split each draw from their own
seeded generator, and parameter init is fixed by the model seed. Early
stopping tracks validation loss and the best-epoch parameters are restored
at the end.

Mesh architectures z-score per channel with statistics pooled over the
training subjects only; the stats travel with the model so evaluation can
refuse subject leakage.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .dataio import (NUM_CLASSES, compute_norm_stats, normalize, scale,
                     segment_sliding)
from .errors import (CapabilityError, ConfigError, GradientError,
                     InsufficientDataError, NumericError)
from .meshing import assemble_streams
from .models import count_params


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int | None = None
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size is not None and self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if not 0.0 < self.learning_rate:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")


def default_batch_size(architecture):
    return 16 if architecture == "eegnet" else 64


@dataclass
class Metrics:
    """Per-subject accuracy, their mean and population std, loss history."""

    per_subject: dict
    mean: float
    std: float
    history: list = field(default_factory=list)

    def to_json(self):
        import json
        return json.dumps({"per_subject": self.per_subject, "mean": self.mean,
                           "std": self.std, "history": self.history}, indent=2, sort_keys=True)


def summarize_accuracy(per_subject):
    accs = np.array(list(per_subject.values()), dtype=np.float64)
    return float(accs.mean()), float(accs.std())


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    def __init__(self, params):
        self.m = [np.zeros_like(p.data) for _, p in params]
        self.v = [np.zeros_like(p.data) for _, p in params]
        self.step = 0


def adam_step(params, grads, state, cfg):
    """One Adam update in place; shapes must match the state exactly."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise GradientError("adam_step: parameter, gradient, and state lengths differ")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for (name, p), g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise GradientError(f"adam_step: gradient for {name} has shape {g.shape}, "
                                f"parameter has {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


# ---------------------------------------------------------------------------
# input preparation


@dataclass
class PreparedData:
    inputs: object   # array for eegnet/cascade, dict for multiview
    labels: np.ndarray
    subjects: np.ndarray

    def __len__(self):
        return len(self.labels)

    def slice(self, idx):
        if isinstance(self.inputs, dict):
            return {k: v[idx] for k, v in self.inputs.items()}
        return self.inputs[idx]


def prepare_inputs(model, recordings):
    """Segment/scale (eegnet) or normalize/mesh (cascade, multiview) recordings."""
    cfg = model.config
    if not recordings:
        raise ConfigError("no recordings to prepare")
    labels, subjects = [], []
    if cfg.architecture == "eegnet":
        xs = []
        for rec in recordings:
            for seg in segment_sliding(rec.samples, cfg.window, cfg.window_overlap):
                xs.append(scale(seg.astype(np.float32), cfg.scale_factor))
                labels.append(rec.label)
                subjects.append(rec.subject_id)
        inputs = np.stack(xs)[..., None]
        return PreparedData(inputs=inputs, labels=np.array(labels), subjects=np.array(subjects))
    if model.norm_stats is None:
        raise ConfigError("mesh architectures need normalization stats; train first or attach stats")
    spatial, temporal = [], []
    for rec in recordings:
        normed = normalize(rec.samples, model.norm_stats).astype(np.float32)
        batches = assemble_streams(normed, cfg.streams, cfg.depth,
                                   stream_overlap=cfg.stream_overlap,
                                   label=rec.label, subject_id=rec.subject_id)
        for b in batches:
            spatial.append(np.stack(b.spatial))
            if cfg.architecture == "multiview":
                temporal.append(np.stack(b.temporal))
            labels.append(rec.label)
            subjects.append(rec.subject_id)
    spatial = np.stack(spatial)
    labels = np.array(labels)
    subjects = np.array(subjects)
    if cfg.architecture == "multiview":
        return PreparedData(inputs={"spatial": spatial, "temporal": np.stack(temporal)},
                            labels=labels, subjects=subjects)
    return PreparedData(inputs=spatial, labels=labels, subjects=subjects)


def predict_labels(model, prepared, chunk=32):
    """Argmax predictions in inference mode, chunked to bound memory."""
    out = np.empty(len(prepared), dtype=np.int64)
    for lo in range(0, len(prepared), chunk):
        idx = slice(lo, min(lo + chunk, len(prepared)))
        probs = model.predict_proba(prepared.slice(idx))
        out[idx] = probs.argmax(axis=1)
    return out


def _mean_loss(model, prepared, chunk=32):
    total, n = 0.0, 0
    for lo in range(0, len(prepared), chunk):
        idx = slice(lo, min(lo + chunk, len(prepared)))
        onehot = np.eye(NUM_CLASSES, dtype=np.float64)[prepared.labels[idx]]
        loss, _ = model.loss(prepared.slice(idx), onehot, training=False)
        k = idx.stop - idx.start
        total += loss.item() * k
        n += k
    return total / n


# ---------------------------------------------------------------------------
# training


def _stratified_val_split(subjects, fraction, rng):
    """Per-subject holdout indices; every subject keeps most of its samples."""
    train_idx, val_idx = [], []
    for s in np.unique(subjects):
        idx = np.flatnonzero(subjects == s)
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(fraction * len(idx)))
        if len(idx) - n_val < 1:
            n_val = len(idx) - 1
        val_idx.extend(idx[:n_val])
        train_idx.extend(idx[n_val:])
    return np.sort(np.array(train_idx, dtype=np.int64)), np.sort(np.array(val_idx, dtype=np.int64))


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    out = [order[lo:lo + batch_size] for lo in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def train(model, recordings, split, cfg=None):
    """Fit the model on the split's training subjects; returns (model, Metrics).

    Early stopping on held-out validation loss (a per-subject stratified
    fraction of the training segments); the best-epoch parameters are
    restored before returning. Metrics carries per-training-subject accuracy
    measured in inference mode after restoration, plus the epoch history.
    """
    cfg = cfg or TrainConfig()
    present = {r.subject_id for r in recordings}
    missing = set(split.train_subjects) - present
    if missing:
        raise ConfigError(f"training subjects missing from dataset: {sorted(missing)}")
    train_recs = [r for r in recordings if r.subject_id in set(split.train_subjects)]
    if model.config.architecture != "eegnet":
        model.norm_stats = compute_norm_stats(train_recs)
    prepared = prepare_inputs(model, train_recs)
    if len(prepared) < 4:
        raise InsufficientDataError(f"only {len(prepared)} training samples; need at least 4")
    model.train_subjects = tuple(sorted(split.train_subjects))

    rng_shuffle = np.random.default_rng([cfg.seed, 1])
    rng_dropout = np.random.default_rng([cfg.seed, 2])
    rng_val = np.random.default_rng([cfg.seed, 3])
    tr_idx, va_idx = _stratified_val_split(prepared.subjects, cfg.val_fraction, rng_val)
    train_part = PreparedData(inputs=prepared.slice(tr_idx), labels=prepared.labels[tr_idx],
                              subjects=prepared.subjects[tr_idx])
    val_part = PreparedData(inputs=prepared.slice(va_idx), labels=prepared.labels[va_idx],
                            subjects=prepared.subjects[va_idx])

    params = model.parameters()
    adam = AdamState(params)
    batch_size = cfg.batch_size or default_batch_size(model.config.architecture)
    eye = np.eye(NUM_CLASSES, dtype=np.float64)

    best_val = np.inf
    best_state = [p.data.copy() for _, p in params]
    best_extra = [arr.copy() for _, arr in model.state_arrays()]
    stale = 0
    history = []
    for epoch in range(cfg.epochs):
        epoch_loss, epoch_hits, seen = 0.0, 0, 0
        for idx in _batches(len(train_part), batch_size, rng_shuffle):
            batch = train_part.slice(idx)
            onehot = eye[train_part.labels[idx]]
            model.zero_grad()
            with T.Tape():
                loss, logits = model.loss(batch, onehot, training=True, rng=rng_dropout)
                T.backward(loss)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for _, p in params]
            adam_step(params, grads, adam, cfg)
            epoch_loss += value * len(idx)
            epoch_hits += int((logits.data.argmax(axis=1) == train_part.labels[idx]).sum())
            seen += len(idx)
        val_loss = _mean_loss(model, val_part) if len(val_part) else epoch_loss / seen
        val_acc = (float((predict_labels(model, val_part) == val_part.labels).mean())
                   if len(val_part) else float("nan"))
        history.append({"epoch": epoch, "train_loss": epoch_loss / seen,
                        "train_accuracy": epoch_hits / seen,
                        "val_loss": val_loss, "val_accuracy": val_acc})
        if val_loss < best_val - 1e-12:
            best_val = val_loss
            best_state = [p.data.copy() for _, p in params]
            best_extra = [arr.copy() for _, arr in model.state_arrays()]
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for (_, p), saved in zip(params, best_state):
        p.data = saved
    for (_, arr), saved in zip(model.state_arrays(), best_extra):
        arr[...] = saved

    per_subject = {}
    preds = predict_labels(model, prepared)
    for s in sorted(set(prepared.subjects)):
        mask = prepared.subjects == s
        per_subject[str(s)] = float((preds[mask] == prepared.labels[mask]).mean())
    mean, std = summarize_accuracy(per_subject)
    return model, Metrics(per_subject=per_subject, mean=mean, std=std, history=history)


def evaluate_cross_subject(model, recordings, test_subjects):
    """Per-subject accuracy on held-out subjects; refuses any leakage."""
    test_subjects = tuple(test_subjects)
    if model.train_subjects:
        leak = set(test_subjects) & set(model.train_subjects)
        if leak:
            raise ConfigError(f"test subjects overlap training subjects: {sorted(leak)}")
    if model.norm_stats is not None:
        leak = set(test_subjects) & set(model.norm_stats.subject_ids)
        if leak:
            raise ConfigError(f"normalization stats leak test subjects: {sorted(leak)}")
    present = {r.subject_id for r in recordings}
    missing = set(test_subjects) - present
    if missing:
        raise ConfigError(f"test subjects missing from dataset: {sorted(missing)}")
    per_subject = {}
    for s in sorted(test_subjects):
        recs = [r for r in recordings if r.subject_id == s]
        prepared = prepare_inputs(model, recs)
        preds = predict_labels(model, prepared)
        per_subject[s] = float((preds == prepared.labels).mean())
    mean, std = summarize_accuracy(per_subject)
    return Metrics(per_subject=per_subject, mean=mean, std=std)


# ---------------------------------------------------------------------------
# introspection exports


def _plot_bars(values, title, ylabel, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(max(4.0, 0.25 * len(values)), 3.0))
    ax.bar(np.arange(len(values)), values, color="#3a6ea5")
    ax.set_xlabel("position")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def export_attention_weights(model, recordings, out_dir=None, max_samples=64, chunk=16):
    """Global-attention weight distributions over input samples.

    Returns (per_sample, mean): per_sample is (N, positions) with each row a
    softmax distribution; mean is the positionwise average. With out_dir set,
    writes attention_weights.csv and attention_weights.svg.
    """
    if getattr(model, "ga", None) is None:
        raise CapabilityError("model has no global-attention block to export")
    prepared = prepare_inputs(model, recordings)
    n = min(max_samples, len(prepared))
    weights = []
    for lo in range(0, n, chunk):
        idx = slice(lo, min(lo + chunk, n))
        capture = {}
        model.forward(prepared.slice(idx), training=False, capture=capture)
        weights.append(capture["global_attention"])
    per_sample = np.concatenate(weights, axis=0)
    mean = per_sample.mean(axis=0)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "attention_weights.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["position", "mean_weight"])
            for i, v in enumerate(mean):
                writer.writerow([i, f"{v:.10g}"])
        _plot_bars(mean, "global attention weights (mean over samples)",
                   "weight", out_dir / "attention_weights.svg")
    return per_sample, mean


def export_feature_maps(model, recordings, layer_indices=None, stream=0, out_dir=None):
    """Post-activation conv maps for one input sample.

    For mesh models the maps come from one stream's tower (20x21 grids); for
    eegnet from the first conv block and the separable block. Returns
    {layer_index: (H, W, C) array}; with out_dir set writes feature_maps.csv
    and one SVG per layer.
    """
    prepared = prepare_inputs(model, recordings)
    capture = {"stream": stream}
    model.forward(prepared.slice(slice(0, 1)), training=False, capture=capture)
    maps = capture.get("conv_maps")
    if not maps:
        raise CapabilityError("model captured no convolutional feature maps")
    if layer_indices is None:
        layer_indices = range(len(maps))
    out = {}
    for li in layer_indices:
        if not 0 <= li < len(maps):
            raise CapabilityError(f"layer index {li} out of range [0, {len(maps)})")
        out[li] = maps[li][0]
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "feature_maps.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "channel", "row", "col", "value"])
            for li, arr in out.items():
                hh, ww, cc = arr.shape
                for c in range(cc):
                    for r in range(hh):
                        for w in range(ww):
                            writer.writerow([li, c, r, w, f"{arr[r, w, c]:.8g}"])
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        for li, arr in out.items():
            cc = arr.shape[2]
            cols = min(cc, 4)
            rows = (cc + cols - 1) // cols
            fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 2.5 * rows), squeeze=False)
            for c in range(rows * cols):
                ax = axes[c // cols][c % cols]
                if c < cc:
                    ax.imshow(arr[:, :, c], aspect="auto", cmap="viridis")
                    ax.set_title(f"channel {c}", fontsize=8)
                ax.axis("off")
            fig.suptitle(f"layer {li} feature maps")
            fig.tight_layout()
            fig.savefig(out_dir / f"feature_maps_layer{li}.svg", format="svg")
            plt.close(fig)
    return out


def save_history_csv(metrics, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy"])
        for row in metrics.history:
            writer.writerow([row["epoch"], f"{row['train_loss']:.8g}", f"{row['train_accuracy']:.6g}",
                             f"{row['val_loss']:.8g}", f"{row['val_accuracy']:.6g}"])


def model_summary(model):
    rows, total = count_params(model)
    return {"architecture": model.config.architecture,
            "attention_mode": model.config.attention_mode,
            "total_parameters": total,
            "rows": [(r.name, r.count, r.multiplier) for r in rows]}
