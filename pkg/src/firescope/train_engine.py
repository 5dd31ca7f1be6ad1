"""Class-weighted training: loss, Adam, learning-rate decay, splitting,
the epoch loop and the three-model band-sensitivity harness."""
from __future__ import annotations

import io
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import cirrus_segmenter as cs
from . import metrics_lab as ml
from . import raster_store as rs
from . import stats_tests as st
from .model_zoo import CnnConfig, Network, build_sensitivity_cnn

CLIP = 1e-7


class TrainingDiverged(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    decay: float = 0.1
    epochs: int = 100
    batch_size: int = 32
    split_fraction: float = 0.85
    seed: int = 0
    class_weight: float | None = None
    threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError(f"split_fraction must lie in (0, 1), got {self.split_fraction}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_metric: float
    seconds: float


@dataclass
class TrainLog:
    metric_name: str
    config: dict
    seed: int
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def seconds(self) -> list[float]:
        return [r.seconds for r in self.records]

    @property
    def train_losses(self) -> list[float]:
        return [r.train_loss for r in self.records]

    def to_csv(self) -> str:
        out = io.StringIO()
        for key, value in sorted(self.config.items()):
            out.write(f"# {key} = {value}\n")
        out.write(f"epoch,train_loss,val_loss,val_{self.metric_name},seconds\n")
        for r in self.records:
            out.write(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.val_metric!r},{r.seconds!r}\n")
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainLog":
        config = {}
        records = []
        metric = "metric"
        for line in text.splitlines():
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                config[key.strip()] = value.strip()
            elif line.startswith("epoch,"):
                metric = line.split(",")[3].removeprefix("val_")
            elif line.strip():
                e, tl, vl, vm, s = line.split(",")
                records.append(EpochRecord(int(e), float(tl), float(vl), float(vm), float(s)))
        return cls(metric, config, int(config.get("seed", 0)), records)


def compute_class_weight(masks) -> float:
    """Ratio of zero pixels to one pixels across all masks."""
    arr = np.concatenate([np.asarray(m).ravel() for m in masks]) if isinstance(masks, list) \
        else np.asarray(masks).ravel()
    ones = int(np.count_nonzero(arr))
    if ones == 0:
        raise ValueError("no positive pixels: exclude fire-free training sets "
                         "or pass an explicit class weight")
    return (arr.size - ones) / ones


def weighted_bce(pred, target, class_weight) -> float:
    """Per-image sum of weighted cross-entropy, averaged over the batch."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    p = np.clip(pred, CLIP, 1.0 - CLIP)
    per_px = class_weight * target * np.log(p) + (1.0 - target) * np.log1p(-p)
    return float(-per_px.reshape(len(p), -1).sum(axis=1).mean())


def weighted_bce_grad(pred, target, class_weight) -> np.ndarray:
    """d(weighted_bce)/d(pred).  The clip is passed through as identity so
    saturated wrong predictions still get a gradient."""
    p = np.clip(np.asarray(pred, dtype=np.float64), CLIP, 1.0 - CLIP)
    return -(class_weight * target / p - (1.0 - target) / (1.0 - p)) / len(p)


def lr_schedule(epoch, initial=1e-3, decay=0.1) -> float:
    return initial * math.exp(-decay * epoch)


def adam_step(params, grads, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def l2_penalty(net: Network) -> tuple[float, dict[str, np.ndarray]]:
    """lambda * sum(w^2) over kernels that carry an L2 coefficient, plus the
    matching gradient contributions 2 * lambda * w."""
    params = net.parameters()
    total = 0.0
    grads = {}
    for key, lam in net.l2_terms().items():
        w = params[key]
        total += lam * float(np.sum(w * w))
        grads[key] = 2.0 * lam * w
    return total, grads


def objective(net: Network, x, y, class_weight, training=True) -> float:
    """Forward + backward for one batch; leaves total-objective gradients in
    the network's layers and returns loss + L2 penalty."""
    pred = net.forward(x, training=training)
    loss = weighted_bce(pred, y, class_weight)
    net.backward(weighted_bce_grad(pred, y, class_weight))
    penalty, pgrads = l2_penalty(net)
    grads = net.gradients()
    for key, g in pgrads.items():
        grads[key] += g
    return loss + penalty


def split_dataset(n, fraction, seed):
    """Seeded shuffle of ``range(n)``; the first ``floor(n * fraction)``
    indices train, the rest validate."""
    if not isinstance(n, int):
        n = len(n)
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    k = math.floor(n * fraction)
    return perm[:k], perm[k:]


def evaluate(net: Network, x, y, class_weight, threshold=0.5):
    pred = net.predict(x)
    loss = weighted_bce(pred, y, class_weight)
    if net.head == "mask":
        metric = ml.f2_from_counts(ml.confusion(pred, y, threshold))
    else:
        metric = ml.binary_accuracy(pred, y, threshold)
    return loss, metric, pred


def train(net: Network, x, y, config: TrainConfig, x_val=None, y_val=None) -> TrainLog:
    """Mini-batch Adam with the exponential learning-rate decay.

    Validation columns are NaN when no validation data is given.  Epoch
    seconds cover forward, backward and update only.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y) or len(x) == 0:
        raise ValueError(f"{len(x)} inputs for {len(y)} targets")
    if net.head == "mask" and y.shape[1:3] != x.shape[1:3]:
        raise ValueError("mask head needs per-pixel targets")
    if net.head == "classifier" and y.shape != (len(x), 1):
        raise ValueError(f"classifier head needs (N, 1) labels, got {y.shape}")
    class_weight = config.class_weight if config.class_weight is not None \
        else compute_class_weight(y)
    metric_name = "f2" if net.head == "mask" else "accuracy"
    echo = asdict(config) | {"class_weight": class_weight, "model_seed": net.seed}
    log = TrainLog(metric_name, echo, config.seed)
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    params = net.parameters()
    n = len(x)
    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config.learning_rate, config.decay)
        order = rng.permutation(n)
        losses = []
        start = time.perf_counter()
        for b, i in enumerate(range(0, n, config.batch_size)):
            idx = order[i:i + config.batch_size]
            loss = objective(net, x[idx], y[idx], class_weight)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            adam_step(params, net.gradients(), state, lr)
            losses.append(loss)
        seconds = time.perf_counter() - start
        if x_val is not None and len(x_val):
            val_loss, val_metric, _ = evaluate(net, x_val, y_val, class_weight, config.threshold)
        else:
            val_loss = val_metric = float("nan")
        log.records.append(EpochRecord(epoch, float(np.mean(losses)), val_loss, val_metric, seconds))
    return log


# ---------------------------------------------------------------------------
# sensitivity analysis

VARIANTS = ("benchmark", "control", "experimental")


@dataclass
class ModelSummary:
    name: str
    input_channels: int
    mean_seconds: float
    sd_seconds: float
    accuracy: float
    n_val: int


@dataclass
class HypothesisRow:
    section: str  # "accuracy" or "time"
    null: str
    alternative_text: str
    values: dict
    n: int
    result: st.HypothesisResult | None
    paired: st.HypothesisResult | None = None
    note: str = ""


@dataclass
class SensitivityResult:
    logs: dict[str, TrainLog]
    summary: dict[str, ModelSummary]
    rows: list[HypothesisRow]

    def report(self) -> str:
        return format_sensitivity_report(self.rows, self.summary)


def summarize_times(seconds) -> tuple[float, float]:
    return st.mean_sd(seconds)


def sensitivity_inputs(dataset: rs.PatchDataset, train_idx, swir=rs.SWIR,
                       cirrus=rs.CIRRUS, seed=0) -> dict[str, np.ndarray]:
    """Stacked inputs for the three models.  SWIR and raw cirrus are
    standardized with statistics fitted on the training indices; the
    segmented cirrus channel is the {0, 0.5, 1} class encoding."""
    raw = rs.select_dataset_bands(dataset, [*swir, cirrus])
    _, stats = rs.normalize_bands(raw.subset(train_idx), "fit")
    norm, _ = rs.normalize_bands(raw, stats)
    x_raw, _ = norm.arrays()
    segs = cs.segment_dataset(dataset, cirrus, seed)
    seg = np.stack([cs.encode_channel(s) for s in segs])[..., None]
    swir_x = x_raw[..., :len(swir)]
    return {
        "benchmark": swir_x,
        "control": x_raw,
        "experimental": np.concatenate([swir_x, seg], axis=-1),
    }


def run_sensitivity(dataset: rs.PatchDataset, config: TrainConfig, cnn: CnnConfig,
                    swir=rs.SWIR, cirrus=rs.CIRRUS) -> SensitivityResult:
    """Train Benchmark (SWIR), Control (SWIR + raw cirrus) and Experimental
    (SWIR + segmented cirrus) classifiers one after another with identical
    architecture family, hyperparameters and seed."""
    if not len(dataset):
        raise ValueError("empty dataset")
    labels = np.array([[float(p.has_fire)] for p in dataset.patches])
    train_idx, val_idx = split_dataset(len(dataset), config.split_fraction, config.seed)
    inputs = sensitivity_inputs(dataset, train_idx, swir, cirrus, config.seed)
    hw = dataset.patches[0].pixels.shape[:2]
    logs, summary = {}, {}
    for name in VARIANTS:
        x = inputs[name]
        cfg = replace(cnn, input_channels=x.shape[-1], input_hw=tuple(hw))
        net = Network(build_sensitivity_cnn(cfg), seed=config.seed)
        if net.graph.input_channels != x.shape[-1]:
            raise ValueError(f"{name}: model expects {net.graph.input_channels} channels, "
                             f"data has {x.shape[-1]}")
        log = train(net, x[train_idx], labels[train_idx], config, x[val_idx], labels[val_idx])
        pred = net.predict(x[val_idx])
        acc = ml.binary_accuracy(pred, labels[val_idx], config.threshold)
        mean, sd = summarize_times(log.seconds) if log.records else (float("nan"), float("nan"))
        logs[name] = log
        summary[name] = ModelSummary(name, x.shape[-1], mean, sd, acc, len(val_idx))
    return SensitivityResult(logs, summary, sensitivity_hypotheses(summary, logs))


def _attempt(fn, *args):
    try:
        return fn(*args), ""
    except ValueError as exc:
        return None, str(exc)


def sensitivity_hypotheses(summary: dict[str, ModelSummary],
                           logs: dict[str, TrainLog] | None = None) -> list[HypothesisRow]:
    """The four comparisons: accuracy E>B, accuracy E<C, time E>B, time E<C."""
    e, b, c = summary["experimental"], summary["benchmark"], summary["control"]
    rows = []
    for other, alt, sym in ((b, "greater", ">"), (c, "less", "<")):
        tag = other.name[0].upper()
        res, note = _attempt(st.two_proportion_z, e.accuracy, e.n_val,
                             other.accuracy, other.n_val, alt)
        rows.append(HypothesisRow(
            "accuracy", f"p_E - p_{tag} = 0", f"p_E - p_{tag} {sym} 0",
            {"p_E": e.accuracy, f"p_{tag}": other.accuracy}, e.n_val, res, note=note))
    for other, alt, sym in ((b, "greater", ">"), (c, "less", "<")):
        tag = other.name[0].upper()
        n = len(logs["experimental"].records) if logs else 0
        res, note = _attempt(st.welch_t, e.mean_seconds, e.sd_seconds, n,
                             other.mean_seconds, other.sd_seconds, n, alt)
        paired = None
        if logs:
            diffs = [a - o for a, o in zip(logs["experimental"].seconds, logs[other.name].seconds)]
            paired, _ = _attempt(st.paired_t, diffs, alt)
        rows.append(HypothesisRow(
            "time", f"mu_E - mu_{tag} = 0", f"mu_E - mu_{tag} {sym} 0",
            {"mu_E": e.mean_seconds, f"mu_{tag}": other.mean_seconds,
             "sd_E": e.sd_seconds, f"sd_{tag}": other.sd_seconds},
            n, res, paired, note))
    return rows


def format_sensitivity_report(rows: list[HypothesisRow],
                              summary: dict[str, ModelSummary] | None = None) -> str:
    out = io.StringIO()
    titles = {"accuracy": "Binary Accuracy", "time": "Train Time (sec/epoch)"}
    section = None
    for row in rows:
        if row.section != section:
            section = row.section
            out.write(f"== {titles[section]} ==\n")
        vals = "  ".join(f"{k}={v:.5f}" for k, v in row.values.items())
        p = f"{row.result.p_value:.5g}" if row.result else f"undefined ({row.note})"
        line = f"H0: {row.null} | HA: {row.alternative_text} | {vals} | n={row.n} | P={p}"
        if row.paired is not None:
            line += f" | paired P={row.paired.p_value:.5g}"
        out.write(line + "\n")
    if summary:
        out.write("== Models ==\n")
        for s in summary.values():
            out.write(f"{s.name}: channels={s.input_channels} accuracy={s.accuracy:.5f} "
                      f"sec/epoch={s.mean_seconds:.5f}+-{s.sd_seconds:.5f} n_val={s.n_val}\n")
    return out.getvalue()
