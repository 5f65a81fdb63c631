"""Losses, optimiser, sampling, checkpoints and the training loop."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import formats
from . import tensor as T
from .augment import AugmentConfig, SurfaceSample, apply_augmentation
from .model import ModelConfig, ModelState, forward, init_state, parameter_shapes
from .patching import default_patch_maps, sequence_from_surface
from .tensor import Tensor


class DivergenceError(RuntimeError):
    """Raised when a training loss stops being finite."""


# -- losses and metrics ----------------------------------------------------------


def mse_loss(pred, target) -> Tensor:
    """Mean squared error; ``target`` is a constant array of ``pred``'s shape."""
    pred = T.as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    if pred.data.size == 0:
        raise ValueError("mse_loss of an empty batch")
    diff = T.sub(pred, Tensor(target))
    return T.mean(T.mul(diff, diff))


def one_hot(labels: np.ndarray, n_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    out = np.zeros((*labels.shape, n_classes), dtype=dtype)
    np.put_along_axis(out, labels[..., None].astype(np.int64), 1.0, axis=-1)
    return out


DICE_SMOOTH = 1e-5


def dice_ce_loss(logits, labels, smooth: float = DICE_SMOOTH) -> Tensor:
    """Unweighted sum of soft-Dice loss and mean cross-entropy.

    Dice per class is ``(2 I + smooth) / (P + Y + smooth)`` with ``I`` the
    soft overlap, ``P`` the predicted mass and ``Y`` the label count; the
    Dice loss is one minus its mean over classes (and batch elements).
    All classes, background included, enter both terms.

    Args:
        logits: ``(V, K)`` or ``(B, V, K)`` tensor.
        labels: Integer array ``(V,)`` or ``(B, V)``.
    """
    logits = T.as_tensor(logits)
    if logits.ndim == 2:
        logits = T.reshape(logits, (1, *logits.shape))
    b, v, k = logits.shape
    labels = np.asarray(labels).reshape(b, v)
    y = one_hot(labels, k, logits.dtype)
    yt = Tensor(y)

    probs = T.softmax_last(logits)
    inter = T.sum(T.mul(probs, yt), axis=1)  # (B, K)
    denom = T.add(T.sum(probs, axis=1), Tensor(y.sum(axis=1) + smooth))
    dice = T.div(T.add(T.scale(inter, 2.0), smooth), denom)
    dice_loss = T.add(T.scale(T.mean(dice), -1.0), 1.0)

    ce = T.scale(T.sum(T.mul(T.log_softmax_last(logits), yt)), -1.0 / (b * v))
    return T.add(dice_loss, ce)


def dice_scores(pred: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Hard Dice ``2|A n B| / (|A| + |B|)`` per class; NaN where a class is absent from both."""
    pred, labels = np.asarray(pred).ravel(), np.asarray(labels).ravel()
    inter = np.bincount(labels[pred == labels], minlength=n_classes)[:n_classes]
    sizes = np.bincount(pred, minlength=n_classes)[:n_classes] + np.bincount(labels, minlength=n_classes)[:n_classes]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(sizes > 0, 2.0 * inter / sizes, np.nan)


def mean_dice(pred, labels, n_classes: int) -> float:
    """Mean hard Dice over the foreground classes 1..K-1 that occur."""
    scores = dice_scores(pred, labels, n_classes)[1:]
    scores = scores[~np.isnan(scores)]
    return float(scores.mean()) if scores.size else float("nan")


# -- optimiser and schedule --------------------------------------------------------


def lr_at(t: int, lr: float, warmup: int, total: int) -> float:
    """Learning rate for step ``t`` (1-based).

    Linear warm-up ``lr * t / warmup`` up to ``t == warmup``, then cosine
    decay that reaches exactly 0 at ``t == total``.
    """
    if t <= warmup:
        return lr * t / warmup if warmup > 0 else lr
    progress = min((t - warmup) / max(total - warmup, 1), 1.0)
    if progress >= 1.0:
        return 0.0
    return lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def decays(name: str) -> bool:
    """Weight decay applies to projection weights only (not norms, biases or embeddings)."""
    if name.endswith(".bias") or name == "pos_embed":
        return False
    module = name.rsplit(".", 1)[0]
    return "norm" not in module.rsplit(".", 1)[-1]


class AdamW:
    """AdamW with decoupled weight decay.

    Each step first shrinks decayed weights by ``1 - lr * weight_decay`` then
    applies the bias-corrected Adam update. Moments are kept in the
    parameter dtype.
    """

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for name, p in self.params.items():
            g = grads.get(name)
            if g is not None and g.shape != p.data.shape:
                raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {p.data.shape}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            dt = p.data.dtype.type
            m, v = self.m[name], self.v[name]
            m *= dt(self.beta1)
            m += dt(1.0 - self.beta1) * g
            v *= dt(self.beta2)
            v += dt(1.0 - self.beta2) * (g * g)
            if self.weight_decay and decays(name):
                p.data *= dt(1.0 - lr * self.weight_decay)
            denom = np.sqrt(v / dt(bc2)) + dt(self.eps)
            p.data -= dt(lr / bc1) * m / denom

    def state_records(self) -> dict[str, np.ndarray]:
        out = {"adam.step": np.array([self.step_count], dtype=np.int64)}
        for n in self.params:
            out[f"adam.m.{n}"] = self.m[n]
            out[f"adam.v.{n}"] = self.v[n]
        return out

    def load_records(self, records: dict[str, np.ndarray]) -> None:
        self.step_count = int(records["adam.step"][0])
        for n, p in self.params.items():
            m, v = records[f"adam.m.{n}"], records[f"adam.v.{n}"]
            if m.shape != p.data.shape or v.shape != p.data.shape:
                raise ValueError(f"optimiser state for {n!r} does not match the parameter shape")
            self.m[n] = m.astype(p.data.dtype, copy=True)
            self.v[n] = v.astype(p.data.dtype, copy=True)


def adamw_step(state: ModelState, grads: dict[str, np.ndarray], optimizer: AdamW, lr: float) -> ModelState:
    """Functional spelling of :meth:`AdamW.step`; updates ``state`` in place and returns it."""
    unknown = set(grads) - set(state.params)
    if unknown:
        raise ValueError(f"gradients for unknown parameters: {sorted(unknown)[:3]}")
    optimizer.step(grads, lr)
    return state


# -- sampling --------------------------------------------------------------------


def target_bins(targets, bins: int) -> np.ndarray:
    """Equal-width bin index over ``[min, max]`` for each target."""
    t = np.asarray(targets, dtype=np.float64)
    lo, hi = t.min(), t.max()
    if hi <= lo:
        return np.zeros(t.size, dtype=np.int64)
    return np.minimum(((t - lo) / (hi - lo) * bins).astype(np.int64), bins - 1)


def balanced_sampler(targets, bins: int, rng: np.random.Generator) -> Iterator[int]:
    """Endless index stream: a non-empty bin uniformly, then a member uniformly."""
    if bins < 1:
        raise ValueError("bins must be at least 1")
    if len(targets) == 0:
        raise ValueError("balanced_sampler needs at least one target")
    which = target_bins(targets, bins)
    members = [np.flatnonzero(which == b) for b in range(bins)]
    members = [m for m in members if m.size]
    while True:
        group = members[rng.integers(len(members))]
        yield int(group[rng.integers(group.size)])


def shuffled_sampler(n: int, rng: np.random.Generator) -> Iterator[int]:
    """Endless stream of fresh permutations of ``range(n)``."""
    if n < 1:
        raise ValueError("shuffled_sampler needs at least one sample")
    while True:
        yield from (int(i) for i in rng.permutation(n))


# -- data ------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    sample_id: str
    data_path: Path
    target: float | None
    label_path: Path | None
    split: str


class Dataset:
    """Samples listed in a manifest CSV with columns ``id, data_path, target, split``.

    ``target`` is either a number (regression) or a path to a LABL file
    (segmentation); relative paths resolve against the manifest directory.
    Per-channel mean and standard deviation come from the training split.
    """

    def __init__(self, entries: list[ManifestEntry], cache: bool = True):
        if not entries:
            raise ValueError("dataset manifest is empty")
        ids = [e.sample_id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("sample ids in a manifest must be unique (splits are disjoint)")
        kinds = {e.label_path is None for e in entries}
        if len(kinds) != 1:
            raise ValueError("manifest mixes scalar targets and label files")
        self.entries = entries
        self.task = "regression" if kinds.pop() else "segmentation"
        self._cache: dict[int, SurfaceSample] = {} if cache else None
        self.channel_mean: np.ndarray | None = None
        self.channel_std: np.ndarray | None = None

    @classmethod
    def from_manifest(cls, path, cache: bool = True) -> Dataset:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise formats.FormatError(f"cannot read manifest {path}: {exc.strerror}") from exc
        rows = list(csv.DictReader(io.StringIO(text)))
        if rows and set(rows[0]) != {"id", "data_path", "target", "split"}:
            raise formats.FormatError(f"{path}: manifest columns must be id, data_path, target, split")
        entries = []
        for r in rows:
            target, label = None, None
            try:
                target = float(r["target"])
            except ValueError:
                label = path.parent / r["target"]
            entries.append(ManifestEntry(r["id"], path.parent / r["data_path"], target, label, r["split"]))
        return cls(entries, cache)

    def __len__(self) -> int:
        return len(self.entries)

    def indices(self, split: str) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.split == split]

    def raw(self, i: int) -> SurfaceSample:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        e = self.entries[i]
        data = formats.read_surface(e.data_path)
        if data.shape[0] != 40962:
            raise formats.FormatError(f"{e.data_path}: expected 40962 vertices, got {data.shape[0]}")
        labels = formats.read_labels(e.label_path) if e.label_path is not None else None
        if labels is not None and labels.shape[0] != data.shape[0]:
            raise formats.FormatError(f"{e.label_path}: label count does not match vertex count")
        s = SurfaceSample(data, e.target, labels, e.sample_id)
        if self._cache is not None:
            self._cache[i] = s
        return s

    @property
    def n_channels(self) -> int:
        return self.raw(0).data.shape[1]

    def fit_normalisation(self, split: str = "train") -> None:
        idx = self.indices(split) or list(range(len(self)))
        total = np.zeros(self.n_channels)
        sq = np.zeros(self.n_channels)
        count = 0
        for i in idx:
            d = self.raw(i).data.astype(np.float64)
            if d.shape[1] != self.n_channels:
                raise formats.FormatError("samples have differing channel counts")
            total += d.sum(axis=0)
            sq += (d * d).sum(axis=0)
            count += d.shape[0]
        mean = total / count
        std = np.sqrt(np.maximum(sq / count - mean * mean, 0.0))
        self.channel_mean = mean
        self.channel_std = np.where(std > 1e-8, std, 1.0)

    def sample(self, i: int) -> SurfaceSample:
        """Sample ``i`` with channels standardised (float32)."""
        s = self.raw(i)
        if self.channel_mean is None:
            self.fit_normalisation()
        data = ((s.data - self.channel_mean) / self.channel_std).astype(np.float32)
        return SurfaceSample(data, s.target, s.labels, s.sample_id)

    def targets(self, idx: list[int]) -> np.ndarray:
        return np.array([self.entries[i].target for i in idx], dtype=np.float64)


# -- configuration ---------------------------------------------------------------


@dataclass
class TrainConfig:
    """Optimisation settings.

    ``iterations`` (when positive) overrides ``epochs``; otherwise the run
    lasts ``epochs * ceil(n_train / batch_size)`` optimiser steps.
    """

    task: str = "regression"
    lr: float = 1e-5
    warmup_iters: int = 1000
    epochs: int = 1000
    iterations: int = 0
    batch_size: int = 16
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    balance_bins: int = 10
    seed: int = 0
    augment: bool = True
    aug_probability: float = 0.8
    rotation_range_deg: float = 30.0
    warp_max_fraction: float = 0.125
    normalise_targets: bool = True
    eval_every: int = 1

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.task not in ("regression", "segmentation"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.balance_bins < 1 or self.eval_every < 1:
            raise ValueError("batch_size, balance_bins and eval_every must be at least 1")
        if self.warmup_iters < 0:
            raise ValueError("warmup_iters must be non-negative")

    @classmethod
    def for_task(cls, task: str, **overrides) -> TrainConfig:
        """Defaults of the regression or segmentation recipe."""
        if task == "segmentation":
            base = dict(lr=3e-4, warmup_iters=100, epochs=200, batch_size=1, rotation_range_deg=15.0)
        else:
            base = {}
        base.update(overrides)
        return cls(task=task, **base)

    def iterations_per_epoch(self, n_train: int) -> int:
        return max(1, math.ceil(n_train / self.batch_size))

    def schedule(self, n_train: int) -> tuple[int, int]:
        """``(epochs, total_iterations)`` for a training split of ``n_train`` samples."""
        ipe = self.iterations_per_epoch(n_train)
        if self.iterations > 0:
            total, epochs = self.iterations, math.ceil(self.iterations / ipe)
        else:
            total, epochs = self.epochs * ipe, self.epochs
        if self.warmup_iters >= total:
            raise ValueError(f"warmup_iters ({self.warmup_iters}) must be below the {total} total iterations")
        return epochs, total

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            probability=self.aug_probability if self.augment else 0.0,
            rotation_range_deg=self.rotation_range_deg,
            warp_max_fraction=self.warp_max_fraction,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown train config keys: {sorted(extra)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


# -- checkpoints -----------------------------------------------------------------


@dataclass
class Checkpoint:
    state: ModelState
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    channel_mean: np.ndarray | None = None
    channel_std: np.ndarray | None = None
    target_mean: float = 0.0
    target_std: float = 1.0
    train_config: dict | None = None
    iteration: int = 0


def checkpoint_records(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    sections = {"model": ckpt.state.config.to_dict()}
    if ckpt.train_config is not None:
        sections["train"] = ckpt.train_config
    text = formats.dumps_config(sections).encode("utf-8")
    rec: dict[str, np.ndarray] = {"meta.config": np.frombuffer(text, dtype=np.uint8)}
    rec["meta.iteration"] = np.array([ckpt.iteration], dtype=np.int64)
    rec["meta.target"] = np.array([ckpt.target_mean, ckpt.target_std], dtype=np.float64)
    if ckpt.channel_mean is not None:
        rec["meta.channel_mean"] = np.asarray(ckpt.channel_mean, dtype=np.float64)
        rec["meta.channel_std"] = np.asarray(ckpt.channel_std, dtype=np.float64)
    for n, p in ckpt.state.params.items():
        rec[f"param.{n}"] = p.data
    rec.update(ckpt.optimizer)
    return rec


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write the MSWT checkpoint and a readable ``.cfg`` next to it."""
    path = Path(path)
    formats.write_records(path, checkpoint_records(ckpt))
    sections = {"model": ckpt.state.config.to_dict()}
    if ckpt.train_config is not None:
        sections["train"] = ckpt.train_config
    formats.write_config(path.with_suffix(path.suffix + ".cfg"), sections)


def load_checkpoint(path) -> Checkpoint:
    rec = formats.read_records(path)
    if "meta.config" not in rec:
        raise formats.FormatError(f"{path}: checkpoint has no configuration record")
    sections = formats.loads_config(rec["meta.config"].tobytes().decode("utf-8"))
    config = ModelConfig.from_dict(sections["model"])
    params = {
        n[len("param."):]: Tensor(a, requires_grad=True, name=n[len("param."):])
        for n, a in rec.items()
        if n.startswith("param.")
    }
    expected = set(parameter_shapes(config))
    if set(params) != expected:
        missing = sorted(expected - set(params))[:3]
        raise formats.FormatError(f"{path}: checkpoint parameters do not match its config (missing {missing})")
    tm, ts = rec.get("meta.target", np.array([0.0, 1.0]))
    return Checkpoint(
        ModelState(config, params),
        {n: a for n, a in rec.items() if n.startswith("adam.")},
        rec.get("meta.channel_mean"),
        rec.get("meta.channel_std"),
        float(tm),
        float(ts),
        sections.get("train"),
        int(rec.get("meta.iteration", np.array([0]))[0]),
    )


# -- training loop ---------------------------------------------------------------


@dataclass
class TrainResult:
    state: ModelState
    history: list[dict]
    best_path: Path
    final_path: Path
    log_path: Path
    best_metric: float


def _batch_sequences(dataset, idx, maps, aug_cfg, rng, dtype):
    seqs, samples = [], []
    for i in idx:
        s = dataset.sample(i)
        if aug_cfg is not None and aug_cfg.probability > 0:
            s = apply_augmentation(s, aug_cfg, rng)
        samples.append(s)
        seqs.append(sequence_from_surface(s.data, maps))
    return np.stack(seqs).astype(dtype, copy=False), samples


def _check_finite(loss: Tensor, where: str) -> float:
    value = float(loss.data)
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss ({value}) at {where}; no checkpoint written for this step")
    return value


def evaluate(dataset: Dataset, idx: list[int], state: ModelState, target_mean=0.0, target_std=1.0) -> tuple[float, float]:
    """``(loss, metric)`` over ``idx``: (normalised MSE, MAE) or (Dice+CE loss, mean Dice)."""
    maps = default_patch_maps(state.config.shift_fraction)
    losses, metrics = [], []
    with T.no_grad():
        for i in idx:
            s = dataset.sample(i)
            seq = sequence_from_surface(s.data, maps)[None].astype(state.config.dtype)
            out = forward(seq, state, maps)
            if state.config.task == "regression":
                z = (s.target - target_mean) / target_std
                losses.append(float(mse_loss(out, [[z]]).data))
                metrics.append(abs(float(out.data.ravel()[0]) * target_std + target_mean - s.target))
            else:
                losses.append(float(dice_ce_loss(out, s.labels).data))
                pred = np.argmax(out.data[0], axis=-1)
                metrics.append(mean_dice(pred, s.labels, state.config.num_classes))
    if not losses:
        return float("nan"), float("nan")
    return float(np.mean(losses)), float(np.mean(metrics))


def _write_log(path: Path, history: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "split", "loss", "metric"])
    for row in history:
        w.writerow([row["epoch"], row["split"], repr(row["loss"]), repr(row["metric"])])
    formats.atomic_write(path, buf.getvalue().encode("utf-8"))


def train_loop(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir,
    init: ModelState | None = None,
    log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Train, log per-epoch metrics and keep the best and final checkpoints.

    Writes ``metrics.csv``, ``best.mswt`` and ``final.mswt`` under
    ``out_dir``. Best means lowest validation loss (training loss when the
    validation split is empty).

    Raises:
        ValueError: On an empty training split or inconsistent configs.
        DivergenceError: When a training loss is NaN or infinite.
    """
    if model_config.task != train_config.task:
        raise ValueError("model and train configs disagree on the task")
    if dataset.task != train_config.task:
        raise ValueError(f"dataset holds {dataset.task} samples, config asks for {train_config.task}")
    train_idx, val_idx = dataset.indices("train"), dataset.indices("val")
    if not train_idx:
        raise ValueError("the training split is empty")
    if dataset.n_channels != model_config.in_channels:
        raise ValueError(f"data has {dataset.n_channels} channels, model expects {model_config.in_channels}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = log or (lambda msg: None)

    epochs, total = train_config.schedule(len(train_idx))
    ipe = train_config.iterations_per_epoch(len(train_idx))
    root = np.random.default_rng(train_config.seed)
    init_rng, sample_rng, aug_rng, drop_rng = root.spawn(4)

    dataset.fit_normalisation("train")
    tmean, tstd = 0.0, 1.0
    if train_config.task == "regression" and train_config.normalise_targets:
        tt = dataset.targets(train_idx)
        tmean = float(tt.mean())
        tstd = float(tt.std()) if tt.size > 1 and tt.std() > 1e-8 else 1.0

    state = init.copy() if init is not None else init_state(model_config, init_rng)
    if state.config.to_dict() != model_config.to_dict():
        raise ValueError("initial state was built for a different model config")
    opt = AdamW(state.params, train_config.betas, train_config.eps, train_config.weight_decay)
    maps = default_patch_maps(model_config.shift_fraction)
    aug_cfg = train_config.augment_config()

    if train_config.task == "regression":
        stream = balanced_sampler(dataset.targets(train_idx), train_config.balance_bins, sample_rng)
    else:
        stream = shuffled_sampler(len(train_idx), sample_rng)

    def make_ckpt(it):
        return Checkpoint(
            state, opt.state_records(), dataset.channel_mean, dataset.channel_std,
            tmean, tstd, train_config.to_dict(), it,
        )

    best_path, final_path, log_path = out_dir / "best.mswt", out_dir / "final.mswt", out_dir / "metrics.csv"
    history: list[dict] = []
    best = float("inf")
    saved_best = False
    t = 0
    for epoch in range(1, epochs + 1):
        losses, metrics = [], []
        for _ in range(ipe):
            if t >= total:
                break
            t += 1
            idx = [train_idx[next(stream)] for _ in range(train_config.batch_size)]
            seq, samples = _batch_sequences(dataset, idx, maps, aug_cfg, aug_rng, model_config.dtype)
            out = forward(seq, state, maps, rng=drop_rng)
            if train_config.task == "regression":
                y = np.array([s.target for s in samples])
                loss = mse_loss(out, ((y - tmean) / tstd)[:, None])
                metrics.append(float(np.mean(np.abs(out.data.ravel() * tstd + tmean - y))))
            else:
                labels = np.stack([s.labels for s in samples])
                loss = dice_ce_loss(out, labels)
                pred = np.argmax(out.data, axis=-1)
                metrics.append(np.mean([mean_dice(p, l, model_config.num_classes) for p, l in zip(pred, labels)]))
            losses.append(_check_finite(loss, f"epoch {epoch}, iteration {t}"))
            for p in state.params.values():
                p.grad = None
            T.backward(loss)
            grads = {n: p.grad for n, p in state.params.items() if p.grad is not None}
            opt.step(grads, lr_at(t, train_config.lr, train_config.warmup_iters, total))
            for p in state.params.values():
                p.grad = None
        history.append({"epoch": epoch, "split": "train", "loss": float(np.mean(losses)), "metric": float(np.mean(metrics))})
        last_epoch = epoch == epochs or t >= total
        if epoch % train_config.eval_every == 0 or last_epoch:
            score = history[-1]["loss"]
            if val_idx:
                vl, vm = evaluate(dataset, val_idx, state, tmean, tstd)
                history.append({"epoch": epoch, "split": "val", "loss": vl, "metric": vm})
                score = vl
            if score < best or not saved_best:
                best = min(best, score)
                saved_best = True
                save_checkpoint(best_path, make_ckpt(t))
            log(f"epoch {epoch}/{epochs} iter {t}/{total} " + " ".join(
                f"{r['split']}_loss={r['loss']:.5g} {r['split']}_metric={r['metric']:.5g}"
                for r in history if r["epoch"] == epoch
            ))
        _write_log(log_path, history)
        if t >= total:
            break
    save_checkpoint(final_path, make_ckpt(t))
    return TrainResult(state, history, best_path, final_path, log_path, best)
