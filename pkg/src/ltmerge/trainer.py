"""Training loop with warm-up, per-epoch cluster statistics, evaluation and checkpoints.

Epochs are numbered from 0.  Epochs ``t < t_warm`` train the plain network
(mask modules bypassed).  From epoch ``t_warm`` on, every minibatch forward
generates masks, and chained blocks take one IBB descent step using the
cluster state fitted at the end of the previous epoch.  At the end of each
epoch from ``t_warm - 1`` on, merged tokens are re-clustered per block, Q and
the class prior are re-estimated, and one IB record per block is emitted.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ib
from . import numerics as nx
from .data import Dataset, load_idx, synthetic_blobs
from .numerics import Tape, Tensor
from .transformer import LTMNet, MaskInputs, ModelSpec

MAGIC = b"LTMCKPT1"
FORMAT_VERSION = 1
IB_COLUMNS = ["epoch", "layer", "I_xtilde_x", "I_xtilde_y", "ib_loss", "ibb", "c0"]


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


# ------------------------------------------------------------------ config


@dataclass
class TrainConfig:
    # schedule
    epochs: int = 60
    t_warm: int = 20
    batch_size: int = 32
    lr_start: float = 0.001
    lr_peak: float = 0.01
    lr_end: float = 0.001
    lr_warmup_epochs: int = 5
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    momentum: float = 0.0
    # model
    depth: int = 2
    ratio: float | list = 0.5
    style: str | list = "regular"
    dim: int = 32
    heads: int = 1
    mlp_ratio: int = 2
    patch: int = 4
    tau: float = 0.5
    eta: float = 1.0
    merge: bool = True
    dtype: str = "f32"
    seed: int = 0
    kmeans_subsample: int = 2048
    # data
    data: str = "synthetic-blobs"
    image_size: int = 16
    num_classes: int = 3
    train_per_class: int = 100
    test_per_class: int = 50
    noise: float = 0.1
    data_seed: int = 0
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    # outputs
    checkpoint_path: str = "ltm.ckpt"
    report_path: str = "ib_report.csv"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if not 0 <= self.t_warm <= self.epochs:
            raise ConfigError("t_warm must lie in [0, epochs]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.data not in ("synthetic-blobs", "idx"):
            raise ConfigError(f"unknown data source {self.data!r}")

    @classmethod
    def full_scale(cls, **kw) -> "TrainConfig":
        """Full-scale schedule: 300 epochs, 100 warm-up, batch 1024, lr 2e-4 -> 2e-3 -> 2e-4."""
        base = dict(epochs=300, t_warm=100, batch_size=1024, lr_start=2e-4, lr_peak=2e-3,
                    lr_end=2e-4, lr_warmup_epochs=10)
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed config: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def model_spec(self) -> ModelSpec:
        try:
            return ModelSpec.build(self.depth, self.ratio, self.style, image_size=self.image_size,
                                   patch=self.patch, dim=self.dim, heads=self.heads,
                                   mlp_ratio=self.mlp_ratio, num_classes=self.num_classes,
                                   tau=self.tau, eta=self.eta)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def load_data(self) -> tuple[Dataset, Dataset]:
        if self.data == "synthetic-blobs":
            kw = dict(image_size=self.image_size, classes=self.num_classes, noise=self.noise,
                      seed=self.data_seed)
            return (synthetic_blobs(per_class=self.train_per_class, stream=0, **kw),
                    synthetic_blobs(per_class=self.test_per_class, stream=1, **kw))
        if not (self.train_images and self.train_labels and self.test_images and self.test_labels):
            raise ConfigError("idx data needs train/test image and label paths")
        return (load_idx(self.train_images, self.train_labels),
                load_idx(self.test_images, self.test_labels))


def lr_at(config: TrainConfig, step: int, steps_per_epoch: int) -> float:
    """Linear warm-up from lr_start to lr_peak, then cosine decay to lr_end."""
    warm = config.lr_warmup_epochs * steps_per_epoch
    total = config.epochs * steps_per_epoch
    if step < warm:
        return config.lr_start + (config.lr_peak - config.lr_start) * step / warm
    span = max(total - warm, 1)
    t = min((step - warm) / span, 1.0)
    return config.lr_end + 0.5 * (config.lr_peak - config.lr_end) * (1 + math.cos(math.pi * t))


# --------------------------------------------------------------- optimizers


class Optimizer:
    kind = ""

    def __init__(self, config: TrainConfig, names):
        self.config = config
        self.names = list(names)
        self.step_count = 0
        self.slots: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, lr: float):
        """Update every parameter present in ``grads``; absent ones (unused
        modules) are left alone, weight decay included."""
        raise NotImplementedError


class AdamW(Optimizer):
    kind = "adamw"

    def step(self, params, grads, lr):
        c = self.config
        self.step_count += 1
        t = self.step_count
        for name in self.names:
            if name not in grads:
                continue
            p = params[name].data
            dt = p.dtype.type
            g = grads[name]
            m = self.slots.get("m/" + name)
            v = self.slots.get("v/" + name)
            if m is None:
                m, v = np.zeros_like(p), np.zeros_like(p)
            m = dt(c.beta1) * m + dt(1 - c.beta1) * g
            v = dt(c.beta2) * v + dt(1 - c.beta2) * g * g
            mhat = m / dt(1 - c.beta1 ** t)
            vhat = v / dt(1 - c.beta2 ** t)
            upd = mhat / (np.sqrt(vhat) + dt(c.adam_eps)) + dt(c.weight_decay) * p
            params[name].data = (p - dt(lr) * upd).astype(p.dtype)
            self.slots["m/" + name], self.slots["v/" + name] = m, v


class SGD(Optimizer):
    kind = "sgd"

    def step(self, params, grads, lr):
        c = self.config
        self.step_count += 1
        for name in self.names:
            if name not in grads:
                continue
            p = params[name].data
            dt = p.dtype.type
            g = grads[name] + dt(c.weight_decay) * p
            if c.momentum:
                buf = self.slots.get("buf/" + name)
                buf = g if buf is None else dt(c.momentum) * buf + g
                self.slots["buf/" + name] = buf
                g = buf
            params[name].data = (p - dt(lr) * g).astype(p.dtype)


def make_optimizer(config: TrainConfig, names) -> Optimizer:
    return (AdamW if config.optimizer == "adamw" else SGD)(config, names)


# ------------------------------------------------------------------ reports


@dataclass
class IBRecord:
    epoch: int
    layer: int
    I_xtilde_x: float
    I_xtilde_y: float
    ib_loss: float
    ibb: float
    c0: float

    @property
    def margin(self) -> float:
        """Slack in IB <= IBB - C0; non-negative when the bound holds."""
        return self.ibb - self.c0 - self.ib_loss


@dataclass
class IBReport:
    records: list[IBRecord] = field(default_factory=list)
    tag: str = ""

    def epoch(self, e: int) -> list[IBRecord]:
        return [r for r in self.records if r.epoch == e]

    def final(self) -> list[IBRecord]:
        return self.epoch(self.records[-1].epoch) if self.records else []

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(IB_COLUMNS)
        for r in self.records:
            w.writerow([r.epoch, r.layer] + [repr(float(getattr(r, c))) for c in IB_COLUMNS[2:]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "IBReport":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != IB_COLUMNS:
            raise ValueError("not an IB report")
        return cls([IBRecord(int(r[0]), int(r[1]), *map(float, r[2:])) for r in rows[1:]])


def ib_record(epoch, layer, phi_t, phi_x, labels, Q, C) -> IBRecord:
    probs = ib.estimate_probs(phi_t, phi_x, labels, C)
    ixx = ib.mutual_info(probs.joint_tx)
    ixy = ib.mutual_info(probs.joint_ty)
    return IBRecord(epoch, layer, ixx, ixy, ixx - ixy, ib.ibb_value(phi_t, phi_x, labels, Q),
                    ib.c0_const(phi_x))


# -------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    spec: ModelSpec
    config: TrainConfig
    params: dict  # name -> ndarray
    epoch: int  # completed epochs
    optimizer: dict  # {"kind", "step", "slots": {name: ndarray}}
    input_centroids: np.ndarray
    states: list  # per block ClusterState or None
    rng_state: dict

    def model(self) -> LTMNet:
        return LTMNet(self.spec, {k: Tensor(v.copy(), requires_grad=True) for k, v in self.params.items()})

    @property
    def merging(self) -> bool:
        """Whether inference runs with token merging."""
        return self.config.merge and self.epoch > self.config.t_warm


def _tensor_items(ck: Checkpoint):
    for k, v in ck.params.items():
        yield "param/" + k, v
    for k, v in ck.optimizer["slots"].items():
        yield "opt/" + k, v
    yield "input_centroids", ck.input_centroids
    for i, s in enumerate(ck.states):
        if s is None:
            continue
        yield f"state/{i}/merged_centroids", s.merged_centroids
        yield f"state/{i}/input_centroids", s.input_centroids
        yield f"state/{i}/Q", s.Q
        yield f"state/{i}/prior", s.prior


def save_checkpoint(ck: Checkpoint, path):
    items = list(_tensor_items(ck))
    tensors = []
    for name, arr in items:
        arr = np.asarray(arr)
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": nx.dtype_tag(arr.dtype)})
    meta = {
        "version": FORMAT_VERSION,
        "spec": ck.spec.to_dict(),
        "config": ck.config.to_dict(),
        "epoch": ck.epoch,
        "optimizer": {"kind": ck.optimizer["kind"], "step": ck.optimizer["step"]},
        "states": [None if s is None else {"epoch": s.epoch} for s in ck.states],
        "rng_state": ck.rng_state,
        "tensors": tensors,
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, arr in items:
            a = np.asarray(arr)
            f.write(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC):
        raise TruncatedCheckpointError(f"{path}: shorter than the magic header")
    if raw[:8] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (magic {raw[:8]!r})")
    if len(raw) < 12:
        raise TruncatedCheckpointError(f"{path}: metadata length missing")
    (mlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + mlen:
        raise TruncatedCheckpointError(f"{path}: metadata truncated")
    try:
        meta = json.loads(raw[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable metadata: {e}") from None
    if meta.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {meta.get('version')}, "
                                   f"expected {FORMAT_VERSION}")
    off = 12 + mlen
    arrays = {}
    for t in meta["tensors"]:
        dt = nx.as_dtype(t["dtype"]).newbyteorder("<")
        count = int(np.prod(t["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if len(raw) < off + nbytes:
            raise TruncatedCheckpointError(f"{path}: payload for {t['name']} truncated")
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(t["shape"])
        arrays[t["name"]] = arr.astype(arr.dtype.newbyteorder("="))
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")

    states = []
    for i, s in enumerate(meta["states"]):
        if s is None:
            states.append(None)
            continue
        k = f"state/{i}/"
        states.append(ib.ClusterState(arrays[k + "merged_centroids"], arrays[k + "input_centroids"],
                                      arrays[k + "Q"], arrays[k + "prior"], s["epoch"]))
    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
    slots = {k[4:]: v for k, v in arrays.items() if k.startswith("opt/")}
    return Checkpoint(
        spec=ModelSpec.from_dict(meta["spec"]),
        config=TrainConfig.from_dict(meta["config"]),
        params=params,
        epoch=meta["epoch"],
        optimizer={"kind": meta["optimizer"]["kind"], "step": meta["optimizer"]["step"], "slots": slots},
        input_centroids=arrays["input_centroids"],
        states=states,
        rng_state=meta["rng_state"],
    )


# ------------------------------------------------------------ statistics


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def block_representations(net: LTMNet, ds: Dataset, merge: bool, states, phi_x,
                          labels=None, batch_size: int = 64) -> list[np.ndarray]:
    """Per-block flattened X~ for every sample, masks generated per sample."""
    reps: list[list[np.ndarray]] = [[] for _ in range(net.spec.depth)]
    for sl in _batches(len(ds), batch_size):
        ctx = MaskInputs(states, phi_x[sl], None if labels is None else labels[sl], "sample")
        _, traces = net.forward(ds.images[sl], merge=merge, ctx=ctx, trace=True)
        for i, tr in enumerate(traces):
            reps[i].append(tr.rep.reshape(tr.rep.shape[0], -1))
    return [np.concatenate(r) for r in reps]


def fit_epoch_states(net: LTMNet, ds: Dataset, merge: bool, states, phi_x, input_centroids,
                     config: TrainConfig, epoch: int) -> tuple[list, list[IBRecord]]:
    """Re-cluster each block's merged tokens; return new states and IB records."""
    n = len(ds)
    idx = np.arange(n)
    if n > config.kmeans_subsample:
        idx = np.sort(nx.make_rng(config.seed, 4, epoch).choice(n, config.kmeans_subsample,
                                                                 replace=False))
    sub = ds.subset(idx)
    C = config.num_classes
    reps = block_representations(net, sub, merge, states, phi_x[idx], sub.labels)
    new_states, records = [], []
    for layer, rep in enumerate(reps):
        st = ib.fit_state(rep, phi_x[idx], sub.labels, input_centroids, C,
                          nx.make_rng(config.seed, 3, epoch, layer), epoch)
        new_states.append(st)
        phi_t = ib.soft_assign(rep, st.merged_centroids)
        records.append(ib_record(epoch, layer, phi_t, phi_x[idx], sub.labels, st.Q, C))
    return new_states, records


# -------------------------------------------------------------------- train


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    report: IBReport
    history: list[dict]


def _check_classes(ds: Dataset, C: int):
    counts = np.bincount(ds.labels, minlength=C)
    if len(counts) > C:
        raise TrainingError(f"labels exceed num_classes={C}")
    if (counts == 0).any():
        raise TrainingError(f"classes with no samples: {np.flatnonzero(counts == 0).tolist()}")


def train(config: TrainConfig, train_set: Dataset, *, resume: Checkpoint | None = None,
          stop_after: int | None = None, on_epoch: Callable | None = None) -> TrainResult:
    """Run (or continue) training; ``stop_after`` ends early after that many epochs."""
    spec = config.model_spec()
    C = config.num_classes
    _check_classes(train_set, C)
    n = len(train_set)
    flat = train_set.flat()

    if resume is None:
        net = LTMNet.create(spec, config.seed, config.dtype)
        opt = make_optimizer(config, net.params)
        rng = nx.make_rng(config.seed, 1)
        input_centroids = ib.kmeans(flat, C, nx.make_rng(config.seed, 2))
        states: list = [None] * spec.depth
        start = 0
    else:
        net = resume.model()
        opt = make_optimizer(config, net.params)
        opt.step_count = resume.optimizer["step"]
        opt.slots = {k: v.copy() for k, v in resume.optimizer["slots"].items()}
        rng = nx.make_rng(config.seed, 1)
        rng.bit_generator.state = resume.rng_state
        input_centroids = resume.input_centroids
        states = list(resume.states)
        start = resume.epoch

    phi_x = ib.soft_assign(flat, input_centroids)
    names = list(net.params)
    steps_per_epoch = math.ceil(n / config.batch_size)
    report = IBReport(tag="train")
    history = []
    end = config.epochs if stop_after is None else min(config.epochs, stop_after)

    for epoch in range(start, end):
        ltm = config.merge and epoch >= config.t_warm
        perm = rng.permutation(n)
        losses, correct = [], 0
        for sl in _batches(n, config.batch_size):
            idx = perm[sl]
            ctx = MaskInputs(states, phi_x[idx], train_set.labels[idx], "batch") if ltm else None
            with Tape() as tape, np.errstate(over="ignore", invalid="ignore"):
                try:
                    logits = net.forward(train_set.images[idx], merge=ltm, ctx=ctx)
                    loss = nx.cross_entropy(logits, train_set.labels[idx])
                except nx.NumericsError as e:
                    raise TrainingError(f"epoch {epoch}, step {opt.step_count}: {e}") from None
                found = tape.backward(loss)
            grads = {k: found[net.params[k]] for k in names if net.params[k] in found}
            if not np.isfinite(loss.item()):
                raise TrainingError(f"epoch {epoch}: non-finite loss")
            opt.step(net.params, grads,
                     lr_at(config, opt.step_count, steps_per_epoch))
            losses.append(loss.item() * len(idx))
            correct += int((logits.data.argmax(axis=1) == train_set.labels[idx]).sum())

        if epoch + 1 >= config.t_warm:
            states, records = fit_epoch_states(net, train_set, config.merge, states, phi_x,
                                               input_centroids, config, epoch)
            report.records.extend(records)
        history.append({"epoch": epoch, "loss": float(np.sum(losses) / n),
                        "train_acc": correct / n, "merging": ltm})
        if on_epoch is not None:
            on_epoch(history[-1])

    ck = Checkpoint(
        spec=spec, config=config,
        params={k: t.data.copy() for k, t in net.params.items()},
        epoch=end,
        optimizer={"kind": opt.kind, "step": opt.step_count,
                   "slots": {k: v.copy() for k, v in sorted(opt.slots.items())}},
        input_centroids=input_centroids,
        states=states,
        rng_state=rng.bit_generator.state,
    )
    return TrainResult(ck, report, history)


# ----------------------------------------------------------------- evaluate


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    report: IBReport
    logits: np.ndarray = field(repr=False)


def evaluate(ck: Checkpoint, ds: Dataset, batch_size: int = 64) -> EvalResult:
    """Label-free inference plus per-layer IB statistics under the frozen states."""
    spec = ck.spec
    if ck.config.model_spec() != spec:
        raise CheckpointError("checkpoint spec does not match its training config")
    if set(ck.params) != set(spec_param_names(spec)):
        raise CheckpointError("checkpoint parameters do not match the model spec")
    net = ck.model()
    merge = ck.merging
    phi_x = ib.soft_assign(ds.flat(), ck.input_centroids)
    outs = []
    for sl in _batches(len(ds), batch_size):
        ctx = MaskInputs(ck.states, phi_x[sl], None, "sample")
        outs.append(net.forward(ds.images[sl], merge=merge, ctx=ctx).data)
    logits = np.concatenate(outs)
    loss = nx.cross_entropy(Tensor(logits.astype(np.float64)), ds.labels).item()
    acc = float((logits.argmax(axis=1) == ds.labels).mean())

    C = spec.num_classes
    reps = block_representations(net, ds, merge, ck.states, phi_x, None, batch_size)
    report = IBReport(tag="eval")
    for layer, rep in enumerate(reps):
        st = ck.states[layer]
        if st is None or st.merged_centroids.shape[1] != rep.shape[1]:
            st = ib.fit_state(rep, phi_x, ds.labels, ck.input_centroids, C,
                              nx.make_rng(ck.config.seed, 5, layer))
        phi_t = ib.soft_assign(rep, st.merged_centroids)
        report.records.append(ib_record(ck.epoch, layer, phi_t, phi_x, ds.labels, st.Q, C))
    return EvalResult(acc, loss, report, logits)


def spec_param_names(spec: ModelSpec) -> list[str]:
    from .transformer import init_params

    return list(init_params(spec, 0))


def export_masks(ck: Checkpoint, ds: Dataset, block: int, samples) -> str:
    """CSV of one block's inference-time mask for the chosen samples."""
    if not 0 <= block < ck.spec.depth:
        raise ValueError(f"block {block} out of range")
    samples = [int(s) for s in samples]
    if any(not 0 <= s < len(ds) for s in samples):
        raise ValueError("sample index out of range")
    net = ck.model()
    sub = ds.subset(samples)
    phi_x = ib.soft_assign(sub.flat(), ck.input_centroids)
    ctx = MaskInputs(ck.states, phi_x, None, "sample")
    _, traces = net.forward(sub.images, merge=True, ctx=ctx, trace=True)
    G = traces[block].mask
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample", "token_index", "merged_index", "weight"])
    if G is None:
        return buf.getvalue()
    g = G.data
    for k, s in enumerate(samples):
        for i in range(g.shape[1]):
            for p in range(g.shape[2]):
                w.writerow([s, i, p, repr(float(g[k, i, p]))])
    return buf.getvalue()
