"""Training and evaluation loops plus the graph-autoencoder harness.

Runs are reproducible from the seed: parameter init, epoch shuffles, and
dropout masks all come from splitmix streams derived from it, and gradients
merge in canonical sample order even with parallel workers.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import arch as A
from . import ops
from . import tensor as T
from .coarsen import build_expansion_bigraph
from .data import GraphSample, pixel_grid
from .errors import BuildError, NumericError
from .graph import GraphSignal
from .kernels import make_kernel
from .network import Network, build_network
from .rng import SplitMix64, derive
from .tensor import Tape, Tensor, backward

__all__ = [
    "TrainConfig",
    "Adam",
    "SGD",
    "AutoencoderSpec",
    "AutoencoderNet",
    "build_autoencoder",
    "train_model",
    "evaluate_model",
    "write_metrics",
]


@dataclass
class TrainConfig:
    arch: str = ""
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    kernel: str = "ecc"
    reduction: str = "mean"
    ecc_hidden: tuple[int, ...] = (16,)
    workers: int = 1

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


class SGD:
    def __init__(self, params, lr: float):
        self.params = [t for _, t in params]
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class Adam:
    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = [t for _, t in params]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = 0.0
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * np.square(g)
            p.data -= self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def make_optimizer(cfg: TrainConfig, params):
    if cfg.optimizer == "adam":
        return Adam(params, lr=cfg.learning_rate, beta1=cfg.beta1,
                    beta2=cfg.beta2, eps=cfg.eps)
    if cfg.optimizer == "sgd":
        return SGD(params, lr=cfg.learning_rate)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}; expected 'adam' or 'sgd'")


# ---------------------------------------------------------------------------
# graph autoencoder


@dataclass
class AutoencoderSpec:
    """Encoder stages plus mirrored interpolation stages back to a pixel grid.

    The encoder spec may contain only conv/pooling layers; every layer that
    changes the node set opens a new stage. Decoder stage j interpolates onto
    encoder stage S-j's node set (the final stage targets the pixel grid) via
    a bipartite convolution. ``skip_pairs`` lists (encoder stage, decoder
    stage) pairs fused with the node-count-weighted aggregation; a pair is
    valid only when both sides share the output node set, i.e. e == S - j.
    """

    encoder: A.ArchSpec
    decoder_features: tuple[int, ...]
    decoder_radius: tuple[float, ...]
    skip_pairs: tuple[tuple[int, int], ...] = ()
    grid_shape: tuple[int, int] = (28, 28)

    def __post_init__(self):
        for layer in self.encoder.layers:
            if not isinstance(layer, (A.Conv, A.BConv, A.MaxPool, A.AvgPool)):
                raise BuildError(f"autoencoder encoder cannot contain {layer!r}")
        stages = sum(isinstance(l, (A.BConv, A.MaxPool, A.AvgPool))
                     for l in self.encoder.layers)
        if stages < 1:
            raise BuildError("encoder must coarsen the node set at least once")
        if len(self.decoder_features) != stages or len(self.decoder_radius) != stages:
            raise BuildError(f"decoder needs exactly {stages} feature dims and radii")
        for e, d in self.skip_pairs:
            if not (1 <= d <= stages - 1 and e == stages - d):
                raise BuildError(f"skip pair ({e}, {d}) does not reference matching "
                                 f"node sets (need e == {stages}-d with 1 <= d < {stages})")
        self.num_stages = stages


class AutoencoderNet:
    """Encoder network plus bipartite-conv decoder with optional skips."""

    def __init__(self, spec: AutoencoderSpec, input_dim: int, seed: int,
                 spatial_dim: int = 2):
        self.spec = spec
        self.input_dim = input_dim
        self.spatial_dim = spatial_dim
        self.seed = seed
        rng = SplitMix64(derive(seed, 0xAE))
        enc_spec = spec.encoder
        self.encoder = build_network(enc_spec, input_dim, derive(seed, 0xE),
                                     spatial_dim=spatial_dim, head=False)
        self.grid = pixel_grid(*spec.grid_shape)

        enc_dims = self._encoder_stage_dims()
        self.dec_kernels = []
        self.dec_biases = []
        self.skip_kernels: dict[int, object] = {}
        self.skip_biases: dict[int, Tensor] = {}
        skip_of = {d: e for e, d in spec.skip_pairs}
        cur = enc_dims[-1]
        for j, feat in enumerate(spec.decoder_features, start=1):
            self.dec_kernels.append(make_kernel(enc_spec.kernel, spatial_dim, cur, feat,
                                                rng, ecc_hidden=enc_spec.ecc_hidden))
            self.dec_biases.append(T.parameter(np.zeros(feat)))
            if j in skip_of:
                e = skip_of[j]
                self.skip_kernels[j] = make_kernel(enc_spec.kernel, spatial_dim,
                                                   enc_dims[e], feat, rng,
                                                   ecc_hidden=enc_spec.ecc_hidden)
                self.skip_biases[j] = T.parameter(np.zeros(feat))
            cur = feat
        self._structure_cache: dict[int, list] = {}

    def _encoder_stage_dims(self) -> list[int]:
        """Feature dim at each stage boundary, stage 0 = raw input."""
        dims = [self.input_dim]
        cur = self.input_dim
        for layer in self.spec.encoder.layers:
            if isinstance(layer, (A.Conv, A.BConv)):
                cur = layer.features
            if isinstance(layer, (A.BConv, A.MaxPool, A.AvgPool)):
                dims.append(cur)
        return dims

    def parameters(self) -> list[tuple[str, Tensor]]:
        named = [(f"enc.{n}", t) for n, t in self.encoder.parameters()]
        for j, (k, b) in enumerate(zip(self.dec_kernels, self.dec_biases), start=1):
            named.extend((f"dec{j}.{n}", t) for n, t in k.parameters())
            named.append((f"dec{j}.bias", b))
        for j in sorted(self.skip_kernels):
            named.extend((f"skip{j}.{n}", t) for n, t in self.skip_kernels[j].parameters())
            named.append((f"skip{j}.bias", self.skip_biases[j]))
        return named

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.parameters())

    def zero_grad(self) -> None:
        for _, t in self.parameters():
            t.zero_grad()

    def _stage_positions(self, sample) -> list[np.ndarray]:
        positions = [sample.graph.positions]
        pos = sample.graph.positions
        graph = sample.graph
        pending = None
        for layer in self.encoder.layers:
            _, pos, graph, pending = layer.prepare(pos, graph, pending)
            if getattr(layer, "resolution", None) is not None:
                positions.append(pos)
        return positions

    def _structures(self, sample):
        key = getattr(sample, "key", None)
        if key is not None and key in self._structure_cache:
            return self._structure_cache[key]
        stage_pos = self._stage_positions(sample)
        s = self.spec.num_stages
        skip_of = {d: e for e, d in self.spec.skip_pairs}
        stages = []
        for j in range(1, s + 1):
            src_pos = stage_pos[s - j + 1]
            dst_pos = stage_pos[s - j] if j < s else self.grid
            bg = build_expansion_bigraph(src_pos, dst_pos, self.spec.decoder_radius[j - 1])
            skip_bg = None
            if j in skip_of:
                e_pos = stage_pos[skip_of[j]]
                skip_bg = build_expansion_bigraph(e_pos, dst_pos,
                                                  self.spec.decoder_radius[j - 1])
            stages.append((bg, skip_bg))
        out = (stage_pos, stages)
        if key is not None:
            self._structure_cache[key] = out
        return out

    def forward(self, sample, train: bool = False, rng: Optional[SplitMix64] = None,
                counters=None) -> Tensor:
        """Encode, then interpolate back to the grid; returns (grid, C) features."""
        stage_pos, structures = self._structures(sample)
        ctx_plans = self.encoder.plans(sample)
        sig = sample.signal
        stage_feats = [sig]
        from .network import _Ctx

        ctx = _Ctx(train=train, rng=rng, counters=counters)
        for layer, plan in zip(self.encoder.layers, ctx_plans):
            sig = layer.forward(sig, plan, ctx)
            if getattr(layer, "resolution", None) is not None:
                stage_feats.append(sig)

        s = self.spec.num_stages
        skip_of = {d: e for e, d in self.spec.skip_pairs}
        cur = stage_feats[-1]
        for j in range(1, s + 1):
            bg, skip_bg = structures[j - 1]
            n1 = cur.num_nodes
            out = ops.bipartite_conv(bg, cur, self.dec_kernels[j - 1], "mean",
                                     bias=self.dec_biases[j - 1], counters=counters)
            if skip_bg is not None:
                e = skip_of[j]
                skip_in = stage_feats[e]
                skip_out = ops.bipartite_conv(skip_bg, skip_in, self.skip_kernels[j],
                                              "mean", bias=self.skip_biases[j],
                                              counters=counters)
                out = ops.aggregate(out, skip_out, n1, skip_in.num_nodes)
            if j < s:
                out = GraphSignal(T.apply_activation(out.features, "relu"))
            cur = out
        return cur.features


def build_autoencoder(spec: AutoencoderSpec, input_dim: int, seed: int,
                      spatial_dim: int = 2) -> AutoencoderNet:
    return AutoencoderNet(spec, input_dim, seed, spatial_dim=spatial_dim)


# ---------------------------------------------------------------------------
# losses


def classification_loss(model, sample, train: bool, rng) -> tuple[Tensor, float]:
    logits = model.forward(sample, train=train, rng=rng)
    if logits.shape[0] != 1:
        raise ValueError(f"classifier produced {logits.shape[0]} rows; the architecture "
                         "must reduce to one node (GMP or full coarsening) before FC")
    loss = T.cross_entropy(logits, [sample.target])
    correct = float(int(np.argmax(logits.data[0])) == sample.target)
    return loss, correct


def reconstruction_loss(model, sample, train: bool, rng) -> tuple[Tensor, float]:
    pred = model.forward(sample, train=train, rng=rng)
    target = np.asarray(sample.target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = T.sub(pred, Tensor(target))
    loss = T.mean_all(T.mul(diff, diff))
    return loss, loss.item()


_TASKS = {"classify": classification_loss, "reconstruct": reconstruction_loss}


# ---------------------------------------------------------------------------
# training loop


def _sample_pass(model, sample, task_fn, scale: float, train: bool, rng):
    """Forward/backward one sample; returns (scaled loss value, metric, grads)."""
    grads: dict[int, np.ndarray] = {}
    with Tape() as tape:
        loss, metric = task_fn(model, sample, train, rng)
        scaled = T.scale(loss, scale)
    backward(scaled, tape, grads_out=grads)
    return loss.item(), metric, grads


def train_model(cfg: TrainConfig, train_set: list[GraphSample],
                test_set: Optional[list[GraphSample]] = None, task: str = "classify",
                model=None, out_dir=None, stop_accuracy: Optional[float] = None,
                log=None):
    """Train a model and return (model, per-epoch metrics history).

    The model is built from ``cfg.arch`` when not supplied. With equal seeds
    and a single worker, two runs produce bit-identical histories (modulo
    wall-clock fields) and checkpoints.
    """
    if task not in _TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {sorted(_TASKS)}")
    task_fn = _TASKS[task]
    train_set = [s for s in train_set if s.graph.num_nodes > 0]
    if not train_set:
        raise ValueError("training set is empty")

    if model is None:
        if task != "classify":
            raise ValueError("pass a model explicitly for reconstruction tasks")
        spec = A.parse_arch(cfg.arch).with_config(
            kernel=cfg.kernel, reduction=cfg.reduction, ecc_hidden=tuple(cfg.ecc_hidden))
        spatial_dim = train_set[0].graph.positions.shape[1]
        model = build_network(spec, train_set[0].signal.feature_dim, cfg.seed,
                              spatial_dim=spatial_dim)

    params = model.parameters()
    opt = make_optimizer(cfg, params)
    param_list = [t for _, t in params]
    shuffle_rng = SplitMix64(derive(cfg.seed, 0x5F))
    history: list[dict] = []
    metric_name = "accuracy" if task == "classify" else "mse"

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = list(range(len(train_set)))
        shuffle_rng.shuffle(order)
        loss_sum = 0.0
        metric_sum = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            scale = 1.0 / len(batch)
            rngs = [SplitMix64(derive(cfg.seed, 0xD0, epoch, pos)) for pos in batch]
            jobs = [(train_set[pos], rngs[k]) for k, pos in enumerate(batch)]
            try:
                if cfg.workers == 1:
                    results = [_sample_pass(model, s, task_fn, scale, True, r)
                               for s, r in jobs]
                else:
                    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                        results = list(pool.map(
                            lambda sr: _sample_pass(model, sr[0], task_fn, scale, True, sr[1]),
                            jobs))
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}: {exc}") from exc
            for loss_val, metric, grads in results:
                loss_sum += loss_val
                metric_sum += metric
                for p in param_list:
                    g = grads.get(id(p))
                    if g is not None:
                        if p.grad is None:
                            p.grad = np.zeros_like(p.data)
                        p.grad += g
            opt.step()
            opt.zero_grad()
        wall = (time.perf_counter() - t0) * 1000.0
        entry = {"epoch": epoch, "split": "train",
                 "loss": loss_sum / len(order),
                 metric_name: metric_sum / len(order),
                 "wall_ms": wall}
        history.append(entry)
        if log:
            log(entry)
        if test_set is not None:
            t0 = time.perf_counter()
            metrics = evaluate_model(model, test_set, task)
            entry = {"epoch": epoch, "split": "test", "loss": metrics["loss"],
                     metric_name: metrics[metric_name],
                     "wall_ms": (time.perf_counter() - t0) * 1000.0}
            history.append(entry)
            if log:
                log(entry)
            if stop_accuracy is not None and task == "classify" \
                    and metrics["accuracy"] >= stop_accuracy:
                break

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_metrics(out_dir / "metrics.jsonl", history)
        T.save_checkpoint(out_dir / "ckpt.txt", model.parameters())
    return model, history


def evaluate_model(model, dataset: list[GraphSample], task: str = "classify") -> dict:
    """Mean loss plus accuracy (classify) or mse (reconstruct) over a dataset."""
    if task not in _TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {sorted(_TASKS)}")
    dataset = [s for s in dataset if s.graph.num_nodes > 0]
    if not dataset:
        raise ValueError("evaluation dataset is empty")
    task_fn = _TASKS[task]
    loss_sum = 0.0
    metric_sum = 0.0
    for sample in dataset:
        loss, metric = task_fn(model, sample, False, None)
        loss_sum += loss.item()
        metric_sum += metric
    name = "accuracy" if task == "classify" else "mse"
    return {"loss": loss_sum / len(dataset), name: metric_sum / len(dataset)}


def write_metrics(path, history: list[dict]) -> None:
    with open(path, "w") as fh:
        for entry in history:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
