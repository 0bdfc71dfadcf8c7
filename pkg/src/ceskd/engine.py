"""
Training loops for scratch and distilled students.

One SGD loop serves every method; they differ only in which expert logits
feed the loss. The experiment drivers at the bottom build on ``run_path``.
"""
import time
from dataclasses import dataclass, field, replace
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from . import _random
from .curriculum import (RankedDataset, SelectionPolicy, assign_experts, bucketize,
                         epoch_iterator, single_bucket, terciles)
from .data import Dataset, augment
from .exceptions import (CheckpointError, ConfigurationError, MissingArtifactError,
                         NonFiniteError)
from .losses import (KDHyperparams, ceskd_total_loss, cross_entropy, ensemble_kd_loss)
from .nn import (LayerSpec, LRSchedule, Model, OptimizerState, backward, conv2d, dense,
                 flatten, forward, infer_shapes, init_weights, lr_at, maxpool2d,
                 predict_logits, relu, sgd_step)

METHODS = ("noKD", "blkd", "takd", "dgkd", "ceskd")


@dataclass(frozen=True)
class ModelSpec:
    """A named architecture with its capacity label."""

    name: str
    layers: tuple
    depth_tag: int
    input_shape: tuple

    def build(self, seed, dtype=np.float32):
        return init_weights(list(self.layers), seed, self.input_shape, self.depth_tag, dtype)


def architecture(tokens, input_shape, n_classes):
    """Expand architecture tokens into layer specs.

    ``"64"`` adds a dense layer of width 64 plus ReLU, ``"c16"`` a 3x3
    padded convolution with 16 channels plus ReLU, ``"p"`` a 2x2 max-pool.
    A flatten is inserted before the first dense layer that follows image
    layers, and a final dense layer maps to ``n_classes`` logits.
    """
    shape = tuple(input_shape)
    layers: List[LayerSpec] = []
    for tok in tokens:
        tok = str(tok).strip()
        if tok == "p":
            layers.append(maxpool2d(2))
        elif tok.startswith("c") and tok[1:].isdigit():
            layers += [conv2d(shape[0], int(tok[1:]), 3, 1, 1), relu()]
        elif tok.isdigit():
            if len(shape) > 1:
                layers.append(flatten())
            width = shape[0] if len(shape) == 1 else int(np.prod(shape))
            layers += [dense(width, int(tok)), relu()]
        else:
            raise ConfigurationError(f"unknown architecture token {tok!r}")
        shape = infer_shapes(layers, input_shape, complete=False)[-1]
    if len(shape) > 1:
        layers.append(flatten())
        shape = (int(np.prod(shape)),)
    layers.append(dense(shape[0], n_classes))
    infer_shapes(layers, input_shape)
    return tuple(layers)


def make_spec(name, tokens, depth_tag, input_shape, n_classes):
    return ModelSpec(name, architecture(tokens, input_shape, n_classes), int(depth_tag), tuple(input_shape))


@dataclass(frozen=True)
class RunConfig:
    epochs: int = 60
    batch_size: int = 128
    hp: KDHyperparams = KDHyperparams()
    schedule: LRSchedule = LRSchedule()
    momentum: float = 0.9
    weight_decay: float = 1e-4
    nesterov: bool = True
    seed: int = 0
    augment: bool = False
    crop_pad: int = 4
    class_balanced: bool = True
    policy: str = "baseline"
    dtype: str = "float32"

    def policy_for(self, kind=None):
        return SelectionPolicy(kind or self.policy, _random.int_seed(self.seed, "policy"))


class LogEntry(NamedTuple):
    epoch: int
    step: int
    bucket: int
    expert: str
    loss: float


@dataclass
class Metrics:
    train_loss: List[float] = field(default_factory=list)
    top1: List[float] = field(default_factory=list)
    top5: List[float] = field(default_factory=list)
    wall_clock: List[float] = field(default_factory=list)
    log: List[LogEntry] = field(default_factory=list)
    failed: bool = False
    failure: str = ""
    final: Optional[tuple] = None

    def record(self, loss, top1, top5, seconds):
        self.train_loss.append(float(loss))
        self.top1.append(float(top1))
        self.top5.append(float(top5))
        self.wall_clock.append(float(seconds))

    @property
    def final_top1(self):
        if self.final is not None:
            return self.final[0]
        return self.top1[-1] if self.top1 else float("nan")

    @property
    def final_top5(self):
        if self.final is not None:
            return self.final[1]
        return self.top5[-1] if self.top5 else float("nan")

    def epochs_to_threshold(self, theta):
        return epochs_to_threshold(self.top1, theta)


def epochs_to_threshold(accuracies, theta):
    """First (0-based) epoch whose accuracy is >= ``theta``; ``None`` if never."""
    for epoch, acc in enumerate(accuracies):
        if acc >= theta:
            return epoch
    return None


class ExpertPool:
    """Frozen experts ordered by strictly ascending ``depth_tag``."""

    def __init__(self, experts: Sequence[Model]):
        experts = sorted(experts, key=lambda m: m.depth_tag)
        tags = [m.depth_tag for m in experts]
        if not experts:
            raise ConfigurationError("expert pool is empty")
        if len(set(tags)) != len(tags):
            raise ConfigurationError(f"duplicate depth_tag in expert pool: {tags}")
        self.experts = experts

    def __len__(self):
        return len(self.experts)

    def __getitem__(self, i):
        return self.experts[i]

    def __iter__(self):
        return iter(self.experts)

    @property
    def depth_tags(self):
        return [m.depth_tag for m in self.experts]

    def checksums(self):
        return [m.checksum() for m in self.experts]


@dataclass
class DistillationPath:
    specs: List[ModelSpec]
    method: str = "ceskd"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; expected one of {METHODS}")
        tags = [s.depth_tag for s in self.specs]
        if not tags:
            raise ConfigurationError("distillation path is empty")
        if any(b >= a for a, b in zip(tags, tags[1:])):
            raise ConfigurationError(f"capacity must strictly decrease along the path, got {tags}")


def evaluate(model: Model, test: Dataset):
    """Top-1 and top-5 accuracy in percent."""
    logits = predict_logits(model, test.X)
    y = test.y
    top1 = float(np.mean(logits.argmax(axis=1) == y) * 100.0)
    k = min(5, logits.shape[1])
    topk = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    top5 = float(np.mean((topk == y[:, None]).any(axis=1)) * 100.0)
    return top1, top5


def _dtype(config):
    return np.float64 if config.dtype == "float64" else np.float32


def _train(model, train, test, config, epoch_plan, loss_fn, stream_key, describe):
    """Shared SGD loop.

    ``epoch_plan(epoch)`` returns ``(BucketPlan, bucket_to_expert)``;
    ``loss_fn(z, idx, bucket_expert)`` returns a :class:`LossValue`.
    """
    opt = OptimizerState.for_model(model, config.momentum, config.weight_decay, config.nesterov)
    metrics = Metrics()
    shuffle_seed = _random.int_seed(config.seed, "shuffle", stream_key)
    step = 0
    for epoch in range(config.epochs):
        start = time.perf_counter()
        lr = lr_at(config.schedule, epoch)
        plan, chooser = epoch_plan(epoch)
        aug_rng = _random.rng(config.seed, "augment", stream_key, epoch)
        total, count = 0.0, 0
        for idx, bucket in epoch_iterator(plan, config.batch_size, shuffle_seed, epoch):
            xb = train.X[idx]
            if config.augment and train.is_image:
                xb = augment(xb, aug_rng, pad=config.crop_pad)
            z = forward(model, xb)
            choice = chooser(bucket)
            loss = loss_fn(z, xb, idx, choice)
            if not np.isfinite(loss.value):
                metrics.failed, metrics.failure = True, f"non-finite loss at epoch {epoch} step {step}"
                return metrics
            try:
                sgd_step(model, backward(model, loss.grad), opt, lr)
            except NonFiniteError as exc:
                metrics.failed, metrics.failure = True, f"epoch {epoch} step {step}: {exc}"
                return metrics
            metrics.log.append(LogEntry(epoch, step, bucket, describe(choice), loss.value))
            total += loss.value * len(idx)
            count += len(idx)
            step += 1
        top1, top5 = evaluate(model, test)
        metrics.record(total / max(count, 1), top1, top5, time.perf_counter() - start)
    return metrics


def train_scratch(spec: ModelSpec, train: Dataset, test: Dataset, config: RunConfig, stream_key=0):
    """Plain cross-entropy training (the NOKD baseline)."""
    model = spec.build(_random.int_seed(config.seed, "init", stream_key), _dtype(config))
    plan = single_bucket(len(train))

    def loss_fn(z, xb, idx, choice):
        return cross_entropy(z, train.y[idx])

    metrics = _train(model, train, test, config, lambda epoch: (plan, lambda b: None),
                     loss_fn, stream_key, lambda choice: "-")
    return model, metrics


class _ExpertLogits:
    """Expert outputs for a batch; precomputed over the training set when inputs are not augmented."""

    def __init__(self, experts, train, config):
        self.experts = list(experts)
        self.cache = None
        if not (config.augment and train.is_image):
            self.cache = [predict_logits(m, train.X) for m in self.experts]

    def __call__(self, i, xb, idx, dtype):
        if self.cache is not None:
            z = self.cache[i][idx]
        else:
            z = forward(self.experts[i], xb, cache=False)
        return z.astype(dtype, copy=False)


def distill_step(student_spec: ModelSpec, pool, train: Dataset, test: Dataset, config: RunConfig,
                 method="ceskd", ranked: Optional[RankedDataset] = None, policy=None, stream_key=0):
    """Train one student from a frozen expert pool.

    ``blkd`` / ``takd`` need exactly one expert; ``dgkd`` averages the KD term
    over every expert; ``ceskd`` buckets the ranked curriculum into
    ``len(pool)`` buckets and lets each mini-batch consult only the expert
    assigned to its bucket.
    """
    if not isinstance(pool, ExpertPool):
        pool = ExpertPool(pool)
    if method in ("blkd", "takd") and len(pool) != 1:
        raise ConfigurationError(f"{method} distils from exactly one expert, pool has {len(pool)}")
    if method not in ("blkd", "takd", "dgkd", "ceskd"):
        raise ConfigurationError(f"distill_step does not handle method {method!r}")
    if method == "ceskd" and ranked is None:
        raise MissingArtifactError("ceskd needs a ranked curriculum (run the score command first)")
    if ranked is not None and len(ranked) != len(train):
        raise ConfigurationError(f"curriculum ranks {len(ranked)} samples, training set has {len(train)}")

    model = student_spec.build(_random.int_seed(config.seed, "init", stream_key), _dtype(config))
    dtype = model.dtype
    hp = config.hp
    experts = _ExpertLogits(pool, train, config)
    tags = pool.depth_tags

    if method == "ceskd":
        plan = bucketize(ranked, train.y, len(pool), config.class_balanced)
        policy = policy or config.policy_for()

        def epoch_plan(epoch):
            assignment = assign_experts(plan, pool, policy, epoch)
            return plan, lambda b: int(assignment[b])

        def loss_fn(z, xb, idx, e):
            return ceskd_total_loss(z, experts(e, xb, idx, dtype), train.y[idx], hp)

        describe = lambda e: str(tags[e])
    else:
        plan = single_bucket(len(train))
        epoch_plan = lambda epoch: (plan, lambda b: None)
        if method == "dgkd":
            def loss_fn(z, xb, idx, e):
                zs = [experts(i, xb, idx, dtype) for i in range(len(pool))]
                return ensemble_kd_loss(z, zs, train.y[idx], hp)
            describe = lambda e: "+".join(str(t) for t in tags)
        else:
            def loss_fn(z, xb, idx, e):
                return ceskd_total_loss(z, experts(0, xb, idx, dtype), train.y[idx], hp)
            describe = lambda e: str(tags[0])

    metrics = _train(model, train, test, config, epoch_plan, loss_fn, stream_key, describe)
    return model, metrics


def _check_teacher(teacher, spec):
    if teacher.depth_tag != spec.depth_tag:
        raise CheckpointError(
            f"teacher checkpoint has depth_tag {teacher.depth_tag}, path expects {spec.depth_tag}")
    if tuple(teacher.layers) != tuple(spec.layers) or teacher.input_shape != tuple(spec.input_shape):
        raise CheckpointError(f"teacher checkpoint architecture does not match model {spec.name!r}")


def run_path(path: DistillationPath, train, test, config: RunConfig, ranked=None,
             teacher: Optional[Model] = None, prefix=None):
    """Run a multi-step distillation path and return ``[(model, metrics), ...]``.

    The first model is ``teacher`` (checked against the path) or trained from
    scratch. The first distillation step is always BLKD from the teacher.
    Later steps use ``path.method``: TAKD from the previous model, BLKD from
    the original teacher, DGKD / CES-KD from every model produced so far.
    ``prefix`` reuses already computed leading steps.
    """
    if path.method == "noKD":
        raise ConfigurationError("noKD trains a single model; use train_scratch")
    if path.method == "ceskd" and len(path.specs) > 2 and ranked is None:
        raise MissingArtifactError("ceskd path needs a ranked curriculum (run the score command first)")
    results = list(prefix or [])
    if not results:
        if teacher is not None:
            _check_teacher(teacher, path.specs[0])
            metrics = Metrics(final=evaluate(teacher, test))
            results.append((teacher, metrics))
        else:
            results.append(train_scratch(path.specs[0], train, test, config, stream_key=0))
    for k in range(len(results), len(path.specs)):
        method = "blkd" if k == 1 else path.method
        previous = [m for m, _ in results]
        if method == "takd":
            pool = [previous[-1]]
        elif method == "blkd":
            pool = [previous[0]]
        else:
            pool = previous
        before = [m.checksum() for m in pool]
        results.append(distill_step(path.specs[k], pool, train, test, config, method,
                                    ranked=ranked, stream_key=k))
        assert before == [m.checksum() for m in pool], "expert parameters changed during distillation"
    return results


# -- experiments -------------------------------------------------------------------------

@dataclass
class ComparisonResult:
    """Final-student metrics per method and seed, plus the scratch baseline."""

    seeds: List[int]
    methods: dict            # method -> [Metrics per seed]
    scratch: List[Metrics]
    paths: dict = field(default_factory=dict)   # method -> [list of per-step Metrics per seed]

    def final_accuracy(self, method):
        runs = self.scratch if method == "noKD" else self.methods[method]
        return [m.final_top1 for m in runs]


def run_comparison(specs: Sequence[ModelSpec], train, test, config: RunConfig, ranked,
                   seeds, methods=("takd", "dgkd", "ceskd")):
    """Compare TA-based methods on one path, sharing the teacher and first step per seed."""
    out = ComparisonResult(list(seeds), {m: [] for m in methods}, [], {m: [] for m in methods})
    for seed in seeds:
        cfg = replace(config, seed=seed)
        shared = run_path(DistillationPath(list(specs[:2]), "blkd"), train, test, cfg)
        for method in methods:
            res = run_path(DistillationPath(list(specs), method), train, test, cfg,
                           ranked=ranked, prefix=shared)
            out.methods[method].append(res[-1][1])
            out.paths[method].append([m for _, m in res])
        out.scratch.append(train_scratch(specs[-1], train, test, cfg, stream_key=len(specs) - 1)[1])
    return out


@dataclass
class HypothesisResult:
    expert_tags: List[int]
    levels: tuple
    accuracy: np.ndarray          # [seed, expert, level]
    curves: dict                  # (seed, expert_tag, level) -> train-loss series

    def mean(self):
        return self.accuracy.mean(axis=0)

    def std(self):
        if self.accuracy.shape[0] < 2:
            return np.full(self.accuracy.shape[1:], np.nan)
        return self.accuracy.std(axis=0, ddof=1)


def cmd_hypothesis(expert_specs: Sequence[ModelSpec], student_spec: ModelSpec, train, test,
                   config: RunConfig, ranked, seeds):
    """Train a student by BLKD from each expert on each difficulty tercile.

    Experts are trained from scratch on the full training set for every seed.
    The student's initialisation is shared across experts and levels of one
    seed so the grid compares teachers, not initialisations.
    """
    if len({s.depth_tag for s in expert_specs}) < 2:
        raise ConfigurationError("hypothesis needs at least two experts of distinct capacity")
    expert_specs = sorted(expert_specs, key=lambda s: s.depth_tag)
    levels = ("easy", "intermediate", "difficult")
    parts = terciles(ranked, train.y, config.class_balanced)
    acc = np.zeros((len(seeds), len(expert_specs), 3))
    curves = {}
    for si, seed in enumerate(seeds):
        cfg = replace(config, seed=seed)
        experts = [train_scratch(s, train, test, cfg, stream_key=10 + i)[0]
                   for i, s in enumerate(expert_specs)]
        for ei, expert in enumerate(experts):
            for li, part in enumerate(parts):
                _, m = distill_step(student_spec, [expert], train.subset(part), test, cfg,
                                    "blkd", stream_key=99)
                acc[si, ei, li] = m.final_top1
                curves[(seed, expert.depth_tag, levels[li])] = list(m.train_loss)
    return HypothesisResult([s.depth_tag for s in expert_specs], levels, acc, curves)


@dataclass
class AblationResult:
    policies: tuple
    accuracy: dict                # policy -> [final top1 per seed]
    seeds: List[int]


def cmd_ablate_selection(specs: Sequence[ModelSpec], train, test, config: RunConfig, ranked, seeds,
                         policies=("baseline", "anti", "random")):
    """Run the last CES-KD step of a path under each selection policy."""
    if len(specs) < 3:
        raise ConfigurationError("selection ablation needs a path with at least one assistant")
    acc = {p: [] for p in policies}
    for seed in seeds:
        cfg = replace(config, seed=seed)
        prefix = run_path(DistillationPath(list(specs[:-1]), "ceskd"), train, test, cfg, ranked=ranked)
        pool = [m for m, _ in prefix]
        for p in policies:
            _, m = distill_step(specs[-1], pool, train, test, cfg, "ceskd", ranked=ranked,
                                policy=cfg.policy_for(p), stream_key=len(specs) - 1)
            acc[p].append(m.final_top1)
    return AblationResult(tuple(policies), acc, list(seeds))
