"""Difficulty scoring, ranking, bucketing, expert assignment and pacing.

The data curriculum is computed once per experiment: a reference model
scores every training sample by its cross-entropy, samples are ranked from
easy to hard, and the ranking is cut into ``L`` buckets, one per expert.
"""
from dataclasses import dataclass
from typing import Iterator, List, NamedTuple, Tuple

import numpy as np

from .exceptions import ConfigurationError, DataError, ParseError
from .losses import per_sample_cross_entropy
from .nn import predict_logits

POLICIES = ("baseline", "anti", "random")
CURRICULUM_MAGIC = "# ceskd-curriculum"
CURRICULUM_VERSION = 1


class ScoredSample(NamedTuple):
    sample_index: int
    class_label: int
    score: float


@dataclass
class RankedDataset:
    """Sample indices sorted from easiest to hardest, with aligned scores."""

    order: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return len(self.order)


@dataclass
class BucketPlan:
    L: int
    buckets: List[np.ndarray]
    class_balanced: bool = False

    def bucket_of(self):
        """Map ``sample_index -> bucket`` as a dict."""
        return {int(i): b for b, idx in enumerate(self.buckets) for i in idx}

    @property
    def n_samples(self):
        return sum(len(b) for b in self.buckets)


@dataclass(frozen=True)
class SelectionPolicy:
    kind: str = "baseline"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in POLICIES:
            raise ConfigurationError(f"unknown selection policy {self.kind!r}; expected one of {POLICIES}")


def score_dataset(reference, X, y) -> List[ScoredSample]:
    """Score each sample by the reference model's cross-entropy at ``T = 1``."""
    y = np.asarray(y)
    if len(y) == 0:
        raise DataError("cannot score an empty dataset")
    k = reference.num_classes
    if y.min() < 0 or y.max() >= k:
        raise DataError(f"labels must lie in [0, {k}); got range [{y.min()}, {y.max()}]")
    scores = per_sample_cross_entropy(predict_logits(reference, X), y)
    return [ScoredSample(i, int(c), float(s)) for i, (c, s) in enumerate(zip(y, scores))]


def rank(scored) -> RankedDataset:
    """Stable ascending sort by score; ties go to the lower sample index."""
    idx = np.array([s.sample_index for s in scored], dtype=np.int64)
    sc = np.array([s.score for s in scored], dtype=np.float64)
    if not np.all(np.isfinite(sc)):
        raise DataError("all difficulty scores must be finite")
    perm = np.lexsort((idx, sc))
    return RankedDataset(order=idx[perm], scores=sc[perm])


def bucketize(ranked: RankedDataset, labels, L, class_balanced=False) -> BucketPlan:
    """Cut a ranking into ``L`` easy-to-hard buckets.

    Unbalanced: contiguous slices, the first ``n mod L`` buckets one larger.
    Balanced: each class's ranked members are cut into ``L`` contiguous runs
    and bucket ``j`` collects run ``j`` of every class. Per-class remainders
    are handed out round-robin across classes so total bucket sizes also
    stay within one of each other.
    """
    n = len(ranked)
    L = int(L)
    if L < 1:
        raise ConfigurationError(f"number of buckets must be >= 1, got {L}")
    if L > n:
        raise ConfigurationError(f"cannot split {n} samples into {L} buckets")
    if not class_balanced:
        return BucketPlan(L, [np.array(b) for b in np.array_split(ranked.order, L)], False)

    labels = np.asarray(labels)
    ranked_labels = labels[ranked.order]
    parts = [[] for _ in range(L)]
    offset = 0
    for c in np.unique(ranked_labels):
        members = ranked.order[ranked_labels == c]
        base, extra = divmod(len(members), L)
        sizes = np.full(L, base)
        sizes[(offset + np.arange(extra)) % L] += 1
        offset = (offset + extra) % L
        start = 0
        for j in range(L):
            parts[j].append(members[start:start + sizes[j]])
            start += sizes[j]
    position = np.empty(labels.shape[0] if labels.ndim else n, dtype=np.int64)
    position[ranked.order] = np.arange(n)
    buckets = []
    for j in range(L):
        b = np.concatenate(parts[j])
        buckets.append(b[np.argsort(position[b], kind="stable")])
    return BucketPlan(L, buckets, True)


def single_bucket(n) -> BucketPlan:
    """Plan holding the whole dataset in one bucket (plain mini-batching)."""
    return BucketPlan(1, [np.arange(n)], False)


def assign_experts(plan: BucketPlan, pool, policy: SelectionPolicy, epoch=0) -> np.ndarray:
    """Return ``assignment[bucket] = expert index`` (pool ordered by ascending capacity)."""
    n_experts = pool if isinstance(pool, int) else len(pool)
    if n_experts != plan.L:
        raise ConfigurationError(f"expert pool has {n_experts} members but the plan has {plan.L} buckets")
    if policy.kind == "baseline":
        return np.arange(plan.L)
    if policy.kind == "anti":
        return np.arange(plan.L)[::-1].copy()
    gen = np.random.default_rng([int(policy.seed), int(epoch)])
    return gen.permutation(plan.L)


def epoch_iterator(plan: BucketPlan, batch_size, seed, epoch) -> Iterator[Tuple[np.ndarray, int]]:
    """Yield ``(indices, bucket)`` mini-batches for one epoch.

    Buckets are visited easy to hard. Inside a bucket the (sorted) indices are
    shuffled with a generator keyed on ``(seed, epoch, bucket)`` and chunked,
    so no batch mixes buckets.
    """
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    for b, members in enumerate(plan.buckets):
        gen = np.random.default_rng([int(seed), int(epoch), b])
        idx = gen.permutation(np.sort(members))
        for start in range(0, len(idx), batch_size):
            yield idx[start:start + batch_size], b


def terciles(ranked: RankedDataset, labels, class_balanced=True):
    """Easy / Intermediate / Difficult subsets of the ranking."""
    return bucketize(ranked, labels, 3, class_balanced).buckets


# -- curriculum file -------------------------------------------------------------

@dataclass
class CurriculumFile:
    ranked: RankedDataset
    labels: np.ndarray
    plan: BucketPlan
    policy: str
    seed: int
    scorer: str


def write_curriculum(path, ranked, labels, plan, policy="baseline", seed=0, scorer="none"):
    """Write the ranked curriculum as a tab-separated table.

    Rows appear in rank order: ``sample_index, class_label, score, bucket``
    (bucket is 0-based). Scores use ``repr`` so reading back is exact.
    """
    bucket = plan.bucket_of()
    labels = np.asarray(labels)
    lines = [
        f"{CURRICULUM_MAGIC} {CURRICULUM_VERSION}",
        f"# L={plan.L}",
        f"# class_balanced={int(plan.class_balanced)}",
        f"# policy={policy}",
        f"# seed={seed}",
        f"# scorer={scorer}",
        "sample_index\tclass_label\tscore\tbucket",
    ]
    for i, s in zip(ranked.order, ranked.scores):
        lines.append(f"{int(i)}\t{int(labels[i])}\t{float(s)!r}\t{bucket[int(i)]}")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_curriculum(path) -> CurriculumFile:
    with open(path, encoding="ascii") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].startswith(CURRICULUM_MAGIC):
        raise ParseError(f"{path}: not a curriculum file", offset=1)
    try:
        version = int(lines[0].split()[-1])
    except ValueError:
        raise ParseError(f"{path}: bad version field", offset=1) from None
    if version != CURRICULUM_VERSION:
        raise ParseError(f"{path}: unsupported curriculum version {version}", offset=1)
    header = {}
    lineno = 1
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.startswith("#"):
            break
        key, _, value = line[1:].strip().partition("=")
        header[key] = value
    for key in ("L", "class_balanced", "policy", "seed", "scorer"):
        if key not in header:
            raise ParseError(f"{path}: missing header field {key!r}")
    if lines[lineno - 1] != "sample_index\tclass_label\tscore\tbucket":
        raise ParseError(f"{path}: missing column header", offset=lineno)
    rows = lines[lineno:]
    order, lab, scores, bucket = [], [], [], []
    for k, line in enumerate(rows, start=lineno + 1):
        fields = line.split("\t")
        if len(fields) != 4:
            raise ParseError(f"{path}: expected 4 columns", offset=k)
        try:
            order.append(int(fields[0]))
            lab.append(int(fields[1]))
            scores.append(float(fields[2]))
            bucket.append(int(fields[3]))
        except ValueError:
            raise ParseError(f"{path}: malformed row {line!r}", offset=k) from None
    order = np.array(order, dtype=np.int64)
    n = len(order)
    if n == 0 or not np.array_equal(np.sort(order), np.arange(n)):
        raise ParseError(f"{path}: sample indices must be a permutation of 0..n-1")
    L = int(header["L"])
    bucket = np.array(bucket, dtype=np.int64)
    if bucket.size and (bucket.min() < 0 or bucket.max() >= L):
        raise ParseError(f"{path}: bucket index outside [0, {L})")
    labels = np.empty(n, dtype=np.int64)
    labels[order] = lab
    plan = BucketPlan(L, [order[bucket == j] for j in range(L)], bool(int(header["class_balanced"])))
    return CurriculumFile(
        ranked=RankedDataset(order, np.array(scores, dtype=np.float64)),
        labels=labels, plan=plan, policy=header["policy"],
        seed=int(header["seed"]), scorer=header["scorer"],
    )
