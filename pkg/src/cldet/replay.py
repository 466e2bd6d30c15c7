"""Capacity-bounded replay buffer with video-wise random sampling.

The buffer is empty until the first experience finishes, and only ever takes
data from experiences that are already over. After task T every stored task
holds an equal share of the capacity (remainder to the earliest tasks), and
inside a task the frames are spread evenly over its videos.
"""
from __future__ import annotations

import json
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

TRACK2_CAPACITY = 3500
TRACK3_CAPACITY = 5000


class ReplayProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class ReplayEntry:
    sample: Any
    task_index: int
    video_id: int


@dataclass
class AuditReport:
    violations: list[tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, rule: str, detail: str) -> None:
        self.violations.append((rule, detail))

    def __str__(self) -> str:
        if self.ok:
            return "ok"
        return "; ".join(f"{rule}: {detail}" for rule, detail in self.violations)


def _video_of(sample) -> int:
    return int(sample.video_id)


def video_shares(video_sizes: Sequence[int], quota: int) -> list[int]:
    """Frames to take per video: equal shares, shortfall passed round-robin.

    Works one frame at a time in video order, skipping exhausted videos, so
    leftover frames of an uneven split go to the earliest videos.
    """
    sizes = list(video_sizes)
    quota = min(max(quota, 0), sum(sizes))
    shares = [0] * len(sizes)
    base, extra = divmod(quota, len(sizes)) if sizes else (0, 0)
    if sizes and all(s >= base + 1 for s in sizes):
        return [base + (1 if i < extra else 0) for i in range(len(sizes))]
    remaining = quota
    while remaining:
        for i, size in enumerate(sizes):
            if remaining and shares[i] < size:
                shares[i] += 1
                remaining -= 1
    return shares


def video_wise_sample(samples: Sequence, quota: int, rng: np.random.Generator,
                      video_of: Callable[[Any], int] = _video_of) -> list:
    """Select ``quota`` samples spreading evenly over videos.

    Within a video, frames are drawn uniformly without replacement. The
    result keeps the input order. A quota above ``len(samples)`` takes all.
    """
    groups: OrderedDict[int, list[int]] = OrderedDict()
    for idx, s in enumerate(samples):
        groups.setdefault(video_of(s), []).append(idx)
    shares = video_shares([len(g) for g in groups.values()], quota)
    chosen = []
    for members, share in zip(groups.values(), shares):
        if share == len(members):
            chosen.extend(members)
        elif share:
            chosen.extend(int(i) for i in rng.choice(members, size=share, replace=False))
    return [samples[i] for i in sorted(chosen)]


def task_quotas(capacity: int, num_tasks: int) -> list[int]:
    base, extra = divmod(capacity, num_tasks)
    return [base + (1 if t < extra else 0) for t in range(num_tasks)]


class ReplayBuffer:
    """Replay store of sample references with (task, video) provenance.

    Tasks are numbered from 1. ``update`` must be called once per
    experience, in order, after training on it.
    """

    def __init__(self, capacity: int, rng_seed: int = 0):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = int(capacity)
        self.rng_seed = int(rng_seed)
        self.entries: list[ReplayEntry] = []
        self.finished_tasks = 0
        # Frames available per video when each task was stored.
        self.video_sizes: dict[int, dict[int, int]] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def _rng(self, task_index: int) -> np.random.Generator:
        return np.random.default_rng([self.rng_seed, task_index])

    def task_counts(self) -> dict[int, int]:
        return dict(sorted(Counter(e.task_index for e in self.entries).items()))

    def update(self, experience_samples: Sequence, task_index: int,
               video_of: Callable[[Any], int] = _video_of) -> "ReplayBuffer":
        if task_index != self.finished_tasks + 1:
            raise ReplayProtocolError(
                f"expected task {self.finished_tasks + 1}, got {task_index}")
        rng = self._rng(task_index)
        quotas = task_quotas(self.capacity, task_index)
        kept: list[ReplayEntry] = []
        for t in range(1, task_index):
            old = [e for e in self.entries if e.task_index == t]
            kept.extend(video_wise_sample(old, quotas[t - 1], rng, video_of=lambda e: e.video_id))
        new = video_wise_sample(list(experience_samples), quotas[-1], rng, video_of=video_of)
        kept.extend(ReplayEntry(sample=s, task_index=task_index, video_id=video_of(s)) for s in new)
        self.video_sizes[task_index] = dict(Counter(video_of(s) for s in experience_samples))
        self.entries = kept
        self.finished_tasks = task_index
        return self

    def samples(self) -> list:
        return [e.sample for e in self.entries]

    def to_dict(self, key_of: Callable[[Any], str] = lambda s: s.key) -> dict:
        return {
            "capacity": self.capacity,
            "rng_seed": self.rng_seed,
            "finished_tasks": self.finished_tasks,
            "video_sizes": {str(t): {str(v): n for v, n in sizes.items()}
                            for t, sizes in self.video_sizes.items()},
            "entries": [{"sample": key_of(e.sample), "task_index": e.task_index,
                         "video_id": e.video_id} for e in self.entries],
        }

    def save(self, path, key_of: Callable[[Any], str] = lambda s: s.key) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(key_of), indent=1))
        return path

    @classmethod
    def from_dict(cls, data: dict, resolve: Callable[[str], Any] = lambda k: k) -> "ReplayBuffer":
        buf = cls(data["capacity"], data["rng_seed"])
        buf.finished_tasks = int(data["finished_tasks"])
        buf.video_sizes = {int(t): {int(v): int(n) for v, n in sizes.items()}
                           for t, sizes in data["video_sizes"].items()}
        buf.entries = [ReplayEntry(sample=resolve(e["sample"]), task_index=int(e["task_index"]),
                                   video_id=int(e["video_id"])) for e in data["entries"]]
        return buf

    @classmethod
    def load(cls, path, resolve: Callable[[str], Any] = lambda k: k) -> "ReplayBuffer":
        return cls.from_dict(json.loads(Path(path).read_text()), resolve)


def update_buffer(buffer: ReplayBuffer, experience_samples: Sequence, task_index: int) -> ReplayBuffer:
    return buffer.update(experience_samples, task_index)


def training_pool(buffer: ReplayBuffer | None, current_samples: Sequence) -> tuple:
    """Current experience data followed by every replayed sample."""
    replayed = buffer.samples() if buffer is not None else []
    return tuple(current_samples) + tuple(replayed)


def audit(buffer: ReplayBuffer, finished_tasks: int | Sequence[int] | None = None) -> AuditReport:
    """Check the buffer against the replay rules; never raises."""
    report = AuditReport()
    if finished_tasks is None:
        last = buffer.finished_tasks
    elif isinstance(finished_tasks, int):
        last = finished_tasks
    else:
        last = max(finished_tasks, default=0)

    if len(buffer.entries) > buffer.capacity:
        report.add("capacity", f"{len(buffer.entries)} entries exceed capacity {buffer.capacity}")

    for i, e in enumerate(buffer.entries):
        if e.task_index > last or e.task_index < 1:
            report.add("future data", f"entry {i} from task {e.task_index}, last finished task {last}")

    seen: set[int] = set()
    for i, e in enumerate(buffer.entries):
        if id(e.sample) in seen:
            report.add("duplicate", f"entry {i} stores a sample twice")
        seen.add(id(e.sample))

    counts = Counter(e.task_index for e in buffer.entries)
    tasks = range(1, last + 1)
    quotas = task_quotas(buffer.capacity, last) if last else []
    unsaturated = []
    for t, q in zip(tasks, quotas):
        sizes = buffer.video_sizes.get(t)
        available = sum(sizes.values()) if sizes is not None else None
        c = counts.get(t, 0)
        if c > q:
            report.add("task quota", f"task {t} holds {c} entries, quota {q}")
        if available is None or c < available:
            unsaturated.append((t, c))
    if unsaturated:
        lo, hi = min(c for _, c in unsaturated), max(c for _, c in unsaturated)
        if hi - lo > 1:
            report.add("task balance", f"per-task counts {dict(unsaturated)} differ by more than 1")

    for t in tasks:
        sizes = buffer.video_sizes.get(t, {})
        per_video = Counter(e.video_id for e in buffer.entries if e.task_index == t)
        for v in per_video:
            if sizes and v not in sizes:
                report.add("provenance", f"task {t} entry from video {v} not in that task")
        open_counts = [per_video.get(v, 0) for v, n in sizes.items() if per_video.get(v, 0) < n]
        full_counts = [n for v, n in sizes.items() if per_video.get(v, 0) >= n]
        if open_counts and max(open_counts) - min(open_counts) > 1:
            report.add("video balance", f"task {t} per-video counts {dict(per_video)}")
        # An exhausted video may sit below the others, never above them.
        if open_counts and full_counts and max(full_counts) > max(open_counts) + 1:
            report.add("video balance", f"task {t} per-video counts {dict(per_video)}")
    return report
