"""Continual training loop, augmentation, ablation sweeps and reporting."""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import torch

from . import evalkit
from .detector import (DenseDetector, ModelConfig, assign_targets, decode_detections, detection_loss,
                       images_to_tensor, save_checkpoint, stack_targets, write_detections)
from .distill import DistillConfig, RelationModule, distill_loss, snapshot_teacher, total_loss
from .replay import ReplayBuffer, audit, training_pool
from .streamgen import Benchmark, BenchmarkSpec, generate_benchmark, load_benchmark

log = logging.getLogger(__name__)


class AuditViolation(RuntimeError):
    pass


@dataclass
class ReplayConfig:
    enabled: bool = True
    capacity: int = 40


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 3
    batch_size: int = 4
    grad_clip: float = 10.0


@dataclass
class AugmentConfig:
    pmd_enabled: bool = False
    brightness_delta: float = 32.0
    contrast_range: tuple[float, float] = (0.5, 1.5)
    saturation_range: tuple[float, float] = (0.5, 1.5)
    hue_delta: float = 18.0  # degrees

    def __post_init__(self):
        self.contrast_range = tuple(self.contrast_range)
        self.saturation_range = tuple(self.saturation_range)


@dataclass
class InferenceConfig:
    score_threshold: float = 0.05
    nms_iou: float = 0.6
    max_detections: int = 100
    iou_thresholds: tuple[float, ...] = evalkit.COCO_IOU_THRESHOLDS

    def __post_init__(self):
        self.iou_thresholds = tuple(self.iou_thresholds)


@dataclass
class PretrainConfig:
    """Supervised pre-training on a held-out synthetic split with disjoint glyphs."""
    enabled: bool = True
    num_scenes: int = 100
    videos_per_scene: int = 2
    frames_per_video: int = 10
    glyph_offset: int = 10
    steps: int = 3000
    batch_size: int = 8
    learning_rate: float = 0.01
    seed: int = 0
    cache_dir: str | None = None


@dataclass
class ExperimentConfig:
    benchmark: str = "benchmark"
    model: dict = field(default_factory=dict)  # ModelConfig fields except num_classes
    distill: DistillConfig = field(default_factory=DistillConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    seed: int = 1
    output_dir: str | None = None
    save_checkpoints: bool = True

    def __post_init__(self):
        opt = self.optimizer
        if opt.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if opt.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if opt.learning_rate <= 0:
            raise ValueError("learning rate must be > 0")
        if self.replay.capacity < 0:
            raise ValueError("replay capacity must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distill"]["levels"] = None if self.distill.levels is None else list(self.distill.levels)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        sub = {"distill": DistillConfig, "replay": ReplayConfig, "optimizer": OptimizerConfig,
               "augmentation": AugmentConfig, "inference": InferenceConfig,
               "pretrain": PretrainConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if key in sub and isinstance(value, dict):
                value = sub[key](**value)
            kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RunRecord:
    per_experience_map: list[float]
    average_map: float
    per_experience_label_ap: list[dict[str, float]]
    experience_labels: list[list[int]]
    loss_curves: dict[str, list[float]]
    buffer_audits: list[str]
    config: dict
    wall_clock: float = 0.0
    name: str = ""

    def metrics_json(self) -> str:
        """Serialised record without timing, for byte-level comparison."""
        d = asdict(self)
        d.pop("wall_clock")
        return json.dumps(d, sort_keys=True)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunRecord":
        return cls(**{f.name: data[f.name] for f in fields(cls) if f.name in data})


def apply_photometric(image: np.ndarray, brightness: float = 0.0, contrast: float = 1.0,
                      saturation: float = 1.0, hue: float = 0.0) -> np.ndarray:
    """Deterministic photometric transform of an 8-bit RGB image; hue in degrees."""
    from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

    x = image.astype(np.float64)
    if brightness:
        x = np.clip(x + brightness, 0, 255)
    if contrast != 1.0:
        x = np.clip(x * contrast, 0, 255)
    if saturation != 1.0 or hue:
        hsv = rgb_to_hsv(x / 255.0)
        hsv[..., 1] = np.clip(hsv[..., 1] * saturation, 0, 1)
        hsv[..., 0] = (hsv[..., 0] + hue / 360.0) % 1.0
        x = np.clip(hsv_to_rgb(hsv) * 255.0, 0, 255)
    return np.round(x).astype(np.uint8)


def photometric_distortion(image: np.ndarray, params: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random brightness, contrast, saturation and hue, each applied with probability 0.5.

    The generator is advanced the same amount whatever is applied.
    """
    coins = rng.random(4) < 0.5
    b = rng.uniform(-params.brightness_delta, params.brightness_delta)
    c = rng.uniform(*params.contrast_range)
    s = rng.uniform(*params.saturation_range)
    h = rng.uniform(-params.hue_delta, params.hue_delta)
    return apply_photometric(image,
                             brightness=b if coins[0] else 0.0,
                             contrast=c if coins[1] else 1.0,
                             saturation=s if coins[2] else 1.0,
                             hue=h if coins[3] else 0.0)


_PRETRAINED: dict[str, dict] = {}


def _pretrain_key(model_cfg: ModelConfig, pre: PretrainConfig, spec) -> str:
    blob = {"model": model_cfg.to_dict(), "pretrain": {k: v for k, v in asdict(pre).items() if k != "cache_dir"},
            "image_size": spec.image_size, "num_categories": spec.num_categories,
            "instances_per_category": spec.instances_per_category}
    blob["model"].pop("num_classes")
    return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:16]


def pretrain_state(model_cfg: ModelConfig, pre: PretrainConfig, spec) -> dict:
    """Weights from training on a base split whose glyphs never appear in the stream.

    Results are memoised per process and, with ``cache_dir``, on disk.
    """
    key = _pretrain_key(model_cfg, pre, spec)
    if key in _PRETRAINED:
        return _PRETRAINED[key]
    cache = Path(pre.cache_dir) / f"pretrain_{key}.pt" if pre.cache_dir else None
    if cache is not None and cache.exists():
        state = torch.load(cache, map_location="cpu")
        _PRETRAINED[key] = state
        return state
    base_spec = BenchmarkSpec(num_experiences=1, num_categories=spec.num_categories,
                              instances_per_category=spec.instances_per_category,
                              num_scenes=pre.num_scenes, videos_per_scene=pre.videos_per_scene,
                              frames_per_video=pre.frames_per_video, image_size=spec.image_size,
                              track_mode="category", seed=pre.seed, test_fraction=0.0,
                              glyph_offset=pre.glyph_offset)
    base = generate_benchmark(base_spec)
    samples = [s for exp in base.train for s in exp.samples]
    torch.manual_seed(pre.seed)
    model = DenseDetector(replace(model_cfg, num_classes=base_spec.num_categories))
    model.train()
    optimizer = torch.optim.SGD(model.parameters(), lr=pre.learning_rate, momentum=0.9, weight_decay=1e-4)
    targets_of = TargetCache(model.cfg, "category")
    rng = np.random.default_rng([pre.seed, 0x9E])
    for step in range(pre.steps):
        idx = rng.choice(len(samples), size=min(pre.batch_size, len(samples)), replace=False)
        batch = [samples[i] for i in idx]
        train_step(model, optimizer, images_to_tensor(np.stack([s.image for s in batch])),
                   stack_targets([targets_of(s) for s in batch]), 10.0)
    state = {k: v for k, v in model.state_dict().items() if not k.startswith("head.cls_logits.")}
    _PRETRAINED[key] = state
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        torch.save(state, cache)
    return state


def build_model(cfg: ExperimentConfig, num_classes: int, spec=None) -> DenseDetector:
    model_cfg = ModelConfig(num_classes=num_classes, **cfg.model)
    state = None
    if cfg.pretrain.enabled and spec is not None:
        state = pretrain_state(model_cfg, cfg.pretrain, spec)
    torch.manual_seed(cfg.seed)
    model = DenseDetector(model_cfg)
    if state is not None:
        # The classifier layer is class-specific and stays freshly initialised.
        missing, unexpected = model.load_state_dict(state, strict=False)
        assert not unexpected and all(k.startswith("head.cls_logits.") for k in missing)
    return model


class TargetCache:
    def __init__(self, model_cfg: ModelConfig, track_mode: str):
        self.model_cfg = model_cfg
        self.track_mode = track_mode
        self._cache: dict[str, list] = {}

    def __call__(self, sample) -> list:
        hit = self._cache.get(sample.key)
        if hit is None:
            h, w = sample.image.shape[:2]
            hit = assign_targets(sample.boxes, sample.labels(self.track_mode), (h, w),
                                 self.model_cfg.fpn_levels, self.model_cfg.scale_ranges,
                                 self.model_cfg.center_radius)
            self._cache[sample.key] = hit
        return hit


@torch.no_grad()
def predict(model: DenseDetector, samples: Sequence, inference: InferenceConfig,
            batch_size: int = 32) -> dict[str, list]:
    model.eval()
    out = {}
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        x = images_to_tensor(np.stack([s.image for s in chunk]))
        for s, dense in zip(chunk, model(x).per_image()):
            out[s.key] = decode_detections(dense, s.image.shape[:2], inference.score_threshold,
                                           inference.nms_iou, inference.max_detections)
    model.train()
    return out


def evaluate(model: DenseDetector, test: Sequence, track_mode: str,
             inference: InferenceConfig) -> tuple[float, dict[int, float], dict]:
    preds = predict(model, test, inference)
    gts, mains = evalkit.ground_truth_from_samples(test, track_mode)
    cfg = evalkit.EvalConfig(iou_thresholds=inference.iou_thresholds, label_space=track_mode,
                             reference_only=track_mode == "instance")
    ap = evalkit.per_label_ap(preds, gts, cfg, mains)
    m = float(np.mean(list(ap.values()))) if ap else 0.0
    return m, ap, preds


def train_step(model, optimizer, images: torch.Tensor, targets, grad_clip: float,
               distill_cfg: DistillConfig | None = None, teacher=None, relation=None,
               old_classes=None, params=None) -> dict[str, float]:
    out = model(images)
    cls, reg = detection_loss(out, targets)
    d = None
    if teacher is not None and distill_cfg is not None and distill_cfg.variant != "none":
        t_out = teacher(images)
        d = distill_loss(distill_cfg, t_out, out, relation, old_classes)
    loss = total_loss((cls, reg), d, distill_cfg)
    optimizer.zero_grad()
    loss.backward()
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(params if params is not None else model.parameters(), grad_clip)
    optimizer.step()
    return {"total": loss.item(), "cls": cls.item(), "reg": reg.item(),
            "distill": d.item() if d is not None else 0.0}


def run_experiment(cfg: ExperimentConfig, benchmark: Benchmark | None = None) -> RunRecord:
    """Train over the experience stream in order, evaluating after each experience."""
    started = time.perf_counter()
    if benchmark is None:
        path = Path(cfg.benchmark)
        if not (path / "manifest.json").exists() and not path.is_file():
            raise FileNotFoundError(f"benchmark not found at {path}")
        benchmark = load_benchmark(path)
    spec = benchmark.spec
    mode = spec.track_mode
    num_classes = spec.num_label_universe
    torch.use_deterministic_algorithms(True, warn_only=True)

    model = build_model(cfg, num_classes, spec)
    model.train()
    relation = None
    if cfg.distill.variant == "nonlocal":
        relation = RelationModule(model.cfg.channels, len(model.cfg.fpn_levels),
                                  model.cfg.nonlocal_embed_channels)
    buffer = ReplayBuffer(cfg.replay.capacity, cfg.seed) if cfg.replay.enabled else None
    targets_of = TargetCache(model.cfg, mode)
    out_dir = Path(cfg.output_dir) if cfg.output_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    teacher = None
    seen: list[int] = []
    maps, label_aps, audits, exp_labels = [], [], [], []
    curves: dict[str, list[float]] = {"total": [], "cls": [], "reg": [], "distill": []}
    opt_cfg = cfg.optimizer
    for e, exp in enumerate(benchmark.train):
        task = e + 1
        pool = training_pool(buffer, exp.samples)
        params = list(model.parameters()) + (list(relation.parameters()) if relation else [])
        optimizer = torch.optim.SGD(params, lr=opt_cfg.learning_rate, momentum=opt_cfg.momentum,
                                    weight_decay=opt_cfg.weight_decay)
        rng = np.random.default_rng([cfg.seed, task])
        use_teacher = teacher if (e > 0 and cfg.distill.variant != "none") else None
        for _epoch in range(opt_cfg.epochs):
            order = rng.permutation(len(pool))
            for start in range(0, len(pool), opt_cfg.batch_size):
                batch = [pool[i] for i in order[start:start + opt_cfg.batch_size]]
                if cfg.augmentation.pmd_enabled:
                    imgs = [photometric_distortion(s.image, cfg.augmentation, rng) for s in batch]
                else:
                    imgs = [s.image for s in batch]
                x = images_to_tensor(np.stack(imgs))
                targets = stack_targets([targets_of(s) for s in batch])
                losses = train_step(model, optimizer, x, targets, opt_cfg.grad_clip, cfg.distill,
                                    use_teacher, relation, sorted(seen), params)
                for k, v in losses.items():
                    curves[k].append(v)
        seen.extend(sorted(exp.new_labels))
        exp_labels.append(sorted(int(v) for v in exp.new_labels))

        m, ap, preds = evaluate(model, benchmark.test, mode, cfg.inference)
        maps.append(m)
        label_aps.append({str(k): v for k, v in sorted(ap.items())})
        log.info("experience %d: mAP %.4f", task, m)

        teacher = snapshot_teacher(model, task)
        if buffer is not None:
            buffer.update(exp.samples, task)
            report = audit(buffer, task)
            audits.append(str(report))
            if not report.ok:
                raise AuditViolation(f"replay audit failed after task {task}: {report}")
        else:
            audits.append("disabled")
        if out_dir:
            write_detections(out_dir / f"detections_exp{task}.jsonl", preds)
            if cfg.save_checkpoints:
                save_checkpoint(model, out_dir / f"model_exp{task}.pt")
            if buffer is not None:
                buffer.save(out_dir / f"buffer_exp{task}.json")

    record = RunRecord(
        per_experience_map=maps,
        average_map=evalkit.average_map(maps),
        per_experience_label_ap=label_aps,
        experience_labels=exp_labels,
        loss_curves=curves,
        buffer_audits=audits,
        config=cfg.to_dict(),
        wall_clock=time.perf_counter() - started,
    )
    if out_dir:
        with (out_dir / "records.jsonl").open("a") as fh:
            fh.write(record.to_json() + "\n")
    return record


AXES = {
    "replay": lambda cfg, v: replace(cfg, replay=replace(cfg.replay, enabled=bool(v))),
    "distill": lambda cfg, v: replace(cfg, distill=replace(cfg.distill, variant=str(v))),
    "pmd": lambda cfg, v: replace(cfg, augmentation=replace(cfg.augmentation, pmd_enabled=bool(v))),
    "nonlocal": lambda cfg, v: replace(cfg, model={**cfg.model, "nonlocal_enabled": bool(v)}),
}


def ablation_configs(base_cfg: ExperimentConfig, axes: dict[str, Sequence[Any]]) -> list[tuple[dict, ExperimentConfig]]:
    unknown = set(axes) - set(AXES)
    if unknown:
        raise ValueError(f"unknown ablation axes {sorted(unknown)}; choose from {sorted(AXES)}")
    names = list(axes)
    out = []
    for values in itertools.product(*(axes[n] for n in names)):
        cfg = base_cfg
        setting = dict(zip(names, values))
        for n, v in setting.items():
            cfg = AXES[n](cfg, v)
        out.append((setting, cfg))
    return out


def setting_name(setting: dict) -> str:
    if not setting:
        return "baseline"
    return ", ".join(f"{k}={v}" for k, v in setting.items())


def run_ablation(base_cfg: ExperimentConfig, axes: dict[str, Sequence[Any]], seeds: Iterable[int] = (1, 2, 3),
                 benchmark: Benchmark | None = None, runner=run_experiment) -> list[dict]:
    """Run every axis combination for every seed; one table row per combination."""
    seeds = list(seeds)
    if benchmark is None:
        benchmark = load_benchmark(base_cfg.benchmark)
    rows = []
    for setting, cfg in ablation_configs(base_cfg, axes):
        records = []
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed)
            if base_cfg.output_dir:
                run_cfg = replace(run_cfg, output_dir=str(
                    Path(base_cfg.output_dir) / _slug(setting) / f"seed{seed}"))
            rec = runner(run_cfg, benchmark)
            rec.name = setting_name(setting)
            records.append(rec)
        avgs = [r.average_map for r in records]
        rows.append({
            "setting": setting_name(setting),
            **{k: v for k, v in setting.items()},
            "mean_average_map": statistics.fmean(avgs),
            "std_average_map": statistics.pstdev(avgs) if len(avgs) > 1 else 0.0,
            "runs": len(avgs),
            "records": records,
        })
    return rows


def _slug(setting: dict) -> str:
    return "baseline" if not setting else "_".join(f"{k}-{v}" for k, v in setting.items())


def write_ablation_table(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    keys = sorted({k for r in rows for k in r} - {"records", "setting", "mean_average_map",
                                                   "std_average_map", "runs"})
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["setting", *keys, "mean_average_map", "std_average_map", "runs"])
        for r in rows:
            writer.writerow([r["setting"], *(r.get(k, "") for k in keys), repr(r["mean_average_map"]),
                             repr(r["std_average_map"]), r["runs"]])
    return path


def read_records(path) -> list[RunRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
            if not isinstance(data, dict) or "per_experience_map" not in data:
                raise ValueError("missing per_experience_map")
            records.append(RunRecord.from_dict({
                "average_map": None, "per_experience_label_ap": [], "experience_labels": [],
                "loss_curves": {}, "buffer_audits": [], "config": {}, **data}))
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from exc
    if not records:
        raise ValueError(f"{path}: no records")
    return records


def report(records: Sequence[RunRecord], out_dir) -> list[dict]:
    """Write a comparison table plus per-experience mAP and loss plots.

    Averages are recomputed from each record's per-experience list. Rows are
    sorted by average mAP, best first.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not records:
        raise ValueError("need at least one record")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, r in enumerate(records):
        rows.append({"name": r.name or f"run{i}", "average_map": evalkit.average_map(r.per_experience_map),
                     "per_experience_map": list(r.per_experience_map)})
    rows.sort(key=lambda r: -r["average_map"])

    with (out / "table.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "average_map", "per_experience_map"])
        for r in rows:
            writer.writerow([r["name"], repr(r["average_map"]),
                             " ".join(repr(v) for v in r["per_experience_map"])])
    width = max(len(r["name"]) for r in rows)
    lines = [f"{'name':<{width}}  average_map  per_experience_map"]
    lines += [f"{r['name']:<{width}}  {r['average_map']!r:<11}  "
              + " ".join(f"{v:.4f}" for v in r["per_experience_map"]) for r in rows]
    (out / "table.txt").write_text("\n".join(lines) + "\n")

    with (out / "map_per_experience.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "experience", "map"])
        for r in rows:
            for e, v in enumerate(r["per_experience_map"], 1):
                writer.writerow([r["name"], e, repr(v)])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for r in rows:
        xs = range(1, len(r["per_experience_map"]) + 1)
        ax.plot(xs, r["per_experience_map"], marker="o", label=r["name"])
    ax.set_xlabel("experience")
    ax.set_ylabel("mAP on full test set")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "map_per_experience.png", dpi=100)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for i, r in enumerate(records):
        curve = r.loss_curves.get("total", []) if r.loss_curves else []
        if curve:
            ax.plot(curve, label=r.name or f"run{i}", linewidth=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    fig.tight_layout()
    fig.savefig(out / "loss_curves.png", dpi=100)
    plt.close(fig)
    return rows
