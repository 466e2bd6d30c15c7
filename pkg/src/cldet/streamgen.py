"""Synthetic ego-centric detection benchmark.

Scenes hold videos, videos hold frames. Every video follows one persistent
main object (a procedural glyph keyed to its instance id) plus up to three
surrounding objects, and the label space is split into class-incremental
experiences.
"""
from __future__ import annotations

import colorsys
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

# Real challenge scale, kept for reference only.
EGOOBJECTS_TRAIN_IMAGES = 73_905
EGOOBJECTS_TEST_IMAGES = 10_713
EGOOBJECTS_SCENES = 1110

SHAPES = ("ellipse", "rect", "triangle", "diamond", "cross")
TRACK_MODES = ("category", "instance")
MANIFEST_NAME = "manifest.json"
IMAGE_DIR = "images"


class BenchmarkSpecError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class ManifestError(ValueError):
    """Manifest could not be parsed."""


class IntegrityError(RuntimeError):
    """Manifest and image files disagree."""


@dataclass(frozen=True)
class BenchmarkSpec:
    num_experiences: int = 5
    num_categories: int = 10
    instances_per_category: int = 3
    num_scenes: int = 10
    videos_per_scene: int = 2
    frames_per_video: int = 10
    image_size: int = 64
    track_mode: str = "category"
    seed: int = 0
    test_fraction: float = 0.2
    glyph_offset: int = 0  # rendered glyph category = label category + offset

    def validate(self) -> None:
        for name in ("num_experiences", "num_categories", "instances_per_category",
                     "num_scenes", "videos_per_scene", "frames_per_video"):
            if int(getattr(self, name)) < 1:
                raise BenchmarkSpecError(name, "must be >= 1")
        if self.image_size < 32:
            raise BenchmarkSpecError("image_size", "must be >= 32")
        if self.track_mode not in TRACK_MODES:
            raise BenchmarkSpecError("track_mode", f"must be one of {TRACK_MODES}")
        if self.glyph_offset < 0:
            raise BenchmarkSpecError("glyph_offset", "must be >= 0")
        if not 0.0 <= self.test_fraction < 1.0:
            raise BenchmarkSpecError("test_fraction", "must lie in [0, 1)")
        if self.track_mode == "category" and self.num_categories < self.num_experiences:
            raise BenchmarkSpecError(
                "num_categories", "must be >= num_experiences in category mode")
        if self.num_label_universe < self.num_experiences:
            raise BenchmarkSpecError("instances_per_category",
                                     "too few instances for the number of experiences")
        if self.num_videos < self.num_experiences:
            raise BenchmarkSpecError(
                "videos_per_scene", "need at least one video per experience")

    @property
    def num_instances(self) -> int:
        return self.num_categories * self.instances_per_category

    @property
    def num_videos(self) -> int:
        return self.num_scenes * self.videos_per_scene

    @property
    def num_label_universe(self) -> int:
        return self.num_categories if self.track_mode == "category" else self.num_instances


@dataclass(eq=False)
class Sample:
    image: np.ndarray
    boxes: list[tuple[int, int, int, int]]
    category_ids: list[int]
    instance_ids: list[int]
    main_object_index: int
    video_id: int
    scene_id: int
    frame_index: int

    @property
    def key(self) -> str:
        return f"{self.video_id}_{self.frame_index}"

    def labels(self, track_mode: str) -> list[int]:
        return list(self.category_ids if track_mode == "category" else self.instance_ids)

    def main_label(self, track_mode: str) -> int:
        return self.labels(track_mode)[self.main_object_index]

    def annotation(self) -> dict:
        return {
            "video_id": self.video_id,
            "scene_id": self.scene_id,
            "frame_index": self.frame_index,
            "boxes": [list(b) for b in self.boxes],
            "category_ids": list(self.category_ids),
            "instance_ids": list(self.instance_ids),
            "main_object_index": self.main_object_index,
        }

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.annotation() == other.annotation()
                and self.image.shape == other.image.shape
                and np.array_equal(self.image, other.image))


@dataclass(eq=True)
class Experience:
    samples: list[Sample]
    new_labels: frozenset[int]


@dataclass(eq=True)
class ExperienceStream:
    experiences: list[Experience]

    def __len__(self) -> int:
        return len(self.experiences)

    def __iter__(self):
        return iter(self.experiences)

    def __getitem__(self, index: int) -> Experience:
        return self.experiences[index]


@dataclass(eq=True)
class Benchmark:
    spec: BenchmarkSpec
    train: ExperienceStream
    test: list[Sample] = field(default_factory=list)


@dataclass(frozen=True)
class GlyphParams:
    shape: str
    hue: float
    stripe_period: int
    stripe_angle: float


def glyph_params(instance_id: int, instances_per_category: int) -> GlyphParams:
    """Rendering parameters for an instance; category fixes shape and hue."""
    category, slot = divmod(instance_id, instances_per_category)
    # Ten hues per block of ten categories; categories sharing a shape sit
    # half a turn apart. Later blocks are offset half a hue step.
    hue = ((category % 10) * 0.1 + (category // 10) * 0.05) % 1.0
    return GlyphParams(
        shape=SHAPES[category % len(SHAPES)],
        hue=round(hue, 6),
        stripe_period=4 + 2 * slot,
        stripe_angle=(slot * 47.0) % 180.0,
    )


def split_labels(labels, num_experiences: int, seed: int = 0) -> list[frozenset[int]]:
    labels = list(labels)
    if num_experiences < 1:
        raise ValueError("num_experiences must be >= 1")
    if len(labels) < num_experiences:
        raise ValueError(
            f"cannot split {len(labels)} labels into {num_experiences} experiences")
    order = np.random.default_rng(seed).permutation(len(labels))
    shuffled = [labels[i] for i in order]
    base, extra = divmod(len(labels), num_experiences)
    groups, start = [], 0
    for e in range(num_experiences):
        size = base + (1 if e < extra else 0)
        groups.append(frozenset(shuffled[start:start + size]))
        start += size
    return groups


def _active_labels(spec: BenchmarkSpec) -> list[int]:
    # Each kept label gets >= 2 videos when possible, so one can be held out.
    n_active = min(spec.num_label_universe,
                   max(spec.num_experiences, spec.num_videos // 2))
    if spec.track_mode == "category":
        return list(range(n_active))
    rng = np.random.default_rng([spec.seed, 0x1D])
    # Spread instance labels over categories before reusing a category.
    by_slot = [c * spec.instances_per_category + s
               for s in rng.permutation(spec.instances_per_category)
               for c in rng.permutation(spec.num_categories)]
    return sorted(int(i) for i in by_slot[:n_active])


def _shape_mask(shape: str, xs: np.ndarray, ys: np.ndarray, half: float) -> np.ndarray:
    u, v = xs / half, ys / half
    if shape == "ellipse":
        return u * u + v * v <= 1.0
    if shape == "rect":
        return (np.abs(u) <= 0.85) & (np.abs(v) <= 0.85)
    if shape == "triangle":
        return (v <= 0.9) & (v >= -0.9) & (np.abs(u) <= (v + 0.9) / 1.8)
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    if shape == "cross":
        return ((np.abs(u) <= 0.35) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.35) & (np.abs(u) <= 1.0))
    raise ValueError(f"unknown shape {shape!r}")


def _render_glyph(canvas: np.ndarray, params: GlyphParams, cx: float, cy: float,
                  size: float) -> tuple[int, int, int, int] | None:
    h, w, _ = canvas.shape
    half = size / 2.0
    x0, x1 = max(0, int(math.floor(cx - half))), min(w, int(math.ceil(cx + half)) + 1)
    y0, y1 = max(0, int(math.floor(cy - half))), min(h, int(math.ceil(cy + half)) + 1)
    if x0 >= x1 or y0 >= y1:
        return None
    gy, gx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    xs, ys = gx + 0.5 - cx, gy + 0.5 - cy
    mask = _shape_mask(params.shape, xs, ys, half)
    if not mask.any():
        return None
    theta = math.radians(params.stripe_angle)
    phase = (xs * math.cos(theta) + ys * math.sin(theta)) / params.stripe_period
    stripe = np.sin(2 * math.pi * phase) > 0
    base = np.array(colorsys.hsv_to_rgb(params.hue, 0.85, 0.95)) * 255.0
    color = np.where(stripe[..., None], base * 0.6, base)
    region = canvas[y0:y1, x0:x1]
    region[mask] = color[mask]
    rows, cols = np.nonzero(mask)
    return (x0 + int(cols.min()), y0 + int(rows.min()),
            x0 + int(cols.max()) + 1, y0 + int(rows.max()) + 1)


def _scene_background(spec: BenchmarkSpec, scene_id: int) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, scene_id, 0xB6])
    n = spec.image_size
    coarse = rng.uniform(60, 190, size=(4, 4, 3)).astype(np.uint8)
    low = np.asarray(Image.fromarray(coarse).resize((n, n), Image.BILINEAR), dtype=np.float64)
    grey = low.mean(axis=2, keepdims=True)
    # Desaturate so glyph colours stay the dominant cue.
    return 0.75 * grey + 0.25 * low


def _render_video(spec: BenchmarkSpec, scene_id: int, video_id: int, main_instance: int,
                  surround_pool: list[int], background: np.ndarray) -> list[Sample]:
    rng = np.random.default_rng([spec.seed, scene_id, video_id])
    n = spec.image_size
    ipc = spec.instances_per_category

    objects = [(main_instance, rng.uniform(0.3, 0.7, 2) * n, rng.uniform(0.28, 0.45) * n)]
    choices = [i for i in surround_pool if i != main_instance]
    n_surround = int(rng.integers(0, 4)) if choices else 0
    for _ in range(n_surround):
        inst = int(choices[rng.integers(len(choices))])
        objects.append((inst, rng.uniform(0.15, 0.85, 2) * n, rng.uniform(0.2, 0.3) * n))

    frames = []
    shift = np.zeros(2)
    for frame_index in range(spec.frames_per_video):
        # Camera drift: a random walk with steps of at most 10% of the image.
        shift = np.clip(shift + rng.uniform(-0.1, 0.1, 2) * n, -0.3 * n, 0.3 * n)
        scale = float(np.exp(rng.uniform(math.log(0.8), math.log(1.25))))
        brightness = rng.uniform(0.7, 1.3)
        canvas = background.copy()
        canvas += rng.normal(0.0, 6.0, size=canvas.shape)
        boxes, cats, insts = [], [], []
        main_box = None
        # Surrounding objects first so the main object is drawn on top.
        for idx in list(range(1, len(objects))) + [0]:
            inst, centre, size = objects[idx]
            cx, cy = centre + shift
            lo = 0.15 if idx == 0 else 0.1
            cx, cy = np.clip([cx, cy], lo * n, (1 - lo) * n)
            glyph = glyph_params(inst + spec.glyph_offset * ipc, ipc)
            box = _render_glyph(canvas, glyph, cx, cy, size * scale)
            if box is None:
                continue
            if idx == 0:
                main_box = (box, inst)
            else:
                boxes.append(box)
                cats.append(inst // ipc)
                insts.append(inst)
        assert main_box is not None
        boxes.append(main_box[0])
        cats.append(main_box[1] // ipc)
        insts.append(main_box[1])
        image = np.clip(canvas * brightness, 0, 255).round().astype(np.uint8)
        frames.append(Sample(image=image, boxes=boxes, category_ids=cats, instance_ids=insts,
                             main_object_index=len(boxes) - 1, video_id=video_id,
                             scene_id=scene_id, frame_index=frame_index))
    return frames


def generate_benchmark(spec: BenchmarkSpec) -> Benchmark:
    spec.validate()
    active = _active_labels(spec)
    groups = split_labels(active, spec.num_experiences, seed=spec.seed)
    label_to_exp = {label: e for e, g in enumerate(groups) for label in g}

    rng = np.random.default_rng([spec.seed, 0x5EED])
    videos = [(s, s * spec.videos_per_scene + v)
              for s in range(spec.num_scenes) for v in range(spec.videos_per_scene)]
    order = rng.permutation(len(videos))
    # Labels ordered by experience so every experience gets videos first.
    label_order = [label for g in groups for label in sorted(g)]
    videos_of_label: dict[int, list[tuple[int, int]]] = {label: [] for label in active}
    for rank, vi in enumerate(order):
        videos_of_label[label_order[rank % len(label_order)]].append(videos[vi])

    ipc = spec.instances_per_category
    backgrounds: dict[int, np.ndarray] = {}
    train_by_exp: list[list[Sample]] = [[] for _ in groups]
    test: list[Sample] = []
    for label in label_order:
        e = label_to_exp[label]
        introduced = sorted(lab for g in groups[:e + 1] for lab in g)
        if spec.track_mode == "category":
            surround_pool = [c * ipc + s for c in introduced for s in range(ipc)]
        else:
            surround_pool = introduced
        assigned = sorted(videos_of_label[label], key=lambda sv: sv[1])
        n_test = 0
        if len(assigned) >= 2:
            n_test = min(len(assigned) - 1, max(1, round(spec.test_fraction * len(assigned))))
        for k, (scene_id, video_id) in enumerate(assigned):
            vrng = np.random.default_rng([spec.seed, scene_id, video_id, 0x4D])
            if spec.track_mode == "category":
                main_instance = label * ipc + int(vrng.integers(ipc))
            else:
                main_instance = label
            if scene_id not in backgrounds:
                backgrounds[scene_id] = _scene_background(spec, scene_id)
            frames = _render_video(spec, scene_id, video_id, main_instance, surround_pool,
                                   backgrounds[scene_id])
            if k >= len(assigned) - n_test:
                test.extend(frames)
            else:
                train_by_exp[e].extend(frames)

    def order_key(s: Sample):
        return (s.video_id, s.frame_index)

    stream = ExperienceStream([
        Experience(samples=sorted(samples, key=order_key), new_labels=g)
        for samples, g in zip(train_by_exp, groups)
    ])
    return Benchmark(spec=spec, train=stream, test=sorted(test, key=order_key))


def _image_path(sample: Sample) -> str:
    return f"{IMAGE_DIR}/{sample.video_id}_{sample.frame_index}.png"


def manifest_dict(benchmark: Benchmark) -> dict:
    def record(s: Sample) -> dict:
        return {"file": _image_path(s), **s.annotation()}

    return {
        "format": 1,
        "spec": asdict(benchmark.spec),
        "experiences": [
            {"index": i, "new_labels": sorted(exp.new_labels),
             "samples": [record(s) for s in exp.samples]}
            for i, exp in enumerate(benchmark.train)
        ],
        "test": [record(s) for s in benchmark.test],
    }


def serialize_benchmark(benchmark: Benchmark, directory) -> Path:
    root = Path(directory)
    (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    samples = [s for exp in benchmark.train for s in exp.samples] + list(benchmark.test)
    for s in samples:
        Image.fromarray(s.image).save(root / _image_path(s), format="PNG")
    manifest = root / MANIFEST_NAME
    manifest.write_text(json.dumps(manifest_dict(benchmark), sort_keys=True, indent=1))
    return manifest


def _sample_from_record(root: Path, rec: dict) -> Sample:
    path = root / rec["file"]
    if not path.is_file():
        raise IntegrityError(f"manifest references missing image {rec['file']}")
    with Image.open(path) as im:
        image = np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    return Sample(
        image=image,
        boxes=[tuple(int(v) for v in b) for b in rec["boxes"]],
        category_ids=[int(v) for v in rec["category_ids"]],
        instance_ids=[int(v) for v in rec["instance_ids"]],
        main_object_index=int(rec["main_object_index"]),
        video_id=int(rec["video_id"]),
        scene_id=int(rec["scene_id"]),
        frame_index=int(rec["frame_index"]),
    )


def read_manifest(manifest_path) -> dict:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    try:
        text = manifest_path.read_text()
    except FileNotFoundError as exc:
        raise ManifestError(f"manifest not found: {manifest_path}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(
            f"{manifest_path}: {exc.msg} at offset {exc.pos} "
            f"(line {exc.lineno}, column {exc.colno})") from exc


def load_benchmark(manifest_path) -> Benchmark:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    data = read_manifest(manifest_path)
    root = manifest_path.parent
    try:
        spec = BenchmarkSpec(**data["spec"])
        records = [r for e in data["experiences"] for r in e["samples"]] + list(data["test"])
        on_disk = sorted(p.name for p in (root / IMAGE_DIR).glob("*.png"))
        referenced = sorted(Path(r["file"]).name for r in records)
        missing = sorted(set(referenced) - set(on_disk))
        if missing:
            raise IntegrityError(f"manifest references missing image {missing[0]}")
        if len(on_disk) != len(referenced):
            raise IntegrityError(
                f"{len(on_disk)} image files on disk but {len(referenced)} annotated samples")
        experiences = [
            Experience(samples=[_sample_from_record(root, r) for r in e["samples"]],
                       new_labels=frozenset(int(v) for v in e["new_labels"]))
            for e in data["experiences"]
        ]
        test = [_sample_from_record(root, r) for r in data["test"]]
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"{manifest_path}: malformed manifest ({exc!r})") from exc
    return Benchmark(spec=spec, train=ExperienceStream(experiences), test=test)


def validate_manifest(data: dict) -> list[str]:
    """Problems found in a manifest dict; empty when consistent."""
    problems = []
    seen: dict[int, int] = {}
    mode = data["spec"]["track_mode"]
    key = "category_ids" if mode == "category" else "instance_ids"
    for exp in data["experiences"]:
        labels = set(exp["new_labels"])
        for label in labels:
            if label in seen:
                problems.append(f"label {label} in experiences {seen[label]} and {exp['index']}")
            seen[label] = exp["index"]
        for rec in exp["samples"]:
            main = rec[key][rec["main_object_index"]]
            if main not in labels:
                problems.append(f"{rec['file']}: main label {main} not new in experience {exp['index']}")
    return problems
