"""Dataset layout, run configuration, checkpoints, manifests and CSV outputs."""

from __future__ import annotations

import csv
import datetime as _dt
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch
import yaml

from nightadapt.boxes import BoundingBox, BoxTrack, FrameSequence, Provenance
from nightadapt.discovery import DiscoveryConfig
from nightadapt.errors import ConfigError, DataFormatError
from nightadapt.imaging import IMAGE_SUFFIXES
from nightadapt.model import ModelConfig
from nightadapt.training import TrainConfig

GROUND_TRUTH_FILE = "groundtruth_rect.txt"
ATTRIBUTE_FILE = "attributes.txt"
CHECKPOINT_FORMAT = "nightadapt-checkpoint/1"
ATTRIBUTE_TAGS = frozenset({"ARC", "BC", "CM", "FM", "OCC", "FOC", "OV", "SV", "SOB", "VC", "IV", "LAI"})


@dataclass(frozen=True)
class DatasetLayout:
    """A root with one directory per sequence holding numbered frames.

    Labeled splits add ``groundtruth_rect.txt`` (one ``x,y,w,h`` line per frame)
    and optionally ``attributes.txt`` (one tag per line). Frames may sit in the
    sequence directory itself or in an ``img/`` subdirectory.
    """

    root: Path
    split: str = "test_labeled"
    ground_truth_file: str = GROUND_TRUTH_FILE
    attribute_file: str = ATTRIBUTE_FILE

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))
        if self.split not in ("train_unlabeled", "test_labeled"):
            raise ConfigError(f"unknown split {self.split!r}", key="split")

    @property
    def labeled(self) -> bool:
        return self.split == "test_labeled"

    def sequence_names(self) -> list[str]:
        if not self.root.is_dir():
            raise FileNotFoundError(f"dataset root {self.root} does not exist")
        return sorted(p.name for p in self.root.iterdir() if p.is_dir())


def _frame_files(seq_dir: Path) -> list[Path]:
    img_dir = seq_dir / "img" if (seq_dir / "img").is_dir() else seq_dir
    return sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def read_boxes(path: Path) -> list[BoundingBox]:
    boxes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.replace("\t", ",").replace(" ", ",").split(",")
            vals = [p for p in parts if p]
            try:
                boxes.append(BoundingBox(*map(float, vals)))
            except (TypeError, ValueError) as exc:
                raise DataFormatError(f"{path}:{lineno}: bad box line {line!r} ({exc})") from None
    return boxes


def write_boxes(path: Path, boxes: Iterable) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for b in boxes:
            t = b.as_tuple() if isinstance(b, BoundingBox) else tuple(b)
            fh.write(",".join(_fmt(v) for v in t) + "\n")


def _fmt(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else f"{v:.4f}".rstrip("0").rstrip(".")


def load_sequence(layout: DatasetLayout, name: str) -> FrameSequence:
    seq_dir = layout.root / name
    if not seq_dir.is_dir():
        raise FileNotFoundError(f"sequence directory {seq_dir} does not exist")
    frames = _frame_files(seq_dir)
    if not frames:
        raise DataFormatError(f"sequence {name!r} has no frames")
    gt = None
    gt_path = seq_dir / layout.ground_truth_file
    if gt_path.exists():
        gt = read_boxes(gt_path)
        if len(gt) != len(frames):
            raise DataFormatError(f"sequence {name!r}: {len(gt)} ground-truth lines for {len(frames)} frames")
    elif layout.labeled:
        raise DataFormatError(f"labeled sequence {name!r} lacks {layout.ground_truth_file}")
    attrs = frozenset()
    attr_path = seq_dir / layout.attribute_file
    if attr_path.exists():
        attrs = frozenset(t.strip() for t in attr_path.read_text(encoding="utf-8").splitlines() if t.strip())
    return FrameSequence(name, frames, gt, attrs)


def load_dataset(layout: DatasetLayout) -> list[FrameSequence]:
    return [load_sequence(layout, n) for n in layout.sequence_names()]


def write_sequence(root: Path, seq: FrameSequence, ext: str = ".png") -> Path:
    """Store a sequence in the dataset layout (frames, ground truth, attributes)."""
    from nightadapt.imaging import save_image

    seq_dir = Path(root) / seq.name
    seq_dir.mkdir(parents=True, exist_ok=True)
    for i in range(len(seq)):
        save_image(seq_dir / f"{i + 1:06d}{ext}", seq.frame(i))
    if seq.ground_truth is not None:
        write_boxes(seq_dir / GROUND_TRUTH_FILE, seq.ground_truth)
    if seq.attributes:
        (seq_dir / ATTRIBUTE_FILE).write_text("".join(f"{a}\n" for a in sorted(seq.attributes)), encoding="utf-8")
    return seq_dir


# -- configuration -------------------------------------------------------------

@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    discovery: DiscoveryConfig
    seed: int = 0
    raw: Optional[dict] = None

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return {"seed": self.seed, "model": self.model.to_dict(), "train": self.train.to_dict(),
                "discovery": asdict(self.discovery)}


def _build(cls, section: str, values: dict):
    from dataclasses import fields

    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown option {section}.{key}", key=f"{section}.{key}")
    try:
        return cls(**values)
    except ConfigError as exc:
        raise ConfigError(str(exc), key=f"{section}.{exc.key}" if exc.key else section) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} section: {exc}", key=section) from None


def parse_run_config(data: Optional[dict]) -> RunConfig:
    data = dict(data or {})
    for key in data:
        if key not in ("model", "train", "discovery", "seed", "data"):
            raise ConfigError(f"unknown config section {key!r}", key=key)
    model = dict(data.get("model") or {})
    backbone = model.pop("backbone", None) or {}
    from nightadapt.model import BackboneConfig

    try:
        model_cfg = _build(ModelConfig, "model", {**model, "backbone": _build(BackboneConfig, "model.backbone", backbone)})
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), key="model") from None
    train = _build(TrainConfig, "train", dict(data.get("train") or {}))
    disc = _build(DiscoveryConfig, "discovery", dict(data.get("discovery") or {}))
    if disc.template_size != model_cfg.template_size or disc.search_size != model_cfg.search_size:
        raise ConfigError("discovery and model patch sizes disagree", key="discovery.template_size")
    seed = data.get("seed", train.seed)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer", key="seed")
    return RunConfig(model_cfg, train, disc, seed, data)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_run_config(data)


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(path, net, model_config: ModelConfig, discriminator=None, extra: Optional[dict] = None) -> None:
    """One archive with every parameter as ``<module>.<layer>.<param>`` plus the model config."""
    state = {f"{k}": v.detach().clone() for k, v in net.state_dict().items()}
    if discriminator is not None:
        state.update({f"discriminator.{k}": v.detach().clone() for k, v in discriminator.state_dict().items()})
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format": CHECKPOINT_FORMAT, "kind": "network", "model_config": model_config.to_dict(),
                "state_dict": state, "extra": extra or {}}, str(path))


def save_oracle_checkpoint(path) -> None:
    """A checkpoint whose tracker replays ground truth; for pipeline checks."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format": CHECKPOINT_FORMAT, "kind": "oracle"}, str(path))


def load_checkpoint(path):
    """Returns ``(kind, net, discriminator, archive)``; networks are ``None`` for the oracle kind."""
    from nightadapt.model import SiameseNet, build_discriminator

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    try:
        archive = torch.load(str(path), map_location="cpu", weights_only=False)
    except Exception as exc:
        raise DataFormatError(f"{path}: unreadable checkpoint ({exc})") from None
    if not isinstance(archive, dict) or archive.get("format") != CHECKPOINT_FORMAT:
        raise DataFormatError(f"{path}: not a {CHECKPOINT_FORMAT} archive")
    if archive.get("kind") == "oracle":
        return "oracle", None, None, archive
    config = ModelConfig.from_dict(archive["model_config"])
    net = SiameseNet(config)
    state = archive["state_dict"]
    net.load_state_dict({k: v for k, v in state.items() if not k.startswith("discriminator.")})
    disc = None
    d_state = {k[len("discriminator."):]: v for k, v in state.items() if k.startswith("discriminator.")}
    if d_state:
        disc = build_discriminator(config)
        disc.load_state_dict(d_state)
    return "network", net, disc, archive


# -- manifests and CSVs ----------------------------------------------------------

def write_manifest(run_dir: Path, config: dict, seed: int, artifacts: dict, started: str) -> Path:
    path = Path(run_dir) / "manifest.json"
    payload = {"config": config, "seed": seed, "artifacts": artifacts, "started": started,
               "finished": now_iso()}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def now_iso() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_csv(path, header, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_track_csv(path, track: BoxTrack) -> None:
    """``frame_index,x,y,w,h,provenance``; frames without a box are omitted."""
    rows = [[i, *(_fmt(v) for v in box.as_tuple()), tag.value]
            for i, (box, tag) in enumerate(zip(track.boxes, track.provenance)) if box is not None]
    write_csv(path, ["frame_index", "x", "y", "w", "h", "provenance"], rows)


def read_track_csv(path, n_frames: int) -> BoxTrack:
    boxes = [None] * n_frames
    tags = [Provenance.MISSING] * n_frames
    with open(path, encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            i = int(row["frame_index"])
            boxes[i] = BoundingBox(float(row["x"]), float(row["y"]), float(row["w"]), float(row["h"]))
            tags[i] = Provenance(row["provenance"])
    return BoxTrack(tuple(boxes), tuple(tags))


def write_result_csv(path, boxes: np.ndarray) -> None:
    rows = [[i, *("nan" if np.isnan(v) else _fmt(v) for v in b)] for i, b in enumerate(np.asarray(boxes))]
    write_csv(path, ["frame", "x", "y", "w", "h"], rows)
