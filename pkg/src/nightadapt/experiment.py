"""Toy-scale day-to-night experiments on the synthetic corpus.

Used by the acceptance suite: a source-only baseline is trained first, then
each ablation variant fine-tunes a copy of it with unlabeled night data.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import torch

from nightadapt.boxes import FrameSequence
from nightadapt.discovery import DiscoveryConfig, discover_track
from nightadapt.evaluation import Scores, SiameseTracker, domain_probe_accuracy, evaluate
from nightadapt.model import BackboneConfig, ModelConfig, SiameseNet, build_discriminator
from nightadapt.synthetic import SceneConfig, make_corpus
from nightadapt.training import PairSampler, TargetTrack, Trainer, TrainConfig, seed_everything

log = logging.getLogger(__name__)

TOY_MODEL = ModelConfig(
    backbone=BackboneConfig(channels=(16, 32, 32, 32), strides=(2, 2, 1, 1), used_blocks=2),
    bridge_heads=4,
    bridge_ffn_hidden=128,
    head_channels=32,
    template_size=32,
    search_size=64,
)
TOY_CROP = DiscoveryConfig(template_size=32, search_size=64, min_region_area=16)
# source-only pretraining of the baseline tracker
TOY_PRETRAIN = TrainConfig(epochs=1, steps_per_epoch=600, batch_size=16, base_lr_bridging=1e-3, use_da=False)
# adaptation: 20 epochs; the transformer discriminator needs a smaller step than the convolutional parts
TOY_ADAPT = TrainConfig(epochs=20, steps_per_epoch=20, batch_size=16, base_lr_bridging=1e-3,
                        base_lr_backbone=2e-4, base_lr_discriminator=1e-4)

# DA / OD / BL toggles
VARIANTS = {
    "baseline": None,
    "da_random": dict(use_da=True, discovery=False, bridge=False),
    "da_od": dict(use_da=True, discovery=True, bridge=False),
    "full": dict(use_da=True, discovery=True, bridge=True),
}


@dataclass
class Corpus:
    source: list[FrameSequence]
    target: list[FrameSequence]
    target_test: list[FrameSequence]
    source_test: list[FrameSequence]


def make_toy_corpus(n_train: int = 200, n_test: int = 40, seed: int = 1234,
                    scene: SceneConfig = SceneConfig()) -> Corpus:
    return Corpus(
        source=make_corpus(n_train, "day", seed, scene),
        target=make_corpus(n_train, "night", seed + 1, scene),
        target_test=make_corpus(n_test, "night", seed + 2, scene),
        source_test=make_corpus(n_test, "day", seed + 3, scene),
    )


def discovered_targets(target: Sequence[FrameSequence], crop: DiscoveryConfig) -> list[TargetTrack]:
    out = []
    for seq in target:
        frames = [seq.frame(i) for i in range(len(seq))]
        try:
            track = discover_track(frames, crop).track
        except ValueError:
            continue
        out.append(TargetTrack(frames, track))
    return out


def random_targets(target: Sequence[FrameSequence]) -> list[TargetTrack]:
    return [TargetTrack([seq.frame(i) for i in range(len(seq))], None) for seq in target]


def train_model(net: SiameseNet, source, targets, config: TrainConfig, crop: DiscoveryConfig = TOY_CROP,
                log_path=None):
    rng = seed_everything(config.seed)
    disc = build_discriminator(net.config) if config.use_da else None
    trainer = Trainer(net, disc, config)
    sampler = PairSampler(source, targets, crop, config, rng)
    records = trainer.fit(sampler, log_path=log_path)
    return trainer, records


def pretrain_baseline(corpus: Corpus, seed: int, config: TrainConfig,
                      model: ModelConfig = TOY_MODEL) -> SiameseNet:
    torch.manual_seed(seed)
    net = SiameseNet(replace(model, use_bridge=False))
    cfg = replace(config, use_da=False, seed=seed)
    train_model(net, corpus.source, random_targets(corpus.target[:1]), cfg)
    return net


def adapt(baseline: SiameseNet, corpus: Corpus, variant: str, seed: int, config: TrainConfig,
          targets_od=None, targets_random=None):
    """Fine-tune a copy of ``baseline`` with one ablation variant; returns the net and loss records."""
    toggles = VARIANTS[variant]
    if toggles is None:
        return baseline, []
    torch.manual_seed(seed)
    net = SiameseNet(replace(baseline.config, use_bridge=toggles["bridge"]))
    state = {k: v for k, v in baseline.state_dict().items()}
    missing, unexpected = net.load_state_dict(state, strict=False)
    assert not unexpected
    if toggles["discovery"]:
        targets = targets_od if targets_od is not None else discovered_targets(corpus.target, TOY_CROP)
    else:
        targets = targets_random if targets_random is not None else random_targets(corpus.target)
    _, records = train_model(net, corpus.source, targets, replace(config, use_da=toggles["use_da"], seed=seed))
    return net, records


def track_scores(net: SiameseNet, sequences: Sequence[FrameSequence], crop: DiscoveryConfig = TOY_CROP) -> Scores:
    _, s = evaluate(sequences, lambda seq: SiameseTracker(net, crop))
    return s


@torch.no_grad()
def pooled_features(net: SiameseNet, sequences: Sequence[FrameSequence], bridged: bool,
                    crop: DiscoveryConfig = TOY_CROP, frame_step: int = 5) -> np.ndarray:
    """Spatially averaged search-patch features around the ground truth, every ``frame_step``-th frame."""
    from nightadapt.discovery import crop_search

    net.eval()
    patches = []
    for seq in sequences:
        for i in range(0, len(seq), frame_step):
            x, _ = crop_search(seq.frame(i), seq.ground_truth[i], crop)
            patches.append(x)
    t = torch.from_numpy(np.stack(patches).astype(np.float32)).permute(0, 3, 1, 2)
    f = net.features(t)
    if bridged:
        f = net.bridged(f)
    return f.mean(dim=(2, 3)).numpy()


def probe_gap(baseline: SiameseNet, adapted: SiameseNet, day, night, seed: int = 0, frame_step: int = 5):
    """Domain-probe accuracy on baseline backbone features and on adapted bridged features."""
    feats = lambda net, seqs, bridged: pooled_features(net, seqs, bridged, frame_step=frame_step)
    raw = domain_probe_accuracy(feats(baseline, day, False), feats(baseline, night, False), seed)
    bridged = domain_probe_accuracy(feats(adapted, day, True), feats(adapted, night, True), seed)
    return raw, bridged


@dataclass
class AblationResult:
    seeds: list
    night_success: dict  # variant -> per-seed target-domain success AUC
    day_success: dict
    nets: dict  # variant -> adapted net of the first seed
    records: dict  # variant -> loss records of the first seed

    def mean(self, variant: str) -> float:
        return float(np.mean(self.night_success[variant]))


def run_ablation(corpus: Corpus, seeds: Sequence[int] = (0, 1, 2), pretrain: TrainConfig = TOY_PRETRAIN,
                 config: TrainConfig = TOY_ADAPT, variants: Sequence[str] = tuple(VARIANTS)) -> AblationResult:
    """Pretrain one baseline per seed, adapt it with every variant, score on held-out night and day."""
    od = discovered_targets(corpus.target, TOY_CROP)
    rnd = random_targets(corpus.target)
    out = AblationResult(list(seeds), {v: [] for v in variants}, {v: [] for v in variants}, {}, {})
    for seed in seeds:
        base = pretrain_baseline(corpus, seed, pretrain)
        for v in variants:
            net, records = adapt(base, corpus, v, seed, config, targets_od=od, targets_random=rnd)
            out.night_success[v].append(track_scores(net, corpus.target_test).success)
            out.day_success[v].append(track_scores(net, corpus.source_test).success)
            log.info("seed %d %s night %.3f day %.3f", seed, v, out.night_success[v][-1], out.day_success[v][-1])
            if seed == seeds[0]:
                out.nets[v] = net
                out.records[v] = records
    return out
