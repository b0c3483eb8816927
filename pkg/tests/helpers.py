"""Small shared fixtures for training-related tests."""

from nightadapt.discovery import DiscoveryConfig
from nightadapt.model import BackboneConfig, ModelConfig
from nightadapt.synthetic import SceneConfig, make_corpus
from nightadapt.training import TargetTrack

TINY_MODEL = ModelConfig(backbone=BackboneConfig(channels=(8, 8, 8, 8), strides=(2, 2, 1, 1), used_blocks=2),
                         bridge_ffn_hidden=16, head_channels=8, template_size=32, search_size=64,
                         disc_embed=16, disc_heads=2, disc_ffn_hidden=32)
TINY_CROP = DiscoveryConfig(template_size=32, search_size=64)
TINY_SCENE = SceneConfig(frame_size=64, n_frames=6)


def tiny_domains(n=3, seed=0):
    day = make_corpus(n, "day", seed, TINY_SCENE)
    night = make_corpus(n, "night", seed + 1, TINY_SCENE)
    targets = [TargetTrack([s.frame(i) for i in range(len(s))], None) for s in night]
    return day, night, targets
