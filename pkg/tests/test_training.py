import csv
import math

import numpy as np
import pytest
import torch

from nightadapt.errors import BatchError, ConfigError, DataFormatError
from nightadapt.model import SiameseNet, build_discriminator, score_map_points
from nightadapt.training import (
    DomainBatch, LossRecord, PairSampler, Trainer, TrainConfig, adversarial_loss, discriminator_loss, poly_lr,
    positive_mask, seed_everything, total_loss, tracking_loss,
)

from helpers import TINY_CROP, TINY_MODEL, tiny_domains

CFG = TrainConfig()


def t(*v):
    return torch.tensor(v, dtype=torch.float64)


# -- configuration --------------------------------------------------------------------

def test_defaults():
    assert CFG.lambda_adv == 0.01
    assert CFG.base_lr_discriminator == 0.005 and CFG.base_lr_bridging == 0.005
    assert CFG.poly_power == 0.8 and CFG.epochs == 20 and CFG.adam_betas == (0.9, 0.999)


def test_config_errors_name_the_key():
    with pytest.raises(ConfigError) as err:
        TrainConfig(mode="sideways")
    assert err.value.key == "mode"
    with pytest.raises(ConfigError) as err:
        TrainConfig.from_dict({"batch_sise": 3})
    assert "batch_sise" in str(err.value)


def test_config_round_trip():
    c = TrainConfig(epochs=3, base_lr_backbone=0.001)
    assert TrainConfig.from_dict(c.to_dict()) == c


# -- losses ----------------------------------------------------------------------

def test_adversarial_loss_examples():
    assert adversarial_loss(t(1.0), t(1.0), CFG).item() == 0.0
    assert adversarial_loss(t(0.0), t(0.0), CFG).item() == 2.0
    assert abs(adversarial_loss(t(0.5), t(1.0), CFG).item() - 0.25) < 1e-9


def test_adversarial_loss_is_mean_per_term():
    v = adversarial_loss(t(0.0, 1.0), t(0.5, 0.5, 0.5), CFG).item()
    assert abs(v - (0.5 + 0.25)) < 1e-12


def test_discriminator_loss_examples():
    assert discriminator_loss(t(1.0), t(1.0), t(0.0), t(0.0), CFG).item() == 0.0
    half = t(0.5)
    assert abs(discriminator_loss(half, half, half, half, CFG).item() - 1.0) < 1e-9
    assert abs(discriminator_loss(t(0.0), t(0.0), t(1.0), t(1.0), CFG).item() - 4.0) < 1e-9


def test_loss_nonnegative_and_zero_only_at_labels(rng):
    for _ in range(50):
        s = [torch.from_numpy(rng.uniform(-1, 2, 3)) for _ in range(4)]
        assert discriminator_loss(*s, CFG).item() > 0
        assert adversarial_loss(s[0], s[1], CFG).item() > 0


def test_total_loss_examples():
    assert abs(total_loss(1.0, 2.0, CFG) - 1.02) < 1e-15
    assert total_loss(0.7, 0.0, CFG) == 0.7
    assert total_loss(0.7, 5.0, TrainConfig(lambda_adv=0.0)) == 0.7


def test_poly_lr():
    assert poly_lr(0, 100, 0.005, 0.8) == 0.005
    assert poly_lr(100, 100, 0.005, 0.8) == 0.0
    assert abs(poly_lr(50, 100, 0.005, 0.8) - 0.005 * 0.5 ** 0.8) < 1e-9
    assert abs(0.005 * 0.5 ** 0.8 - 0.002872) < 1e-6
    vals = [poly_lr(s, 37, 0.01, 0.8) for s in range(38)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        poly_lr(101, 100, 0.005, 0.8)


# -- tracking loss ------------------------------------------------------------------

def _perfect_reg(gt, size, stride, search):
    pts = score_map_points(size, stride, search)
    x0, y0, w, h = gt
    xs, ys = pts[None, :], pts[:, None]
    reg = torch.stack([(xs - x0).expand(size, size), (ys - y0).expand(size, size),
                       (x0 + w - xs).expand(size, size), (y0 + h - ys).expand(size, size)])
    return reg[None]


def test_tracking_loss_perfect_regression_and_saturated_logits():
    gt = torch.tensor([[20.0, 22.0, 24.0, 20.0]], dtype=torch.float64)
    reg = _perfect_reg(gt[0].tolist(), 9, 4, 64)
    pos = positive_mask(gt, (9, 9), 4, 64)
    logits = torch.where(pos, 60.0, -60.0)[:, None].double()
    total, bce, iou = tracking_loss(logits, reg, gt, 4, 64)
    assert iou.item() == pytest.approx(0.0, abs=1e-12)
    assert bce.item() < 1e-20


def test_tracking_loss_zero_logits_is_ln2():
    gt = torch.tensor([[20.0, 22.0, 24.0, 20.0]])
    _, bce, _ = tracking_loss(torch.zeros(1, 1, 9, 9), torch.ones(1, 4, 9, 9), gt, 4, 64)
    assert bce.item() == pytest.approx(math.log(2), abs=1e-6)


def test_tracking_loss_rejects_outside_box():
    with pytest.raises(DataFormatError):
        tracking_loss(torch.zeros(1, 1, 9, 9), torch.ones(1, 4, 9, 9), torch.tensor([[70.0, 10, 5, 5]]), 4, 64)


def test_positive_mask_never_empty():
    m = positive_mask(torch.tensor([[30.0, 30.0, 0.5, 0.5]]), (9, 9), 4, 64)
    assert m.sum() == 1


# -- batches ---------------------------------------------------------------------

def test_empty_batch_side_is_error():
    z, x = torch.zeros(1, 3, 32, 32), torch.zeros(1, 3, 64, 64)
    with pytest.raises(BatchError):
        DomainBatch(z, x, torch.zeros(1, 4), z[:0], x[:0])
    with pytest.raises(BatchError):
        DomainBatch(z[:0], x[:0], torch.zeros(0, 4), z, x)


def test_sampler_shapes_and_boxes():
    day, _, targets = tiny_domains()
    sampler = PairSampler(day, targets, TINY_CROP, CFG, np.random.default_rng(0))
    b = sampler.sample(4)
    assert b.source_templates.shape == (4, 3, 32, 32) and b.target_searches.shape == (4, 3, 64, 64)
    assert ((b.source_boxes[:, 0] + b.source_boxes[:, 2] > 0) & (b.source_boxes[:, 0] < 64)).all()


def test_sampler_needs_labeled_source():
    _, night, targets = tiny_domains()
    unlabeled = [type(s)(s.name, s.frames, None) for s in night]
    with pytest.raises(DataFormatError):
        PairSampler(unlabeled, targets, TINY_CROP, CFG, np.random.default_rng(0))


# -- training steps -------------------------------------------------------------------

def _setup(mode="alternating", lam=0.01, use_da=True, seed=0):
    cfg = TrainConfig(mode=mode, lambda_adv=lam, use_da=use_da, epochs=2, steps_per_epoch=3, batch_size=2,
                      seed=seed)
    torch.manual_seed(seed)
    net = SiameseNet(TINY_MODEL)
    disc = build_discriminator(TINY_MODEL) if use_da else None
    day, _, targets = tiny_domains()
    sampler = PairSampler(day, targets, TINY_CROP, cfg, np.random.default_rng(seed))
    return net, disc, Trainer(net, disc, cfg), sampler


def _snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _same(a, b):
    return all(torch.equal(a[k], b[k]) for k in a)


def _changed(a, b):
    return {k for k in a if not torch.equal(a[k], b[k])}


def test_phase_contract_bitwise():
    net, disc, trainer, sampler = _setup()
    seen_g, seen_d = set(), set()
    for _ in range(5):
        batch = sampler.sample(2)
        g0, d0 = _snapshot(net), _snapshot(disc)
        hook = {}
        orig = trainer.opt_d.step

        def d_step(*a, **k):
            hook["g_before_d"] = _snapshot(net)
            hook["d_before_d"] = _snapshot(disc)
            return orig(*a, **k)

        trainer.opt_d.step = d_step
        trainer.train_step(batch)
        trainer.opt_d.step = orig
        g2, d2 = _snapshot(net), _snapshot(disc)
        # phase 1 left D untouched
        assert _same(d0, hook["d_before_d"])
        # phase 2 left the generator untouched
        assert _same(hook["g_before_d"], g2)
        seen_g |= _changed(g0, hook["g_before_d"])
        seen_d |= _changed(hook["d_before_d"], d2)
    assert seen_g and seen_d


def test_zero_lambda_equals_tracking_only_update():
    net_a, _, tr_a, sampler_a = _setup(lam=0.0)
    net_b, _, tr_b, sampler_b = _setup(use_da=False)
    for _ in range(3):
        tr_a.train_step(sampler_a.sample(2))
        tr_b.train_step(sampler_b.sample(2))
    assert _same(_snapshot(net_a), _snapshot(net_b))


def test_grl_mode_updates_both():
    net, disc, trainer, sampler = _setup(mode="grl")
    g0, d0 = _snapshot(net), _snapshot(disc)
    rec = trainer.train_step(sampler.sample(2))
    assert _changed(g0, _snapshot(net)) and _changed(d0, _snapshot(disc))
    assert rec.l_total == rec.l_gt + 0.01 * rec.l_adv


def test_no_da_records_blank_discriminator_loss():
    _, _, trainer, sampler = _setup(use_da=False)
    rec = trainer.train_step(sampler.sample(2))
    assert rec.l_d is None and rec.l_adv == 0.0
    assert rec.row()[4] == ""


def test_fit_log_and_determinism(tmp_path):
    logs = []
    for run in range(2):
        _, _, trainer, sampler = _setup()
        path = tmp_path / f"loss{run}.csv"
        records = trainer.fit(sampler, log_path=path)
        assert len(records) == 6
        logs.append(path.read_bytes())
    assert logs[0] == logs[1]
    rows = list(csv.DictReader(open(tmp_path / "loss0.csv")))
    assert list(rows[0]) == ["step", "l_gt", "l_adv", "l_total", "l_d", "lr"]
    for r in rows:
        assert float(r["l_total"]) == float(r["l_gt"]) + 0.01 * float(r["l_adv"])
    assert float(rows[0]["lr"]) == 0.005


def test_learning_rate_follows_poly_schedule():
    _, _, trainer, sampler = _setup()
    lrs = [trainer.train_step(sampler.sample(2)).lr for _ in range(6)]
    assert lrs == [poly_lr(s, 6, 0.005, 0.8) for s in range(6)]


def test_seed_everything_is_repeatable():
    a = seed_everything(3).random(3)
    ta = torch.rand(2)
    b = seed_everything(3).random(3)
    tb = torch.rand(2)
    assert np.array_equal(a, b) and torch.equal(ta, tb)


def test_loss_record_row_format():
    assert LossRecord(3, 1.5, 0.25, 1.5025, None, 0.001).row() == ["3", "1.5", "0.25", "1.5025", "", "0.001"]
