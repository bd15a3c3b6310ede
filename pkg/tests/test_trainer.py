import json
import math

import numpy as np
import pytest
import torch

from fgsb.dataset import DatasetManifest
from fgsb.trainer import (AblationFlags, NonFiniteLossError, Trainer, TrainConfig, apply_ablation, load_bundle,
                          load_checkpoint, lr_at, train)


def _snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _same(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


# ------------------------------------------------------------------ schedule

def test_lr_schedule():
    cfg = TrainConfig(epochs=200)
    assert lr_at(0, cfg) == 1e-4
    assert lr_at(99, cfg) == 1e-4
    assert lr_at(150, cfg) == pytest.approx(0.5e-4)
    assert lr_at(199, cfg) == pytest.approx(1e-4 / 100)
    with pytest.raises(ValueError):
        lr_at(200, cfg)
    with pytest.raises(ValueError):
        lr_at(-1, cfg)
    assert lr_at(40, TrainConfig(epochs=50, lr_decay_start=30)) == pytest.approx(0.5e-4)
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, lr_decay_start=10)


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        TrainConfig(epoch=3)
    with pytest.raises(ValueError):
        TrainConfig.model_validate({"weights": {"lambda_foo": 1.0}})


# ------------------------------------------------------------------ ablations

def test_ablation_components():
    full = apply_ablation(TrainConfig())
    assert full.terms == {"adv", "sb", "rec", "reg", "cpl", "wreg", "idt"}
    assert full.nfe == 5 and full.use_critic and full.ssl_decoders and full.tau == 0.01
    nosb = apply_ablation(TrainConfig(flags=AblationFlags(no_sb=True)))
    assert nosb.nfe == 1 and not nosb.use_critic and not nosb.iterative
    assert nosb.terms == {"adv", "rec", "reg"}
    assert apply_ablation(TrainConfig(flags=AblationFlags(no_noise=True))).tau == 0.0
    assert not apply_ablation(TrainConfig(flags=AblationFlags(no_ssl_d=True))).ssl_decoders
    noprior = apply_ablation(TrainConfig(flags=AblationFlags(use_prior=False)))
    assert noprior.terms == {"adv", "sb", "rec", "reg", "idt"}
    zero = apply_ablation(TrainConfig(weights={"lambda_idt": 0.0}))
    assert "idt" not in zero.terms


def test_no_sb_builds_no_critic(tiny_train):
    tr = Trainer(tiny_train(flags=AblationFlags(no_sb=True)), (16, 16))
    assert tr.bundle.critic is None and "critic" not in tr.opt


# ------------------------------------------------------------------ steps

def test_generation_pass(tiny_train, phantom16):
    tr = Trainer(tiny_train(), (16, 16))
    x = torch.as_tensor(phantom16.pairs[0].source)[None, None]
    y = torch.as_tensor(phantom16.pairs[0].target)[None, None]
    g0 = tr.generate(x, y, 0)
    assert torch.equal(g0.x_t, x) and g0.intermediates == []
    g3 = tr.generate(x, y, 3)
    assert len(g3.intermediates) == 3 and g3.x_hat.requires_grad
    assert not any(t.requires_grad for t in g3.intermediates)


def test_generation_noiseless_recursion(tiny_train, phantom16):
    tr = Trainer(tiny_train(flags=AblationFlags(no_noise=True)), (16, 16))
    x = torch.as_tensor(phantom16.pairs[0].source)[None, None]
    y = torch.as_tensor(phantom16.pairs[0].target)[None, None]
    res = tr.generate(x, y, 2)
    s = tr.comp.s_schedule
    expected = s[2] * y + (1 - s[2]) * res.intermediates[1]
    torch.testing.assert_close(res.x_t, expected)


def test_lr_zero_keeps_parameters(tiny_train, phantom16):
    tr = Trainer(tiny_train(), (16, 16))
    tr.set_lr(0.0)
    before = {k: _snapshot(n) for k, n in tr.bundle.networks().items()}
    pool = phantom16.subset("train")
    for _ in range(3):
        tr.train_step([pool[0]], pool)
    for k, n in tr.bundle.networks().items():
        assert _same(before[k], _snapshot(n)), k


def test_step_determinism(tiny_train, phantom16):
    pool = phantom16.subset("train")
    states = []
    for _ in range(2):
        tr = Trainer(tiny_train(seed=5), (16, 16))
        reports = [tr.train_step([pool[i]], pool).as_dict() for i in range(3)]
        states.append(({k: _snapshot(n) for k, n in tr.bundle.networks().items()}, reports))
    (a, ra), (b, rb) = states
    assert ra == rb
    assert all(_same(a[k], b[k]) for k in a)


def test_update_order_and_isolation(tiny_train, phantom16):
    pool = phantom16.subset("train")
    tr = Trainer(tiny_train(), (16, 16))
    order = []
    for name, opt in tr.opt.items():
        orig = opt.step
        opt.step = (lambda o, n: (lambda *a, **k: (order.append(n), o(*a, **k))[1]))(orig, name)
    tr.train_step([pool[0]], pool)
    assert order == ["discriminator", "critic", "generator"]

    # freeze everything except the generator: D and E must not move
    tr2 = Trainer(tiny_train(), (16, 16))
    for name, opt in tr2.opt.items():
        if name != "generator":
            for grp in opt.param_groups:
                grp["lr"] = 0.0
    d0, e0, g0 = (_snapshot(tr2.bundle.discriminator), _snapshot(tr2.bundle.critic),
                  _snapshot(tr2.bundle.generator))
    tr2.train_step([pool[0]], pool)
    assert _same(d0, _snapshot(tr2.bundle.discriminator))
    assert _same(e0, _snapshot(tr2.bundle.critic))
    assert not _same(g0, _snapshot(tr2.bundle.generator))

    # and the reverse: a discriminator-only update leaves G untouched
    tr3 = Trainer(tiny_train(), (16, 16))
    tr3.opt["generator"].param_groups[0]["lr"] = 0.0
    g0 = _snapshot(tr3.bundle.generator)
    tr3.train_step([pool[0]], pool)
    assert _same(g0, _snapshot(tr3.bundle.generator))


def test_hundred_finite_steps(tiny_train, phantom16):
    pool = phantom16.subset("train")
    tr = Trainer(tiny_train(), (16, 16))
    for i in range(100):
        rep = tr.train_step([pool[i % len(pool)]], pool)
        vals = list(rep.as_dict().values())
        assert all(math.isfinite(v) for v in vals)
        assert rep.total == pytest.approx(sum(rep.weights[k] * rep.terms[k] for k in rep.terms))


def test_batched_step(tiny_train, phantom16):
    pool = phantom16.subset("train")
    tr = Trainer(tiny_train(batch_size=2), (16, 16))
    rep = tr.train_step(pool[:2], pool)
    assert math.isfinite(rep.total)


def test_nonfinite_names_term(tiny_train, phantom16):
    pool = phantom16.subset("train")
    tr = Trainer(tiny_train(), (16, 16))
    with torch.no_grad():
        tr.bundle.discriminator.score.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError) as info:
        tr.train_step([pool[0]], pool)
    assert info.value.term.startswith("D/")
    assert "D/" in str(info.value)


def test_negatives_exclude_current(tiny_train, phantom16):
    pool = phantom16.subset("train")
    tr = Trainer(tiny_train(), (16, 16))
    cur = pool[2]
    x_b = torch.as_tensor(cur.target)[None, None]
    for _ in range(50):
        neg, _ = tr._negatives(x_b, None, pool, cur)
        assert not torch.equal(neg, x_b)
    with pytest.raises(ValueError):
        tr._negatives(x_b, None, pool[:1], cur)


def test_threshold_prior(tiny_train, phantom16):
    tr = Trainer(tiny_train(prior_source="threshold", prior_threshold=0.5), (16, 16))
    pool = phantom16.subset("train")
    assert math.isfinite(tr.train_step([pool[0]], pool).total)


# ------------------------------------------------------------------ runs

def test_train_writes_checkpoint(tiny_train, phantom16, tmp_path):
    small = DatasetManifest(phantom16.pairs[:4], phantom16.splits, phantom16.canvas)
    trainer, hist = train(small, tiny_train(epochs=1), tmp_path)
    assert (tmp_path / "checkpoints" / "last.pt").exists()
    assert (tmp_path / "checkpoints" / "epoch_0001.pt").exists()
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == len(hist) == len(small.subset("train"))
    rec = json.loads(lines[0])
    assert {"epoch", "step", "lr", "G/total", "D/total", "T"} <= set(rec)
    state = load_checkpoint(tmp_path / "checkpoints" / "last.pt")
    assert state["format"] == "fgsb-checkpoint" and state["epoch"] == 1
    assert set(state["networks"]) == {"generator", "discriminator", "critic", "projector"}
    bundle, cfg = load_bundle(tmp_path / "checkpoints" / "last.pt")
    assert _same(_snapshot(bundle.generator), _snapshot(trainer.bundle.generator))
    assert bundle.canvas == (16, 16)


def test_train_empty_split(tiny_train, phantom16):
    empty = DatasetManifest(phantom16.subset("test"), phantom16.splits, phantom16.canvas)
    with pytest.raises(ValueError):
        train(empty, tiny_train())


def test_no_ssl_d_checkpoint(tiny_train, phantom16, tmp_path):
    train(phantom16, tiny_train(epochs=1, flags=AblationFlags(no_ssl_d=True)), tmp_path)
    state = load_checkpoint(tmp_path / "checkpoints" / "last.pt")
    keys = list(state["networks"]["discriminator"])
    assert keys and not any(k.startswith(("dec_resize", "dec_crop")) for k in keys)


def test_fixed_seed_streams_identical(tiny_train, phantom16, tmp_path):
    for name in ("a", "b"):
        train(phantom16, tiny_train(epochs=2, seed=9), tmp_path / name)
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_resume_bit_exact(tiny_train, phantom16, tmp_path):
    cfg = tiny_train(epochs=3, seed=4)
    full, _ = train(phantom16, cfg, tmp_path / "full")
    train(phantom16, cfg, tmp_path / "part", stop_after=1)
    resumed, _ = train(phantom16, cfg, tmp_path / "part", resume=tmp_path / "part" / "checkpoints" / "last.pt")
    for k, net in full.bundle.networks().items():
        assert _same(_snapshot(net), _snapshot(resumed.bundle.networks()[k])), k
    for k in full.opt:
        a, b = full.opt[k].state_dict()["state"], resumed.opt[k].state_dict()["state"]
        assert all(torch.equal(a[i]["exp_avg"], b[i]["exp_avg"]) for i in a)
    assert (tmp_path / "full" / "metrics.jsonl").read_bytes() == (tmp_path / "part" / "metrics.jsonl").read_bytes()


def test_resume_rejects_other_config(tiny_train, phantom16, tmp_path):
    train(phantom16, tiny_train(epochs=1), tmp_path)
    other = Trainer(tiny_train(epochs=1, seed=1), (16, 16))
    with pytest.raises(ValueError):
        other.load_state_dict(load_checkpoint(tmp_path / "checkpoints" / "last.pt"))


def test_from_checkpoint(tiny_train, phantom16, tmp_path):
    tr, _ = train(phantom16, tiny_train(epochs=1), tmp_path)
    back = Trainer.from_checkpoint(tmp_path / "checkpoints" / "last.pt")
    assert back.epoch == 1 and back.global_step == tr.global_step
    bad = tmp_path / "bad.pt"
    torch.save({"format": "other"}, bad)
    with pytest.raises(ValueError):
        load_checkpoint(bad)


def test_epoch_order_is_seeded(tiny_train):
    a = Trainer(tiny_train(seed=1), (16, 16)).epoch_order(3, 20)
    b = Trainer(tiny_train(seed=1), (16, 16)).epoch_order(3, 20)
    assert np.array_equal(a, b) and sorted(a) == list(range(20))
