import math

import numpy as np
import pytest

from osis.losses import LossWeights
from osis.model import prepare_train_scene
from osis.train import Adam, OptimConfig, cosine_lr, scene_loss, train_step
from conftest import tiny_model, tiny_scene


def test_lr_zero_leaves_parameters_unchanged():
    model = tiny_model(0)
    scene = prepare_train_scene(tiny_scene(0), model.config.voxel_size)
    before = {p.name: p.data.copy() for p in model.parameters()}
    opt = Adam(model.parameters(), OptimConfig())
    train_step([scene], model, opt, 0.0, LossWeights(), 1.0)
    for p in model.parameters():
        assert np.array_equal(p.data, before[p.name]), p.name


def test_two_steps_usually_descend():
    wins = 0
    for seed in range(10):
        model = tiny_model(seed)
        scene = prepare_train_scene(tiny_scene(seed), model.config.voxel_size)
        t0, _ = scene_loss(model, scene, LossWeights(), 1.0)
        opt = Adam(model.parameters(), OptimConfig())
        train_step([scene], model, opt, 1e-3, LossWeights(), 1.0)
        train_step([scene], model, opt, 1e-3, LossWeights(), 1.0)
        t2, _ = scene_loss(model, scene, LossWeights(), 1.0)
        if t2.item() <= t0.item():
            wins += 1
    assert wins >= 8


def test_cosine_schedule_closed_form():
    lr0, e0, total = 0.001, 300, 1000
    assert cosine_lr(lr0, 0, total, e0) == lr0
    assert cosine_lr(lr0, 299, total, e0) == lr0
    for e in (300, 500, 650, 999):
        want = 0.5 * lr0 * (1 + math.cos(math.pi * (e - e0) / (total - e0)))
        assert cosine_lr(lr0, e, total, e0) == pytest.approx(want, abs=1e-18)
    assert cosine_lr(lr0, total, total, e0) == pytest.approx(0.0, abs=1e-12)


def test_gradient_accumulation_averages_scenes():
    model = tiny_model(1)
    scenes = [
        prepare_train_scene(tiny_scene(s), model.config.voxel_size) for s in (1, 2)
    ]
    model.zero_grad()
    g_avg = {}
    for s in scenes:
        total, _ = scene_loss(model, s, LossWeights(), 1.0)
        (total * 0.5).backward()
    for p in model.parameters():
        g_avg[p.name] = p.grad.copy()

    model.zero_grad()
    ga = {}
    for s in scenes:
        total, _ = scene_loss(model, s, LossWeights(), 1.0)
        total.backward()
    for p in model.parameters():
        assert np.allclose(g_avg[p.name], p.grad / 2.0, atol=1e-12), p.name


def test_train_step_requires_scenes():
    model = tiny_model(0)
    opt = Adam(model.parameters(), OptimConfig())
    with pytest.raises(ValueError):
        train_step([], model, opt, 1e-3, LossWeights(), 1.0)


def test_train_step_reports_averaged_breakdown():
    model = tiny_model(2)
    scenes = [
        prepare_train_scene(tiny_scene(s), model.config.voxel_size) for s in (3, 4)
    ]
    parts = []
    for s in scenes:
        _, bd = scene_loss(model, s, LossWeights(), 1.0)
        parts.append(bd.total)
    opt = Adam(model.parameters(), OptimConfig())
    bd = train_step(scenes, model, opt, 1e-3, LossWeights(), 1.0)
    assert bd.total == pytest.approx(np.mean(parts), abs=1e-12)
