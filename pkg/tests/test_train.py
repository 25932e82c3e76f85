import math

import numpy as np
import pytest
import torch

from octplaque.augment import AugmentPolicy
from octplaque.data.arrays import load_arrays
from octplaque.evaluation import model_selection_f1
from octplaque.models import BackboneConfig, build_single_path
from octplaque.train import (
    Experiment,
    PlateauScheduler,
    TrainConfig,
    evaluate_experiment,
    grid_search,
    load_checkpoint,
    one_hot,
    plateau_scheduler,
    run_experiment,
    train_model,
    weighted_cross_entropy,
)


@pytest.fixture(scope="module")
def split_arrays(small_dataset):
    pats = small_dataset.patients
    return (
        load_arrays(small_dataset.subset(pats[:4]), 2, 60),
        load_arrays(small_dataset.subset(pats[4:]), 2, 60),
    )


# loss


def test_uniform_logits_give_log_m():
    loss = weighted_cross_entropy(torch.zeros(4, 3, dtype=torch.float64), one_hot([0, 1, 2, 0], 3), torch.ones(3))
    assert abs(loss.item() - math.log(3)) < 1e-12


def test_weighted_hand_example():
    logits = torch.tensor([[0.0, math.log(3)]], dtype=torch.float64)
    loss = weighted_cross_entropy(logits, one_hot([0], 2), torch.tensor([2.0, 1.0]))
    assert abs(loss.item() - 2 * -math.log(0.25)) < 1e-12
    assert abs(loss.item() - 2.7726) < 1e-4


def test_saturated_and_huge_logits():
    logits = torch.full((2, 3), -30.0, dtype=torch.float64)
    logits[0, 1] = logits[1, 2] = 30.0
    assert weighted_cross_entropy(logits, one_hot([1, 2], 3), torch.ones(3)).item() < 1e-9
    huge = torch.tensor([[1e4, -1e4], [-1e4, 1e4]], dtype=torch.float32)
    loss = weighted_cross_entropy(huge, one_hot([1, 1], 2), torch.ones(2))
    assert torch.isfinite(loss) and abs(loss.item() - 1e4) < 1.0


@pytest.mark.parametrize(
    "labels,weights",
    [
        ([[0.5, 0.5]], [1.0, 1.0]),
        ([[1.0, 1.0]], [1.0, 1.0]),
        ([[1.0, 0.0]], [0.0, 1.0]),
        ([[1.0, 0.0]], [1.0]),
    ],
)
def test_loss_rejects_bad_inputs(labels, weights):
    with pytest.raises(ValueError):
        weighted_cross_entropy(torch.zeros(1, 2), torch.tensor(labels), torch.tensor(weights))


def test_loss_gradient_matches_closed_form_and_finite_differences():
    gen = torch.Generator().manual_seed(0)
    logits = torch.randn(6, 3, dtype=torch.float64, generator=gen, requires_grad=True)
    labels = one_hot([0, 1, 2, 2, 1, 0], 3, torch.float64)
    weights = torch.tensor([0.5, 1.5, 3.0], dtype=torch.float64)
    weighted_cross_entropy(logits, labels, weights).backward()
    soft = torch.softmax(logits.detach(), dim=1)
    closed = (labels @ weights)[:, None] * (soft - labels) / 6
    assert torch.allclose(logits.grad, closed, atol=1e-14)
    eps = 1e-6
    base = logits.detach()
    for i in range(6):
        for j in range(3):
            up, down = base.clone(), base.clone()
            up[i, j] += eps
            down[i, j] -= eps
            fd = (weighted_cross_entropy(up, labels, weights) - weighted_cross_entropy(down, labels, weights)) / (
                2 * eps
            )
            assert abs(fd.item() - logits.grad[i, j].item()) <= 1e-6 * max(abs(fd.item()), 1e-3)


# schedule


def test_decreasing_loss_keeps_lr():
    cfg = TrainConfig(lr0=1e-3, plateau_patience=3)
    assert plateau_scheduler([1.0 - 0.01 * i for i in range(50)], cfg) == 1e-3


def test_flat_loss_halves_at_6_and_11():
    sched = PlateauScheduler(1e-3, patience=5)
    lrs = [sched.step(1.0) for _ in range(12)]
    drops = [epoch for epoch in range(2, 13) if lrs[epoch - 1] < lrs[epoch - 2]]
    assert drops == [6, 11]
    assert lrs[-1] == 1e-3 / 4


def test_infinite_min_delta_halves_every_window():
    sched = PlateauScheduler(1.0, patience=4, min_delta=math.inf)
    lrs = [sched.step(1.0 - 0.1 * i) for i in range(12)]
    assert lrs == [1.0] * 3 + [0.5] * 4 + [0.25] * 4 + [0.125]


def test_lr_trace_is_powers_of_two():
    rng = np.random.default_rng(0)
    sched = PlateauScheduler(3e-4, patience=2)
    for _ in range(200):
        lr = sched.step(float(rng.random()))
        j = math.log2(3e-4 / lr)
        assert abs(j - round(j)) < 1e-12 and round(j) >= 0


def test_train_config_defaults():
    cfg = TrainConfig()
    assert cfg.lr0 == 1e-4
    assert cfg.resolved_batch_size(False) == 30 and cfg.resolved_batch_size(True) == 20
    with pytest.raises(ValueError):
        TrainConfig(lr0=0.0)
    with pytest.raises(ValueError):
        TrainConfig(plateau_factor=1.0)
    with pytest.raises(ValueError):
        TrainConfig(class_weights=[1.0, -1.0])


# training loop


def quick(representation="cartesian", epochs=2, **train):
    return Experiment(
        representation=representation,
        train=TrainConfig(lr0=1e-3, epochs=epochs, **train),
    )


def test_seeded_runs_are_identical(split_arrays):
    train, val = split_arrays
    _, a = run_experiment(quick(), train, val)
    _, b = run_experiment(quick(), train, val)
    assert a.train_losses == b.train_losses
    assert [r.val_loss for r in a.epochs] == [r.val_loss for r in b.epochs]
    _, c = run_experiment(quick(seed=1), train, val)
    assert c.train_losses != a.train_losses


def test_history_shape_and_lr_invariant(split_arrays, tmp_path):
    train, val = split_arrays
    _, hist = run_experiment(quick(epochs=4, plateau_patience=1, min_delta=math.inf), train, val)
    assert len(hist.epochs) == 4
    assert hist.learning_rates == [1e-3, 5e-4, 2.5e-4, 1.25e-4]
    hist.write_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().count("\n") == 5
    assert hist.summary()["n_epochs"] == 4


def test_checkpoint_reproduces_best_f1(split_arrays, tmp_path):
    train, val = split_arrays
    exp = quick("two-path", epochs=3)
    model, hist = run_experiment(exp, train, val, checkpoint_dir=tmp_path / "ck")
    reloaded = load_checkpoint(tmp_path / "ck")
    cm = evaluate_experiment(reloaded, val, exp.crop_size)
    assert model_selection_f1(cm) == hist.best_val_f1
    assert hist.epochs[hist.best_epoch - 1].val_f1 == hist.best_val_f1
    assert hist.best_val_f1 == max(r.val_f1 for r in hist.epochs)


def test_overfits_thirty_frames(split_arrays):
    train, _ = split_arrays
    frames = train.take(np.arange(30))
    model = build_single_path(BackboneConfig.desk(dropout_keep=1.0), 2, seed=0)
    policies = {"cartesian": AugmentPolicy.no_augmentation("cartesian", crop_size=54)}
    cfg = TrainConfig(lr0=1e-3, epochs=200, batch_size=30, plateau_patience=1000)
    _, hist = train_model(model, frames, frames, policies, cfg)
    assert min(hist.train_losses) < 0.05


def test_training_rejects_bad_inputs(split_arrays):
    train, val = split_arrays
    model = build_single_path(BackboneConfig.desk(), 2)
    policies = {"cartesian": AugmentPolicy.standard_train("cartesian", crop_size=54)}
    with pytest.raises(ValueError):
        train_model(model, train.take([]), val, policies, TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train_model(
            model, train, val, {"polar": AugmentPolicy.standard_train("polar", crop_size=54)}, TrainConfig(epochs=1)
        )


def test_inverse_frequency_weights_resolve(split_arrays):
    from octplaque.train import resolve_weights

    train, _ = split_arrays
    w = resolve_weights(TrainConfig(class_weights="inverse_frequency"), train)
    counts = train.class_counts()
    inv = counts.sum() / counts
    assert np.allclose(w, inv / inv.mean())
    with pytest.raises(ValueError):
        resolve_weights(TrainConfig(class_weights=[1.0, 1.0, 1.0]), train)


# grid search


def test_grid_singleton_and_planted_winner(small_dataset):
    base = Experiment(train=TrainConfig(lr0=1e-3, epochs=2))
    single = grid_search({"lr0": [1e-3]}, small_dataset, k=2, base=base)
    assert len(single.scores) == 1 and single.best.train.lr0 == 1e-3
    # a vanishing learning rate cannot move the model off its initial predictions
    planted = grid_search({"lr0": [1e-12, 3e-3]}, small_dataset, k=2, base=base.with_overrides(epochs=4))
    f1 = {s[0]["lr0"]: s[1] for s in planted.scores}
    assert planted.best.train.lr0 == 3e-3, f1
    again = grid_search({"lr0": [1e-12, 3e-3]}, small_dataset, k=2, base=base.with_overrides(epochs=4))
    assert again.scores == planted.scores


def test_grid_ties_prefer_smaller_models(small_dataset):
    base = Experiment(train=TrainConfig(lr0=1e-12, epochs=1))
    res = grid_search({"base_width": [16, 8]}, small_dataset, k=2, base=base)
    scores = {s[0]["base_width"]: s[1] for s in res.scores}
    if scores[16] == scores[8]:
        assert res.best.backbone.base_width == 8


def test_with_overrides_routes_keys():
    exp = Experiment().with_overrides(lr0=5e-4, dropout_keep=0.5, crop_size=50, resize_to=56)
    assert exp.train.lr0 == 5e-4 and exp.backbone.dropout_keep == 0.5
    assert exp.backbone.input_size == 50
    with pytest.raises(KeyError):
        Experiment().with_overrides(bogus=1)
    with pytest.raises(ValueError):
        Experiment(crop_size=70, resize_to=60)
