import numpy as np
import pytest

from dpdnet.model import FAST, DPDNet
from dpdnet.tensor import Tensor, backward, no_grad
from dpdnet.training import (
    TrainConfig,
    TrainingError,
    dpdnet_loss,
    predict_maps,
    render_targets,
    split_indices,
    train,
    validate,
)


def _tiny_data(n=6, seed=0):
    rng = np.random.default_rng(seed)
    frames = rng.random((n, 106, 128, 1)).astype(np.float32) * 0.2 + 0.6
    labels = []
    for i in range(n):
        pts = rng.uniform([10, 10], [96, 118], size=(1 + i % 2, 2))
        for r, c in pts:
            frames[i, int(r) - 3:int(r) + 4, int(c) - 3:int(c) + 4] = 0.3
        labels.append(pts)
    return frames, labels


def loss_oracle(refined, main, target, lam):
    b = refined.shape[0]
    r = sum(float(((refined[i] - target[i]) ** 2).sum()) for i in range(b)) / b
    m = sum(float(((main[i] - target[i]) ** 2).sum()) for i in range(b)) / b
    return r + lam * m


def test_loss_examples():
    q = np.full((1, 2, 2, 1), 0.3)
    assert dpdnet_loss(Tensor(q), Tensor(q), q).item() == 0.0
    refined = Tensor(q + 0.1)
    assert dpdnet_loss(refined, Tensor(q), q, 1.0).item() == pytest.approx(0.04)
    main = Tensor(np.zeros_like(q))
    assert dpdnet_loss(refined, main, q, 0.0).item() == pytest.approx(0.04)


def test_loss_matches_oracle_and_nonnegative(rng):
    r, m, q = (rng.random((3, 4, 5, 1)) for _ in range(3))
    for lam in (0.0, 0.5, 1.0):
        got = dpdnet_loss(Tensor(r), Tensor(m), q, lam).item()
        assert got == pytest.approx(loss_oracle(r, m, q, lam), rel=1e-5)
        assert got >= 0


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        dpdnet_loss(Tensor(np.zeros((1, 2, 2, 1))), Tensor(np.zeros((1, 2, 3, 1))), np.zeros((1, 2, 2, 1)))


def test_split_indices():
    tr, va = split_indices(32, 0.1, 0)
    assert len(va) == 3 and len(tr) == 29
    assert sorted(np.concatenate([tr, va]).tolist()) == list(range(32))
    assert np.array_equal(split_indices(32, 0.1, 0)[1], va)
    with pytest.raises(TrainingError):
        split_indices(1, 0.1, 0)


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert cfg.epochs == 50 and cfg.batch_size == 8 and cfg.lam == 1.0
    assert TrainConfig(variant="fast").target_sigma == 3.0
    for bad in ({"epochs": 0}, {"lam": -1}, {"batch_size": 0}, {"val_fraction": 1.0}, {"variant": "huge"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_validate_matches_oracle_and_repeats():
    frames, labels = _tiny_data(3)
    model = DPDNet(FAST, 0.125, seed=3)
    targets = render_targets(labels, (106, 128), 3.0)
    v1 = validate(model, frames, targets, 1.0)
    assert v1 == validate(model, frames, targets, 1.0)
    main, refined = predict_maps(model, frames)
    assert v1 == pytest.approx(loss_oracle(refined.astype(float), main.astype(float), targets, 1.0), rel=1e-9)


def test_validate_half_outputs_on_half_targets():
    model = DPDNet(FAST, 0.125, seed=3)
    for head in (model.main.head_conv, model.refine.body.head_conv):
        head.weight.data[...] = 0
        head.bias.data[...] = 0
    frames = np.random.default_rng(0).random((2, 106, 128, 1)).astype(np.float32)
    assert validate(model, frames, np.full((2, 106, 128, 1), 0.5)) == 0.0


def test_small_step_does_not_increase_batch_loss():
    from dpdnet.optim import Adam
    frames, labels = _tiny_data(4)
    targets = render_targets(labels, (106, 128), 3.0)
    ok, trials = 0, 20
    for seed in range(trials):
        model = DPDNet(FAST, 0.125, seed=seed).eval()     # frozen statistics: same function before/after
        opt = Adam(model.parameters(), lr=1e-5)
        main, refined = model(Tensor(frames))
        before = dpdnet_loss(refined, main, targets)
        backward(before)
        opt.step()
        with no_grad():
            main, refined = model(Tensor(frames))
            after = dpdnet_loss(refined, main, targets).item()
        ok += after <= before.item()
    assert ok / trials >= 0.95


def test_lambda_controls_main_gradient():
    frames, labels = _tiny_data(2)
    targets = render_targets(labels, (106, 128), 3.0)
    grads = {}
    for lam in (0.0, 1.0):
        model = DPDNet(FAST, 0.125, seed=1)
        main, refined = model(Tensor(frames))
        grads[lam] = backward(dpdnet_loss(refined, main, targets, lam), params=model.main_parameters())
    assert any(not np.allclose(a, b) for a, b in zip(grads[0.0], grads[1.0]))


def test_training_updates_both_blocks_and_picks_best():
    frames, labels = _tiny_data(6)
    init = DPDNet(FAST, 0.125, seed=0)
    before_m = [p.data.copy() for p in init.main_parameters()]
    before_r = [p.data.copy() for p in init.refinement_parameters()]
    model, record = train(frames, labels, TrainConfig(variant="fast", filter_scale=0.125, epochs=3,
                                                       batch_size=2, val_fraction=0.34), model=init)
    assert len(record.epochs) == 3
    assert any(not np.array_equal(a, p.data) for a, p in zip(before_m, model.main_parameters()))
    assert any(not np.array_equal(a, p.data) for a, p in zip(before_r, model.refinement_parameters()))
    best = record.epochs[record.best_epoch - 1]
    assert best.val_loss <= record.epochs[-1].val_loss
    assert best.val_loss == min(record.val_losses)
    assert not model.training


def test_training_record_csv():
    frames, labels = _tiny_data(4)
    _, record = train(frames, labels, TrainConfig(variant="fast", filter_scale=0.125, epochs=2, batch_size=2))
    lines = record.to_csv().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,seconds" and len(lines) == 3
    assert record.to_csv(include_time=False).splitlines()[0] == "epoch,train_loss,val_loss"


def test_deterministic_training_is_repeatable():
    frames, labels = _tiny_data(4)
    cfg = TrainConfig(variant="fast", filter_scale=0.125, epochs=2, batch_size=2, seed=9, deterministic=True)
    (m1, r1), (m2, r2) = train(frames, labels, cfg), train(frames, labels, cfg)
    assert r1.to_csv(include_time=False) == r2.to_csv(include_time=False)
    for a, b in zip(m1.state_dict().values(), m2.state_dict().values()):
        np.testing.assert_array_equal(a, b)


def test_bad_inputs():
    frames, labels = _tiny_data(2)
    with pytest.raises(TrainingError):
        train(frames, labels[:1], TrainConfig(variant="fast"))
    with pytest.raises(TrainingError):
        train(frames, labels, TrainConfig(variant="std"))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_reported():
    frames, labels = _tiny_data(4)
    with pytest.raises(TrainingError, match="epoch 1, batch 0"):
        train(frames, labels, TrainConfig(variant="fast", filter_scale=0.125, epochs=1, lr=1e300))
