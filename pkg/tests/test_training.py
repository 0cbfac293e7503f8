import time

import numpy as np
import pytest
import torch

import advstitch.training as training
from advstitch.attacks import AttackConfig
from advstitch.cells import OP_KINDS, Genotype, OpKind, uniform_genotype
from advstitch.data import PairDataset, make_synthetic_dataset
from advstitch.errors import AttackDiverged, NonFiniteLoss
from advstitch.estimator import EstimatorConfig
from advstitch.geometry import corner_error
from advstitch.reconstructor import N_CELLS, ReconstructorConfig, ReconstructorNet
from advstitch.training import (AATConfig, TrainConfig, alignment_objective, build_estimator, epoch_order,
                                finalize, new_state, train_aat, train_reconstructor, train_routine_adversarial,
                                train_standard)

TINY = EstimatorConfig(channels=4, hidden=16)
FIXED = [uniform_genotype(OpKind.SEP_CONV_3)] * 3


@pytest.fixture(scope="module")
def small_ds():
    return make_synthetic_dataset(12, 5, patch_size=32, rho=4.0, n_sources=4, source_size=64)


def params(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def same(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def fixed_state(seed=0, lr=1e-3):
    return new_state(build_estimator(TINY, seed, FIXED), seed, lr=lr)


def mixed_state(seed=0):
    return new_state(build_estimator(TINY, seed), seed, lr=1e-3, arch_lr=1e-2)


def test_lr_schedule():
    tc = TrainConfig()
    for e in range(6):
        assert tc.lr_at(e) == pytest.approx(1e-4 * 0.96 ** e, rel=1e-15)


def test_schedule_is_applied_per_epoch(small_ds):
    st = fixed_state()
    tc = TrainConfig(batch_size=6)
    train_standard(st, small_ds, 3, tc)
    assert [row["lr"] for row in st.history] == [tc.lr_at(e) for e in range(3)]
    assert st.theta_opt.param_groups[0]["lr"] == tc.lr_at(2)
    assert st.epoch == 3


def test_zero_epochs_leaves_state_unchanged(small_ds):
    st = fixed_state()
    before = params(st.model)
    train_standard(st, small_ds, 0)
    assert same(before, params(st.model)) and st.epoch == 0 and st.history == []
    assert st.theta_opt.state_dict()["state"] == {}


def test_epoch_order_is_seeded_permutation():
    a = epoch_order(3, 1, 50)
    assert sorted(a.tolist()) == list(range(50))
    assert np.array_equal(a, epoch_order(3, 1, 50))
    assert not np.array_equal(a, epoch_order(3, 2, 50))


def test_standard_training_is_reproducible(small_ds):
    runs = []
    for _ in range(2):
        st = fixed_state(seed=4)
        train_standard(st, small_ds, 2, TrainConfig(lr=1e-3, batch_size=4))
        runs.append((params(st.model), st.history))
    assert same(runs[0][0], runs[1][0])
    assert repr(runs[0][1]) == repr(runs[1][1])


def test_zero_epsilon_routine_matches_standard(small_ds):
    tc = TrainConfig(lr=1e-3, batch_size=4)
    a, b = fixed_state(seed=2), fixed_state(seed=2)
    train_standard(a, small_ds, 2, tc)
    train_routine_adversarial(b, small_ds, 2, AttackConfig(epsilon=0.0), tc)
    assert same(params(a.model), params(b.model))


def test_routine_attacks_stay_in_ball(small_ds, monkeypatch):
    seen = []
    original = training.pgd

    def spy(model, pair, metric, config, **kw):
        adv = original(model, pair, metric, config, **kw)
        for x_adv, x in ((adv.x1, pair.x1), (adv.x2, pair.x2)):
            seen.append(float((x_adv - x.double()).abs().max()))
            assert float(x_adv.min()) >= 0 and float(x_adv.max()) <= 1
        return adv

    monkeypatch.setattr(training, "pgd", spy)
    cfg = AttackConfig(epsilon=4 / 255, beta=3 / 255, iters=2)
    st = fixed_state()
    train_routine_adversarial(st, small_ds, 1, cfg, TrainConfig(batch_size=6))
    assert len(seen) == 4
    assert max(seen) <= cfg.epsilon + 1e-9
    assert np.isnan(st.history[0]["clean_ls"]) and st.history[0]["attacked_ls"] > 0


def test_theta_and_alpha_steps_are_disjoint(small_ds):
    st = mixed_state()
    pair = training._pair(small_ds.subset(range(4)))
    alpha_ids = {id(p) for p in st.alpha}
    assert alpha_ids.isdisjoint(id(p) for p in st.theta)
    assert len(st.alpha) == 3

    before = params(st.model)
    loss, _ = alignment_objective(st.model, pair, pair)
    training._step(st, loss.mean(), st.theta, st.theta_opt)
    after = params(st.model)
    for k in before:
        if k.endswith("alpha"):
            assert torch.equal(before[k], after[k])
    assert any(not torch.equal(before[k], after[k]) for k in before if not k.endswith("alpha"))
    assert all(p.grad is None for p in st.alpha)

    before = after
    loss, _ = alignment_objective(st.model, pair, pair, supervised=False)
    training._step(st, loss.mean(), st.alpha, st.alpha_opt)
    after = params(st.model)
    for k in before:
        assert torch.equal(before[k], after[k]) != k.endswith("alpha")


def test_aat_config_validation():
    with pytest.raises(ValueError):
        AATConfig(gamma2=0.0)
    with pytest.raises(ValueError):
        AATConfig(gamma1=-1.0)
    with pytest.raises(ValueError):
        AATConfig(lam=-0.5)
    AATConfig(gamma1=0.0, lam=0.0)


def test_zero_gamma1_keeps_alpha_bit_identical(small_ds):
    st = mixed_state()
    alphas = [a.detach().clone() for a in st.alpha]
    theta = [p.detach().clone() for p in st.theta]
    train_aat(st, small_ds, AATConfig(gamma1=0.0, gamma2=1e-3, batch_size=3,
                                      attack=AttackConfig(iters=2)))
    assert all(torch.equal(a, b) for a, b in zip(alphas, st.alpha))
    assert any(not torch.equal(a, b) for a, b in zip(theta, st.theta))
    row = st.history[0]
    assert row["attacked_ls"] >= 0 and row["clean_ls"] >= 0


def test_aat_moves_alpha_and_is_reproducible(small_ds):
    runs = []
    for _ in range(2):
        st = mixed_state(seed=1)
        start = [a.detach().clone() for a in st.alpha]
        train_aat(st, small_ds, AATConfig(gamma1=1e-2, gamma2=1e-3, batch_size=3,
                                          attack=AttackConfig(iters=2)))
        assert any(not torch.equal(a, b) for a, b in zip(start, st.alpha))
        runs.append(params(st.model))
    assert same(*runs)


def test_aat_needs_architecture_parameters(small_ds):
    with pytest.raises(ValueError):
        train_aat(fixed_state(), small_ds, AATConfig())


def test_aat_skips_diverged_batches(small_ds, monkeypatch):
    def boom(*a, **k):
        raise AttackDiverged("degenerate")

    monkeypatch.setattr(training, "soa", boom)
    st = mixed_state()
    before = params(st.model)
    train_aat(st, small_ds, AATConfig(batch_size=3))
    assert st.skipped_batches == 2
    assert same(before, params(st.model))


def test_non_finite_loss_aborts_with_snapshot(small_ds):
    x1 = small_ds.x1.clone()
    x1[0, 0, 5, 5] = float("nan")
    bad = PairDataset(x1, small_ds.x2, small_ds.H_gt, small_ds.ids)
    st = fixed_state()
    with pytest.raises(NonFiniteLoss) as info:
        train_standard(st, bad, 1, TrainConfig(batch_size=12))
    assert set(info.value.snapshot) == set(st.model.state_dict())


def test_finalize_with_one_hot_alpha_keeps_selected_ops(small_ds):
    st = mixed_state()
    choices = []
    for level, cell in enumerate(st.model.cells):
        choice = [OP_KINDS[(level + e) % len(OP_KINDS)] for e in range(len(cell.edges))]
        cell.set_one_hot(choice)
        choices.append(dict(zip(cell.edges, choice)))
    genotypes, new = finalize(st, 4, small_ds, 1, TrainConfig(batch_size=6))
    for g, lookup, cell in zip(genotypes, choices, new.model.cells):
        assert {(i, j): op for i, j, op in g.edges} == lookup
        assert cell.genotype == g
    assert new.model.genotypes == genotypes
    assert new.alpha == [] and new.epoch == 1
    for g in genotypes:
        assert Genotype.from_text(g.to_text()) == g


def test_finalized_model_is_not_slower_than_mixed(small_ds):
    st = mixed_state()
    genotypes, new = finalize(st, 2, small_ds, 0)
    x = small_ds.x1[:4]

    def timing(model):
        best = float("inf")
        with torch.no_grad():
            model(x, x)
            for _ in range(5):
                t = time.perf_counter()
                model(x, x)
                best = min(best, time.perf_counter() - t)
        return best

    assert timing(new.model) <= timing(st.model)


def test_single_pair_overfit(small_ds):
    ds = make_synthetic_dataset(1, 0, n_sources=1)
    st = new_state(build_estimator(EstimatorConfig(channels=8, hidden=32, base_size=32), 0, FIXED), 0)
    tc = TrainConfig(lr=1e-3, lr_decay=1.0, batch_size=1, corner_weight=1.0)
    for step in range(500):
        train_standard(st, ds, 1, tc)
        if st.history[-1]["corner_error"] < 0.5:
            break
    with torch.no_grad():
        err = float(corner_error(st.model(ds.x1, ds.x2), ds.H_gt, (64, 64)))
    assert err < 1.0


def test_loss_falls_over_five_epochs():
    ds = make_synthetic_dataset(2000, 21, n_sources=64)
    st = new_state(build_estimator(EstimatorConfig(channels=8, hidden=32, base_size=32), 0, FIXED), 0)
    tc = TrainConfig(lr=1e-3, batch_size=16, corner_weight=1.0)
    train_standard(st, ds, 5, tc)
    ce = [row["corner_error"] for row in st.history]
    ls = [row["clean_ls"] for row in st.history]
    print("epoch corner errors", [round(v, 3) for v in ce])
    assert ce[4] < ce[0] and ls[4] < ls[0]
    assert np.polyfit(np.arange(5), ce, 1)[0] < 0


def test_reconstructor_training_reduces_loss(small_ds):
    torch.manual_seed(0)
    net = ReconstructorNet(ReconstructorConfig(channels=4), [uniform_genotype(OpKind.SEP_CONV_3)] * N_CELLS)
    history = train_reconstructor(net, small_ds, 4, config=TrainConfig(lr=3e-3, batch_size=6))
    assert len(history) == 4 and history[-1] < history[0]
