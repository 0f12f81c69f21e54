import itertools
import math

import numpy as np
import pytest
import scipy.sparse as sp
import torch

from wsss.crf import ProbField
from wsss.irnet import (NEGATIVE, NEUTRAL, POSITIVE, AffinityField, IrnetConfig, IrnetModel,
                        block_consensus, build_transition, confident_labels,
                        displacement_targets, downsample_field, emit_pseudo_mask,
                        grid_pairs, load_irnet, make_affinity_labels, pair_affinities,
                        pair_affinity_from_boundary, path_pixels, random_walk_propagate,
                        refine_with_displacement, save_irnet, train_irnet, upsample_field)
from wsss.nets import TinyTrunk
from wsss.torchutil import seed_everything, state_snapshot, states_equal

N_CASES = 100


def _field(probs, ids=None):
    probs = np.asarray(probs, dtype=np.float32)
    return ProbField("x", ids or list(range(probs.shape[0])), probs)


@pytest.mark.criterion(7)
def test_three_pixel_path_affinity():
    b = np.array([[0.5, 0.0, 0.5]])
    assert pair_affinity_from_boundary(b, (0, 0), (0, 2)) == 0.25
    assert path_pixels((0, 0), (0, 2)) == [(0, 0), (0, 1), (0, 2)]


@pytest.mark.criterion(7)
def test_five_neighbour_uniform_transition():
    T = build_transition(np.zeros((3, 3)), beta=8, radius=1).toarray()
    row = T[4]
    assert sorted(np.nonzero(row)[0].tolist()) == [1, 3, 4, 5, 7]
    for j in (1, 3, 4, 5, 7):
        assert row[j] == pytest.approx(1 / 5, abs=1e-12)


@pytest.mark.criterion(7)
def test_two_node_walk_step():
    T = sp.csr_matrix(np.array([[0.5, 0.5], [0.5, 0.5]]))
    v = np.array([1.0, 0.0])
    assert (T @ v).tolist() == [0.5, 0.5]
    fld = _field(np.array([[[1.0, 0.0]], [[0.0, 1.0]]]))
    out = random_walk_propagate(fld, T, t_iters=1)
    assert np.allclose(out.probs, 0.5, atol=1e-7)


def test_affinity_edge_cases():
    z = np.zeros((4, 4))
    assert pair_affinity_from_boundary(z, (0, 0), (3, 2)) == 1.0
    b = z.copy()
    b[1, 1] = 1.0
    assert pair_affinity_from_boundary(b, (0, 0), (2, 2)) == 0.0
    with pytest.raises(ValueError):
        pair_affinity_from_boundary(z, (0, 0), (3, 3), radius=2)
    with pytest.raises(ValueError):
        pair_affinity_from_boundary(z, (0, 0), (4, 0))


@pytest.mark.criterion(6)
def test_pair_affinity_symmetric():
    rng = np.random.default_rng(0)
    for _ in range(N_CASES):
        b = rng.random((8, 8))
        a = tuple(int(v) for v in rng.integers(0, 8, 2))
        while True:
            c = tuple(int(v) for v in rng.integers(0, 8, 2))
            if (a[0] - c[0]) ** 2 + (a[1] - c[1]) ** 2 <= 25:
                break
        assert pair_affinity_from_boundary(b, a, c) == pair_affinity_from_boundary(b, c, a)
        assert set(path_pixels(a, c)) == set(path_pixels(c, a))


def test_vectorized_affinities_match_scalar():
    rng = np.random.default_rng(1)
    b = rng.random((5, 6))
    pairs = grid_pairs(5, 6, 2.5)
    vec = pair_affinities(b, 2.5)
    for (p, q), v in zip(pairs, vec):
        ref = pair_affinity_from_boundary(b, divmod(int(p), 6), divmod(int(q), 6), 2.5)
        assert v == pytest.approx(ref, rel=1e-12)


@pytest.mark.criterion(6)
def test_transition_rows_sum_to_one():
    rng = np.random.default_rng(2)
    for _ in range(N_CASES):
        h, w = rng.integers(2, 9, size=2)
        b = rng.random((h, w)) ** rng.uniform(0.2, 3)
        T = build_transition(b, beta=float(rng.uniform(1, 10)), radius=float(rng.uniform(1, 5)))
        assert np.abs(np.asarray(T.sum(1)).ravel() - 1).max() <= 1e-6
        assert T.data.min() >= 0


def test_full_boundary_gives_identity():
    T = build_transition(np.ones((3, 4)), beta=8, radius=2)
    assert np.array_equal(T.toarray(), np.eye(12))
    with pytest.raises(ValueError):
        build_transition(np.zeros((2, 2)), beta=0.5)


@pytest.mark.criterion(6)
def test_walk_contracts_range():
    rng = np.random.default_rng(3)
    for _ in range(N_CASES):
        h, w = rng.integers(2, 8, size=2)
        T = build_transition(rng.random((h, w)), beta=8, radius=3)
        v = rng.normal(size=(h * w, 3))
        out = v
        for _ in range(int(rng.integers(1, 5))):
            out = T @ out
        assert (out.min(0) >= v.min(0) - 1e-12).all()
        assert (out.max(0) <= v.max(0) + 1e-12).all()


def test_walk_identities_and_methods():
    rng = np.random.default_rng(4)
    p = rng.random((3, 4, 5))
    fld = _field(p / p.sum(0))
    T = build_transition(rng.random((4, 5)), 8, 3)
    assert np.allclose(random_walk_propagate(fld, T, 0).probs, fld.probs, atol=1e-7)
    eye = sp.identity(20, format="csr")
    assert np.allclose(random_walk_propagate(fld, eye, 7).probs, fld.probs, atol=1e-7)
    a = random_walk_propagate(fld, T, 13, "iterate").probs
    b = random_walk_propagate(fld, T, 13, "square").probs
    assert np.abs(a - b).max() <= 1e-4
    with pytest.raises(ValueError):
        random_walk_propagate(fld, sp.identity(6), 1)
    with pytest.raises(ValueError):
        random_walk_propagate(fld, T, -1)


def test_affinity_labels_2x2_enumeration():
    # (0,0), (0,1): class 1; (1,0): class 2; (1,1): background
    probs = np.array([[[0.1, 0.1], [0.1, 0.99]],
                      [[0.9, 0.9], [0.0, 0.005]],
                      [[0.0, 0.0], [0.9, 0.005]]])
    fld = _field(probs)
    aps = make_affinity_labels(fld, 0.7, 0.95, radius=1.5)
    lab = {0: 1, 1: 1, 2: 2, 3: 0}
    expect = {}
    for a, b in itertools.combinations(range(4), 2):
        expect[(a, b)] = POSITIVE if lab[a] == lab[b] else NEGATIVE
    got = {tuple(int(v) for v in p): int(l) for p, l in zip(aps.pairs, aps.labels)}
    assert got == expect
    bg = {tuple(int(v) for v in p) for p, f in zip(aps.pairs, aps.background) if f}
    assert bg == set()


def test_affinity_label_trivial_fields():
    one = _field(np.stack([np.full((4, 4), 0.1), np.full((4, 4), 0.9)]))
    assert (make_affinity_labels(one, radius=2).labels == POSITIVE).all()
    flat = _field(np.full((2, 4, 4), 0.5))
    assert (make_affinity_labels(flat, radius=2).labels == NEUTRAL).all()


def test_affinity_label_pairs_within_radius_and_partitioned():
    rng = np.random.default_rng(5)
    for _ in range(N_CASES):
        h, w = rng.integers(2, 7, size=2)
        p = rng.dirichlet(np.ones(3) * 0.3, size=(h, w)).transpose(2, 0, 1)
        radius = float(rng.uniform(1, 4))
        aps = make_affinity_labels(_field(p), 0.7, 0.95, radius)
        ya, xa = np.divmod(aps.pairs[:, 0], w)
        yb, xb = np.divmod(aps.pairs[:, 1], w)
        assert ((ya - yb) ** 2 + (xa - xb) ** 2 <= radius ** 2).all()
        assert set(np.unique(aps.labels)) <= {POSITIVE, NEGATIVE, NEUTRAL}
        n = sum((aps.labels == l).sum() for l in (POSITIVE, NEGATIVE, NEUTRAL))
        assert n == len(aps.pairs)
        lab = confident_labels(_field(p), 0.7, 0.95).ravel()
        for (a, b), l in zip(aps.pairs, aps.labels):
            if lab[a] == 255 or lab[b] == 255:
                assert l == NEUTRAL
            else:
                assert l == (POSITIVE if lab[a] == lab[b] else NEGATIVE)


def test_emit_pseudo_mask_cases():
    low = _field(np.stack([np.full((3, 3), 0.8), np.full((3, 3), 0.2)]))
    assert (emit_pseudo_mask(low, 0.3).labels == 0).all()
    hi = _field(np.stack([np.full((3, 3), 0.1), np.full((3, 3), 0.9)]), ids=[0, 4])
    assert (emit_pseudo_mask(hi, 0.5).labels == 4).all()
    up = emit_pseudo_mask(hi, 0.5, size=(6, 9)).labels
    assert up.shape == (6, 9) and (up == 4).all()
    band = emit_pseudo_mask(_field(np.stack([np.full((1, 1), 0.7), np.full((1, 1), 0.3)])),
                            0.3, ignore_band=0.05)
    assert band.labels[0, 0] == 255
    with pytest.raises(ValueError):
        emit_pseudo_mask(hi, 1.0)


def test_emit_pseudo_mask_monotone_in_threshold():
    rng = np.random.default_rng(6)
    for _ in range(N_CASES):
        p = rng.dirichlet(np.ones(4), size=(5, 5)).transpose(2, 0, 1)
        t1, t2 = sorted(rng.uniform(0.01, 0.99, 2))
        a = emit_pseudo_mask(_field(p), t1).labels
        b = emit_pseudo_mask(_field(p), t2).labels
        assert not ((a == 0) & (b != 0)).any()


def test_refine_with_displacement():
    p = np.random.default_rng(7).dirichlet(np.ones(2), size=(4, 5)).transpose(2, 0, 1)
    fld = _field(p)
    zero = AffinityField(np.zeros((4, 5)), np.zeros((2, 4, 5)))
    assert refine_with_displacement(fld, zero, enabled=False) is fld
    assert np.array_equal(refine_with_displacement(fld, zero, True).probs, fld.probs)
    disp = np.zeros((2, 4, 5))
    disp[:, 2, 3] = 9.0                      # one far-displaced noise pixel
    out = refine_with_displacement(fld, AffinityField(np.zeros((4, 5)), disp), True, 90.0).probs
    assert (out[:, 2, 3] == 0).all()
    mask = np.ones((4, 5), bool)
    mask[2, 3] = False
    assert np.array_equal(out[:, mask], fld.probs[:, mask])
    with pytest.raises(ValueError):
        refine_with_displacement(fld, AffinityField(np.zeros((4, 5)), disp * np.nan), True)


def test_resampling_keeps_simplex():
    rng = np.random.default_rng(8)
    for _ in range(20):
        p = rng.dirichlet(np.ones(3), size=(9, 10)).transpose(2, 0, 1)
        small = downsample_field(_field(p), 4)
        assert small.probs.shape == (3, 3, 3)
        assert np.allclose(small.probs.sum(0), 1, atol=1e-5)
        big = upsample_field(small, (9, 10))
        assert np.allclose(big.probs.sum(0), 1, atol=1e-5)


def test_block_consensus_and_displacement_targets():
    lab = np.array([[1, 1, 2, 2], [1, 1, 2, 0]], np.uint8)
    assert block_consensus(lab, 2).tolist() == [[1, 255]]
    lab = np.zeros((5, 5), np.uint8)
    lab[1:4, 1:4] = 3
    t, fg, bg = displacement_targets(lab)
    assert t[0, 1, 1] == 1.0 and t[1, 1, 1] == 1.0 and t[0, 2, 2] == 0.0
    assert fg.sum() == 9 and bg.sum() == 16


def _seeds(rng, n, size=16):
    images, seeds = {}, {}
    for k in range(n):
        img = rng.random((size, size, 3)).astype(np.float32)
        p = np.zeros((2, size, size), np.float32)
        p[1, 4:12, 4:12] = 0.95
        p[0] = 1 - p[1]
        images[f"i{k}"] = img
        seeds[f"i{k}"] = _field(p)
    return images, seeds


def test_zero_epoch_heads_unchanged_and_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    images, seeds = _seeds(rng, 2)
    trunk = TinyTrunk(8)
    cfg = IrnetConfig(epochs=0, head_width=8, seed=3)
    model, hist = train_irnet(trunk, images, seeds, cfg)
    seed_everything(3)
    fresh = IrnetModel(trunk, 8)
    assert hist == [] and states_equal(state_snapshot(model.heads), state_snapshot(fresh.heads))
    save_irnet(model, cfg, tmp_path / "i.pt")
    back = load_irnet(tmp_path / "i.pt", trunk)
    assert states_equal(state_snapshot(back.heads), state_snapshot(model.heads))


def test_training_lowers_loss_and_freezes_trunk():
    from wsss.irnet import irnet_batch_loss
    rng = np.random.default_rng(10)
    images, seeds = _seeds(rng, 8)
    trunk = TinyTrunk(8)
    before_trunk = state_snapshot(trunk)
    cfg = IrnetConfig(epochs=0, head_width=8, seed=0, batch_size=4,
                      augmentation={"flip": False, "shift": False, "scale": False,
                                    "rotate": False, "noise": False,
                                    "brightness_contrast": False, "median_blur": False,
                                    "rgb_shift": False})
    ids = sorted(images)
    labs = [confident_labels(seeds[i], 0.7, 0.95) for i in ids]
    m0, _ = train_irnet(trunk, images, seeds, cfg)
    with torch.no_grad():
        aff0, d0 = irnet_batch_loss(m0, [images[i] for i in ids], labs, cfg.radius)
    cfg.epochs = 5
    m1, hist = train_irnet(trunk, images, seeds, cfg)
    with torch.no_grad():
        aff1, d1 = irnet_batch_loss(m1, [images[i] for i in ids], labs, cfg.radius)
    assert len(hist) == 5
    assert float(aff1 + d1) < float(aff0 + d0)
    assert states_equal(before_trunk, state_snapshot(trunk))


def test_missing_seed_and_config_validation():
    rng = np.random.default_rng(11)
    images, seeds = _seeds(rng, 1)
    with pytest.raises(ValueError):
        train_irnet(TinyTrunk(8), images, seeds, IrnetConfig(), ids=["nope"])
    with pytest.raises(ValueError):
        IrnetConfig(fg_confident=1.5)
    cfg = IrnetConfig()
    assert (cfg.lr_displacement, cfg.lr_boundary, cfg.radius) == (0.05, 0.005, 5.0)
    assert math.isclose(cfg.fg_confident, 0.70) and math.isclose(cfg.bg_confident, 0.95)
