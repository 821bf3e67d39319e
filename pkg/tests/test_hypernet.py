import numpy as np
import pytest

from fdcheck import check
from neuroprog import genome as G
from neuroprog import hypernet as H
from neuroprog.netbuilder import build
from neuroprog.tensor import Tensor

GROUPS = [(2, 5), (3, 10), (4, 15)]


@pytest.fixture(scope="module")
def toy():
    return H.build_dataset(H.toy_archive(GROUPS, per_group=20, seed=0), channels=(5, 10, 15))


@pytest.fixture(scope="module")
def trained(toy):
    return H.train_hypernet(toy, H.HyperTrainConfig(epochs=200, seed=0))


def test_dataset_groups_and_lengths(toy):
    assert len(toy) == 30 and sorted(set(toy.groups)) == GROUPS
    for (d, _), text in zip(toy.groups, toy.genomes):
        assert len(G.decode(text).bits()) == G.bit_length(d)
    assert len(set(zip(toy.groups, toy.genomes))) == 30


def test_dataset_row_cap():
    groups = [(d, c) for d in G.DEPTHS for c in H.CHANNELS]
    ds = H.build_dataset(H.toy_archive(groups, per_group=12, seed=1))
    assert len(set(ds.groups)) == 21 and len(ds) <= 210


def test_dataset_skips_and_warns():
    ds = H.build_dataset(H.toy_archive([(2, 5)], per_group=4, seed=2), channels=(5, 10), depths=(2,))
    assert ds.skipped == [(2, 10)]
    assert ds.warnings and "only 4" in ds.warnings[0]
    with pytest.raises(H.HypernetError):
        H.build_dataset(H.toy_archive([(2, 5)], per_group=2), channels=(10,), depths=(2,))


def test_dataset_json_roundtrip(toy, tmp_path):
    H.save_dataset(toy, tmp_path / "d.json")
    back = H.load_dataset(tmp_path / "d.json")
    np.testing.assert_array_equal(back.ops, toy.ops)
    np.testing.assert_array_equal(back.conn_mask, toy.conn_mask)
    assert back.groups == toy.groups


def test_padding_masks(toy):
    row = toy.groups.index((2, 5))
    assert toy.op_mask[row].sum() == 5 * 5 and toy.conn_mask[row].sum() == 5 * 10
    row = toy.groups.index((4, 15))
    assert toy.op_mask[row].all()


def test_masked_losses_grads(f64):
    rng = np.random.default_rng(0)
    z = Tensor(rng.normal(size=(3, 4 * H.N_CLASSES)), requires_grad=True)
    t = rng.integers(0, H.N_CLASSES, size=(3, 4))
    m = rng.random((3, 4)) < 0.7
    assert check(lambda: H.masked_softmax_ce(z, t, m), [z]) < 1e-6
    zc = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    tc = (rng.random((3, 6)) < 0.5).astype(float)
    mc = rng.random((3, 6)) < 0.7
    assert check(lambda: H.masked_bce_logits(zc, tc, mc), [zc]) < 1e-6


def test_masked_positions_do_not_matter(f64):
    rng = np.random.default_rng(1)
    z = rng.normal(size=(2, 3 * H.N_CLASSES))
    t = rng.integers(0, H.N_CLASSES, size=(2, 3))
    m = np.array([[True, False, True], [False, True, True]])
    a = H.masked_softmax_ce(Tensor(z), t, m).item()
    z2 = z.copy()
    z2[0, H.N_CLASSES:2 * H.N_CLASSES] += 50.0
    t2 = t.copy()
    t2[1, 0] = (t2[1, 0] + 3) % H.N_CLASSES
    assert H.masked_softmax_ce(Tensor(z2), t2, m).item() == pytest.approx(a, rel=1e-12)


def test_loss_decreases(trained):
    _, curve = trained
    assert len(curve) == 200 and curve[-1] < curve[0]


def test_single_row_memorized():
    recs = H.toy_archive([(3, 10)], per_group=1, seed=5)
    ds = H.build_dataset(recs, channels=(10,), depths=(3,))
    model, _ = H.train_hypernet(ds, H.HyperTrainConfig(epochs=300, batch=1, lr=1e-2))
    assert H.encode(H.predict(model, 3, 10).genome) == recs[0].genome


def test_predictions_decode_and_build(trained, f32):
    model, _ = trained
    rng = np.random.default_rng(0)
    for _ in range(100):
        d = int(rng.choice(G.DEPTHS))
        c = int(rng.integers(1, 41))
        p = H.predict(model, d, c)
        assert G.decode(G.encode(p.genome)) == p.genome
        assert p.genome.depth == d and len(p.summary.split("-")) == 2 * d + 1
    build(H.predict(model, 3, 10).genome, 2, rng=0)


def test_depth3_summary_has_seven_entries(trained):
    assert len(H.predict(trained[0], 3, 18).summary.split("-")) == 7


def test_agreement_beats_marginal(toy, trained):
    a = H.agreement(trained[0], toy)
    assert a["model"] >= a["baseline"]


def test_model_checkpoint_roundtrip(trained, tmp_path):
    model, _ = trained
    model.save(tmp_path / "h.npck")
    back = H.HypernetModel.load(tmp_path / "h.npck")
    np.testing.assert_array_equal(H.predict(back, 2, 5).genome.bits(), H.predict(model, 2, 5).genome.bits())


def test_training_is_deterministic(toy):
    a = H.train_hypernet(toy, H.HyperTrainConfig(epochs=5, seed=3))[1]
    b = H.train_hypernet(toy, H.HyperTrainConfig(epochs=5, seed=3))[1]
    assert a == b


def test_bad_depth():
    with pytest.raises(H.HypernetError):
        H.features(5, 10)


def test_loss_curve_csv(tmp_path):
    H.write_loss_curve([3.0, 2.0], tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text().splitlines() == ["epoch,loss", "1,3.00000000", "2,2.00000000"]
