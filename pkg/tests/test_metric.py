import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dcrgan import autodiff as ad
from dcrgan import dataset as dsm
from dcrgan import metric, nn
from dcrgan.autodiff import Tensor


@pytest.fixture(scope="module")
def ds():
    return dsm.synth_generate(dsm.SynthConfig(num_seen=4, num_unseen=2, instances_per_class=12,
                                              d_v=6, d_a=3, seed=1))


def _identity_net(d, input_mode="visual_only", margin=1.0):
    mlp = nn.init_mlp(nn.mlp_config(d, (), d), 0)
    mlp.weights[0].data[:] = np.eye(d)
    return metric.MetricNet(mlp, input_mode, margin)


def _hinge_oracle(ra, rp, rn, m):
    dp = np.sqrt(np.sum((ra - rp) ** 2, axis=1) + 1e-12)
    dn = np.sqrt(np.sum((ra - rn) ** 2, axis=1) + 1e-12)
    return float(np.mean(np.maximum(0.0, dp - dn + m)))


class TestTripletLosses:
    def test_tl_hand_example(self):
        # anchor 0, positive at distance 1, negative at distance 3, margin 1 -> 0
        M = _identity_net(2)
        loss = metric.triplet_loss_tl(M, np.array([0.0, 0.0]), np.array([1.0, 0.0]), np.array([3.0, 0.0]))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)
        loss = metric.triplet_loss_tl(M, np.array([0.0, 0.0]), np.array([2.0, 0.0]), np.array([2.5, 0.0]))
        assert loss.item() == pytest.approx(0.5, abs=1e-9)

    def test_mmtl_uses_semantics(self):
        # same visuals, semantics decide the hinge
        M = _identity_net(3, "multimodal", margin=0.5)
        anchor, pos, neg = np.array([0.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, 3.0])
        assert metric.mmtl_loss(M, anchor, pos, neg).item() == pytest.approx(0.0, abs=1e-9)

    def test_mode_guard(self):
        with pytest.raises(ValueError):
            metric.triplet_loss_tl(_identity_net(2, "multimodal"), np.zeros(2), np.zeros(2), np.zeros(2))
        with pytest.raises(ValueError):
            metric.mmtl_loss(_identity_net(2), np.zeros(2), np.zeros(2), np.zeros(2))

    def test_mmtl_width_mismatch(self):
        M = metric.build_metric_net(4, 2, rep_dim=3, hidden=(5,))
        with pytest.raises(ad.ShapeError):
            metric.mmtl_loss(M, np.zeros((1, 4)), np.zeros((1, 6)), np.zeros((1, 6)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.1, 3.0))
    def test_matches_oracle(self, seed, margin):
        rng = np.random.default_rng(seed)
        M = metric.build_metric_net(4, 2, rep_dim=3, hidden=(5,), margin=margin, seed=seed)
        e = [rng.normal(size=(7, 6)) for _ in range(3)]
        with ad.no_grad():
            reps = [M(Tensor(t)).data for t in e]
        assert metric.mmtl_loss(M, *e).item() == pytest.approx(_hinge_oracle(*reps, margin), rel=1e-12, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_hinge_nonnegative_and_zero_when_separated(self, seed):
        rng = np.random.default_rng(seed)
        M = _identity_net(3)
        a = rng.normal(size=(5, 3))
        far = a + 100.0
        assert metric.triplet_loss_tl(M, a, a + 1e-3, far).item() == pytest.approx(0.0, abs=1e-9)
        assert metric.triplet_loss_tl(M, a, far, a).item() > 0.0

    def test_gradcheck(self, ds):
        M = metric.build_metric_net(ds.d_v, ds.d_a, rep_dim=4, hidden=(5,), seed=0)
        trip = dsm.TripletSampler(ds).sample(6, np.random.default_rng(0))
        batch = metric.triplet_inputs(M, ds, trip)
        assert ad.gradcheck(lambda: metric.mn_total_loss(M, batch, 1e-2), M.mlp.parameters()) < 1e-4


class TestTraining:
    def test_train_mn_reduces_violations(self, ds):
        rng = np.random.default_rng(0)
        M = metric.build_metric_net(ds.d_v, ds.d_a, rep_dim=8, hidden=(32,), seed=0)
        trip = dsm.TripletSampler(ds).sample(200, np.random.default_rng(5))
        before = metric.violation_fraction(M, ds, trip)
        metric.train_mn(ds, M, 20, 16, nn.Adam(M.mlp.parameters(), lr=1e-3), rng)
        assert metric.violation_fraction(M, ds, trip) < before

    def test_epoch_length(self, ds):
        M = metric.build_metric_net(ds.d_v, ds.d_a, rep_dim=4, hidden=(4,), seed=0)
        hist = metric.train_mn(ds, M, 2, 10, nn.Adam(M.mlp.parameters()), np.random.default_rng(0))
        assert len(hist) == 2 * -(-ds.train_idx.size // 10)

    def test_mn_training_never_reads_unseen_semantics(self, ds):
        fresh = dsm.synth_generate(dsm.SynthConfig(num_seen=4, num_unseen=2, instances_per_class=12,
                                                   d_v=6, d_a=3, seed=1))
        M = metric.build_metric_net(fresh.d_v, fresh.d_a, rep_dim=4, hidden=(4,), seed=0)
        R = metric.build_srn(fresh.d_a, 4, hidden=(4,), seed=0)
        rng = np.random.default_rng(0)
        metric.train_mn(fresh, M, 2, 8, nn.Adam(M.mlp.parameters()), rng)
        metric.train_srn(fresh, R, M, 2, nn.Adam(R.mlp.parameters()), rng)
        assert fresh.unseen_semantic_reads == 0

    def test_sampling_loss_rejects_unseen(self, ds):
        M = metric.build_metric_net(ds.d_v, ds.d_a, rep_dim=4, hidden=(4,), seed=0)
        R = metric.build_srn(ds.d_a, 4, hidden=(4,), seed=0)
        with pytest.raises(metric.InductiveViolation):
            metric.srn_sampling_loss(R, M, ds, int(ds.unseen_classes[0]), 1e-4)

    def test_sampling_loss_oracle(self, ds):
        M = metric.build_metric_net(ds.d_v, ds.d_a, rep_dim=4, hidden=(5,), seed=0)
        R = metric.build_srn(ds.d_a, 4, hidden=(5,), seed=1)
        c = int(ds.seen_classes[2])
        idx = ds.class_indices(c, "train")
        with ad.no_grad():
            target = M(M.inputs(ds.visual[idx], ds.semantics[ds.labels[idx]])).data.mean(0)
            pred = R(Tensor(ds.semantics[[c]])).data[0]
        decay = sum(float(np.sum(p.data ** 2)) for p in R.mlp.parameters())
        oracle = np.sqrt(np.sum((target - pred) ** 2) + 1e-12) + 1e-3 * decay
        assert metric.srn_sampling_loss(R, M, ds, c, 1e-3).item() == pytest.approx(oracle, rel=1e-12)

    def test_srn_training_leaves_metric_untouched(self, ds):
        M = metric.build_metric_net(ds.d_v, ds.d_a, rep_dim=4, hidden=(5,), seed=0)
        R = metric.build_srn(ds.d_a, 4, hidden=(5,), seed=1)
        before = M.mlp.checksum()
        hist = metric.train_srn(ds, R, M, 30, nn.Adam(R.mlp.parameters(), lr=1e-2), np.random.default_rng(0))
        assert M.mlp.checksum() == before
        assert np.mean(hist[-4:]) < np.mean(hist[:4])

    def test_srn_width_mismatch(self, ds):
        M = metric.build_metric_net(ds.d_v, ds.d_a, rep_dim=4, hidden=(5,), seed=0)
        R = metric.build_srn(ds.d_a, 5, hidden=(5,), seed=1)
        with pytest.raises(ad.ShapeError):
            metric.train_srn(ds, R, M, 1, nn.Adam(R.mlp.parameters()), np.random.default_rng(0))


def test_class_rep_table_rows(ds):
    M = metric.build_metric_net(ds.d_v, ds.d_a, rep_dim=4, hidden=(5,), seed=0)
    R = metric.build_srn(ds.d_a, 4, hidden=(5,), seed=1)
    table = metric.class_rep_table(M, R, ds)
    c = int(ds.unseen_classes[0])
    np.testing.assert_allclose(table.row(c), metric.unseen_representation(R, ds.semantics[c]), atol=1e-14)
    s = int(ds.seen_classes[0])
    np.testing.assert_allclose(table.row(s), metric.class_representation(M, ds, s), atol=1e-14)


def test_nearest_neighbour_accuracy():
    reps = np.array([[0.0], [0.1], [5.0], [5.1]])
    assert metric.nearest_neighbour_accuracy(reps, np.array([0, 0, 1, 1])) == 1.0
    assert metric.nearest_neighbour_accuracy(reps, np.array([0, 1, 0, 1])) == 0.0
