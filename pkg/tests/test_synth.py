import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdm_forge.errors import ConfigError
from cdm_forge.rng import SeededRNG
from cdm_forge.synth import (GroundTruth, SplitSpec, SyntheticSpec, dataset_from_truth, generate_dataset,
                             load_dataset, sample_episode, save_dataset, split)


def test_zero_scale_identity_gives_anchors():
    anchors = SeededRNG(0).normal_array((4, 3))
    truth = GroundTruth(anchors, np.zeros((4, 3)), np.eye(3), "identity")
    ds = dataset_from_truth(truth, 5, SeededRNG(1))
    np.testing.assert_array_equal(ds.x, anchors[ds.y])


@pytest.mark.parametrize("nonlinearity", ["identity", "tanh", "cubic"])
def test_class_means_match_quadrature(nonlinearity):
    spec = SyntheticSpec(n_classes=4, dim=3, n_per_class=8, nonlinearity=nonlinearity, seed=2)
    truth = generate_dataset(spec).truth
    ds = dataset_from_truth(truth, 10_000, SeededRNG(3))
    nodes, weights = np.polynomial.hermite_e.hermegauss(60)
    weights = weights / weights.sum()
    g = {"identity": lambda a: a, "tanh": np.tanh, "cubic": lambda a: a ** 3}[nonlinearity]
    for c in range(4):
        # each output coordinate is g of a 1-d Gaussian
        m = truth.mixing @ truth.anchors[c]
        sd = np.sqrt((truth.mixing ** 2) @ truth.scales[c] ** 2)
        expect = np.array([np.sum(weights * g(mi + si * nodes)) for mi, si in zip(m, sd)])
        second = np.array([np.sum(weights * g(mi + si * nodes) ** 2) for mi, si in zip(m, sd)])
        se = np.sqrt(np.maximum(second - expect ** 2, 0) / 10_000)
        xc = ds.x[ds.y == c]
        assert np.all(np.abs(xc.mean(0) - expect) <= 5 * se + 1e-12)


def test_generation_deterministic():
    a = generate_dataset(SyntheticSpec(n_classes=5, n_per_class=10, seed=9))
    b = generate_dataset(SyntheticSpec(n_classes=5, n_per_class=10, seed=9))
    c = generate_dataset(SyntheticSpec(n_classes=5, n_per_class=10, seed=10))
    assert a.x.tobytes() == b.x.tobytes() and a.y.tobytes() == b.y.tobytes()
    assert a.x.tobytes() != c.x.tobytes()


def test_default_shape():
    ds = generate_dataset(SyntheticSpec())
    assert ds.x.shape == (12 * 256, 16)
    assert ds.classes == list(range(12))
    assert len({tuple(a) for a in ds.truth.anchors}) == 12


@pytest.mark.parametrize("kw", [dict(n_classes=3), dict(n_per_class=7), dict(nonlinearity="relu"),
                                dict(scale_low=0.5, scale_high=0.1), dict(class_manifold_dim=40)])
def test_spec_validation(kw):
    with pytest.raises(ConfigError):
        generate_dataset(SyntheticSpec(**kw))


def test_manifold_anchors_span_subspace():
    ds = generate_dataset(SyntheticSpec(class_manifold_dim=2, seed=1))
    assert np.linalg.matrix_rank(ds.truth.anchors, tol=1e-9) == 2


# ---------------------------------------------------------------------------
# splits and episodes


def test_default_split_ratio():
    sp = split(range(12), rng=SeededRNG(0))
    assert len(sp.seen) == 10 and len(sp.unseen) == 2
    sp = split(range(102), rng=SeededRNG(0))
    assert len(sp.seen) == 85 and len(sp.unseen) == 17


def test_explicit_ids_verbatim():
    sp = split(range(6), seen_ids=[5, 0, 1, 2], unseen_ids=[3, 4])
    assert sp.seen == (0, 1, 2, 5) and sp.unseen == (3, 4)
    assert split(range(6), unseen_ids=[1]).seen == (0, 2, 3, 4, 5)
    with pytest.raises(ConfigError):
        split(range(6), seen_ids=[0, 1, 2], unseen_ids=[2, 3, 4, 5])
    with pytest.raises(ConfigError):
        split(range(6), seen_ids=[0, 1], unseen_ids=[2])


def test_split_rejects_empty_side():
    with pytest.raises(ConfigError):
        split(range(6), seen_fraction=1.0)
    with pytest.raises(ConfigError):
        split(range(6), seen_fraction=0.1)


@settings(max_examples=50, deadline=None)
@given(st.integers(4, 60), st.floats(0.4, 0.95), st.integers(0, 10_000))
def test_split_disjoint_cover(n, frac, seed):
    try:
        sp = split(range(n), seen_fraction=frac, rng=SeededRNG(seed))
    except ConfigError:
        return
    assert not set(sp.seen) & set(sp.unseen)
    assert set(sp.seen) | set(sp.unseen) == set(range(n))
    assert sp == split(range(n), seen_fraction=frac, rng=SeededRNG(seed))


@pytest.mark.parametrize("k", [1, 3])
def test_episode_partition(k):
    ds = generate_dataset(SyntheticSpec(n_classes=4, n_per_class=16))
    sp = SplitSpec((0, 1, 2), (3,))
    ep = sample_episode(ds, sp, 3, k, seed=4)
    assert len(ep.support) == k and len(ep.support) + len(ep.query) == 16
    assert not set(ep.support) & set(ep.query)
    assert set(ep.support) | set(ep.query) == set(ds.indices_of(3))
    assert ep == sample_episode(ds, sp, 3, k, seed=4)


def test_episode_errors():
    ds = generate_dataset(SyntheticSpec(n_classes=4, n_per_class=8))
    sp = SplitSpec((0, 1, 2), (3,))
    with pytest.raises(ConfigError):
        sample_episode(ds, sp, 3, 8, seed=0)
    with pytest.raises(ConfigError):
        sample_episode(ds, sp, 0, 2, seed=0)


def test_dataset_round_trip(tmp_path):
    ds = generate_dataset(SyntheticSpec(n_classes=4, n_per_class=9, seed=3))
    path = tmp_path / "data.bin"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.x.tobytes() == ds.x.tobytes() and back.y.tobytes() == ds.y.tobytes()
    head = path.read_bytes().split(b"end\n")[0].decode()
    assert "byteorder little" in head and "rows 36" in head and "label_column 16" in head
