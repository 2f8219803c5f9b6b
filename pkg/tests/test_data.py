import numpy as np
import pytest

from subdiff.data import (
    CIFAR_RECORD,
    Checkpoint,
    FormatError,
    SyntheticSpec,
    decode_checkpoint,
    decode_matrix,
    encode_checkpoint,
    encode_matrix,
    explained_variance,
    gmm_from_matrix,
    gmm_to_matrix,
    load_checkpoint,
    load_cifar10,
    load_matrix,
    make_synthetic,
    nn_distance,
    nn_distances,
    read_cifar_batch,
    save_checkpoint,
    save_matrix,
)
from subdiff.scorenet import ScoreNet
from subdiff.sde import VEProcess
from subdiff.subspace import ExplicitChain, ImageShape, downsampling_chain

PROC = VEProcess(0.01, 13.0)
SMALL = SyntheticSpec(train_size=20_000, seed=1)


@pytest.fixture(scope="module")
def synthetic():
    return make_synthetic(SMALL)


def test_explained_variance_targets(synthetic):
    gmm, _, _ = synthetic
    ev = explained_variance(gmm.means)
    assert ev[5] == pytest.approx(0.50, abs=1e-3)
    assert ev[10] == pytest.approx(0.75, abs=1e-3)


def test_component_sd(synthetic):
    gmm, train, labels = synthetic
    resid = train - gmm.means[labels]
    assert np.sqrt(np.mean(resid**2)) == pytest.approx(0.05, rel=0.02)


def test_synthetic_deterministic():
    a = make_synthetic(SyntheticSpec(train_size=500, seed=7))
    b = make_synthetic(SyntheticSpec(train_size=500, seed=7))
    assert np.array_equal(a[1], b[1]) and np.array_equal(a[0].means, b[0].means)


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(targets=((6, 0.8), (11, 0.7)))


def write_fake_batch(path, images, labels):
    rec = np.column_stack([labels.astype(np.uint8), images.astype(np.uint8)])
    path.write_bytes(rec.tobytes())


def test_cifar_two_record_fixture(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(2, 3072))
    write_fake_batch(tmp_path / "b.bin", imgs, np.array([3, 7]))
    x, y = read_cifar_batch(tmp_path / "b.bin")
    assert x.shape == (2, 3072) and list(y) == [3, 7]
    np.testing.assert_allclose(x, imgs / 255.0)
    assert x.min() >= 0 and x.max() <= 1
    # red plane first, row-major: pixel (row 1, col 2) red lives at index 32 + 2
    assert x[0, 34] == imgs[0, 34] / 255.0


def test_cifar_full_directory_layout(tmp_path):
    rng = np.random.default_rng(1)
    for i in range(1, 6):
        write_fake_batch(tmp_path / f"data_batch_{i}.bin", rng.integers(0, 256, (2, 3072)), np.arange(2))
    with pytest.raises(FileNotFoundError):
        load_cifar10(tmp_path)
    write_fake_batch(tmp_path / "test_batch.bin", rng.integers(0, 256, (3, 3072)), np.arange(3))
    out = load_cifar10(tmp_path)
    assert out["train"].shape == (10, 3072) and out["test"].shape == (3, 3072)


def test_cifar_bad_size(tmp_path):
    (tmp_path / "b.bin").write_bytes(b"\0" * (CIFAR_RECORD + 1))
    with pytest.raises(OSError):
        read_cifar_batch(tmp_path / "b.bin")


def test_nn_distance_basics():
    train = np.random.default_rng(2).standard_normal((50, 6))
    assert nn_distance(train[:10], train) == 0.0
    x = np.zeros((1, 6))
    x[0, :2] = [3, 4]
    assert nn_distance(x, np.zeros((1, 6))) == 5.0


def test_nn_distance_matches_naive_loop():
    rng = np.random.default_rng(3)
    train = rng.standard_normal((300, 5))
    samples = rng.standard_normal((70, 5))
    naive = [min(np.linalg.norm(s - t) for t in train) for s in samples]
    np.testing.assert_allclose(nn_distances(samples, train, block=16), naive, rtol=1e-12)
    with pytest.raises(ValueError):
        nn_distance(samples[:, :3], train)


def test_matrix_round_trip(tmp_path):
    a = np.random.default_rng(4).standard_normal((7, 3))
    save_matrix(tmp_path / "m.sdmx", a)
    assert np.array_equal(load_matrix(tmp_path / "m.sdmx"), a)
    raw = encode_matrix(a)
    with pytest.raises(FormatError):
        decode_matrix(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        decode_matrix(raw[:-1])


def make_checkpoint():
    rng = np.random.default_rng(5)
    u = np.linalg.qr(rng.standard_normal((4, 2)))[0]
    models = [ScoreNet(4, PROC, hidden=(6, 5), seed=0), ScoreNet(2, PROC, hidden=(6, 5), seed=1)]
    return Checkpoint(PROC, models, ExplicitChain([u]), (0.4,), (0.3,), {"dims": [4, 2], "note": "x"})


def test_checkpoint_round_trip(tmp_path):
    ck = make_checkpoint()
    path = tmp_path / "c.sdif"
    save_checkpoint(path, ck)
    back = load_checkpoint(path)
    assert encode_checkpoint(back) == path.read_bytes()
    assert back.meta == ck.meta and back.times == ck.times
    x = np.random.default_rng(6).standard_normal((3, 4))
    assert np.array_equal(back.models[0](x, 0.5), ck.models[0](x, 0.5))
    np.testing.assert_array_equal(back.chain.basis(1), ck.chain.basis(1))


def test_checkpoint_downsampling_chain():
    ck = Checkpoint(PROC, chain=downsampling_chain(ImageShape(8, 8, 3), 2))
    back = decode_checkpoint(encode_checkpoint(ck))
    assert back.chain.dims == (192, 48, 12) and back.models == []


def test_checkpoint_ulp_change_visible():
    ck = make_checkpoint()
    before = encode_checkpoint(ck)
    w = ck.models[0].params[0]
    w[0, 0] = np.nextafter(w[0, 0], np.inf)
    assert encode_checkpoint(ck) != before


def test_checkpoint_corruption_rejected(tmp_path):
    raw = encode_checkpoint(make_checkpoint())
    with pytest.raises(FormatError):
        decode_checkpoint(b"NOPE" + raw[4:])
    with pytest.raises(FormatError):
        decode_checkpoint(raw[:-3])
    with pytest.raises(FormatError):
        decode_checkpoint(raw + b"\0")
    # a failed load leaves an existing file untouched
    path = tmp_path / "c.sdif"
    path.write_bytes(raw)
    with pytest.raises(FormatError):
        decode_checkpoint(path.read_bytes()[:10])
    assert path.read_bytes() == raw


def test_gmm_matrix_round_trip(synthetic):
    gmm = synthetic[0]
    back = gmm_from_matrix(decode_matrix(encode_matrix(gmm_to_matrix(gmm))))
    assert np.array_equal(back.means, gmm.means) and np.array_equal(back.weights, gmm.weights)
