import numpy as np
import pytest

from estshift.analysis import EsmRecord
from estshift.data import Dataset, load_mnist, load_mnist_idx, subsample
from estshift.errors import (BadMagicError, CheckpointMagicError, CheckpointVersionError,
                             CountMismatchError, DataError, TruncatedCheckpointError,
                             TruncatedFileError)
from estshift.io import emit_csv, format_value, load_checkpoint, read_checkpoint, read_csv, save_checkpoint
from estshift.networks import NetworkSpec, build, residual_variants
from estshift.tensor import RngState, rng_normal, rng_uniform

from conftest import needs_mnist, mnist_dir

# Two 2x3 images, written byte by byte.
IMAGE_BYTES = bytes([
    0x00, 0x00, 0x08, 0x03,  # magic
    0x00, 0x00, 0x00, 0x02,  # n
    0x00, 0x00, 0x00, 0x02,  # rows
    0x00, 0x00, 0x00, 0x03,  # cols
    0, 255, 51, 102, 153, 204,
    1, 2, 3, 254, 128, 0,
])
LABEL_BYTES = bytes([0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x02, 7, 3])


def write(tmp_path, name, data):
    p = tmp_path / name
    p.write_bytes(data)
    return str(p)


def test_idx_fixture_parses_exactly(tmp_path):
    ds = load_mnist_idx(write(tmp_path, "img", IMAGE_BYTES), write(tmp_path, "lab", LABEL_BYTES))
    expect = np.array([[[0, 255, 51], [102, 153, 204]], [[1, 2, 3], [254, 128, 0]]], dtype=float) / 255.0
    assert ds.images.shape == (2, 1, 2, 3)
    assert np.array_equal(ds.images[:, 0], expect)
    assert ds.labels.tolist() == [7, 3] and ds.labels.dtype == np.int64
    assert ds.flat().shape == (2, 6)


def test_idx_errors(tmp_path):
    lab = write(tmp_path, "lab", LABEL_BYTES)
    bad = bytearray(IMAGE_BYTES)
    bad[3] = 0x01
    with pytest.raises(BadMagicError):
        load_mnist_idx(write(tmp_path, "bad", bytes(bad)), lab)
    with pytest.raises(TruncatedFileError):
        load_mnist_idx(write(tmp_path, "short", IMAGE_BYTES[:-1]), lab)
    with pytest.raises(TruncatedFileError):
        load_mnist_idx(write(tmp_path, "hdr", IMAGE_BYTES[:10]), lab)
    three = LABEL_BYTES[:7] + bytes([3, 7, 3, 1])
    with pytest.raises(CountMismatchError, match="count mismatch"):
        load_mnist_idx(write(tmp_path, "img", IMAGE_BYTES), write(tmp_path, "lab3", three))
    with pytest.raises(DataError):
        load_mnist_idx(str(tmp_path / "missing"), lab)
    # Error classes are distinct.
    assert len({BadMagicError, TruncatedFileError, CountMismatchError}) == 3


def test_label_out_of_range(tmp_path):
    with pytest.raises(DataError):
        load_mnist_idx(write(tmp_path, "img", IMAGE_BYTES),
                       write(tmp_path, "lab", LABEL_BYTES[:8] + bytes([11, 3])))


@needs_mnist
def test_official_test_split():
    ds = load_mnist(mnist_dir(), "test")
    assert ds.images.shape == (10000, 1, 28, 28)
    assert ds.images.min() == 0.0 and ds.images.max() == 1.0
    assert set(np.unique(ds.labels)) == set(range(10))


def toy_dataset(n=2000):
    labels = np.arange(n) % 10
    return Dataset(np.arange(n, dtype=float).reshape(n, 1, 1, 1), labels.astype(np.int64))


def test_subsample_contract():
    ds = toy_dataset(50)
    full = subsample(ds, 50, 1)
    assert sorted(full.images.ravel().tolist()) == list(range(50))
    a = subsample(ds, 32, 3)
    b = subsample(ds, 32, 3)
    assert np.array_equal(a.images, b.images)
    assert len(set(a.images.ravel().tolist())) == 32
    assert not np.array_equal(a.images, subsample(ds, 32, 4).images)
    for n in (0, 51):
        with pytest.raises(ValueError):
            subsample(ds, n, 0)


def test_subsample_histogram_within_4_sigma():
    ds = toy_dataset(10000)
    counts = np.bincount(subsample(ds, 1024, 0).labels, minlength=10)
    p = 0.1
    sigma = np.sqrt(1024 * p * (1 - p))
    assert np.all(np.abs(counts - 1024 * p) < 4 * sigma)


def test_format_value_round_trip():
    rng = RngState(0)
    vals = list(rng_normal(rng, 1e3, 200)) + [0.1, 1 / 3, 5e-324, 1.7976931348623157e308, -0.0]
    for v in vals:
        assert float(format_value(v)) == v
    assert format_value(3) == "3" and format_value(True) == "1" and format_value("p2") == "p2"


def test_emit_csv(tmp_path):
    p = str(tmp_path / "esm.csv")
    emit_csv([], p, EsmRecord.FIELDS)
    assert open(p).read() == "epoch,layer,esm_mu,esm_sigma\n"
    with pytest.raises(ValueError):
        emit_csv([], p)
    rec = EsmRecord(3, 2, 0.1 + 0.2, 1 / 7)
    emit_csv([rec], p)
    lines = open(p).read().splitlines()
    assert len(lines) == 2 and len(lines[1].split(",")) == 4
    row = read_csv(p)[0]
    assert float(row["esm_mu"]) == 0.1 + 0.2 and float(row["esm_sigma"]) == 1 / 7
    emit_csv([{"a": 1, "b": 2.5}], p)
    assert read_csv(p) == [{"a": "1", "b": "2.5"}]


def nets():
    yield build(NetworkSpec(arch="mlp", depth=4, width=6, input_shape=(5,), seed=3, affine=True,
                            norm_pattern=["bn", "gn:2", "ln"]))
    yield build(NetworkSpec(arch="residual", width=4, block_count=2, input_shape=(1, 8, 8), seed=4,
                            variants=residual_variants(2, "p2:in", "ALL"), affine=True))


@pytest.mark.parametrize("net", list(nets()), ids=["mlp", "residual"])
def test_checkpoint_round_trip(tmp_path, net):
    rng = RngState(9)
    for a in net.state_arrays():
        a[...] = rng_uniform(rng, 0.5, 2.0, a.shape)
    x = rng_normal(rng, 1.0, (3,) + tuple(net.spec.input_shape))
    before = net.forward(x, "infer")
    p1, p2 = str(tmp_path / "a.bin"), str(tmp_path / "b.bin")
    save_checkpoint(net, p1, epoch=7, rng=RngState(5, counter=11))
    ck = read_checkpoint(p1)
    assert ck.epoch == 7 and ck.rng == RngState(5, counter=11)
    for a, b in zip(net.state_arrays(), ck.net.state_arrays()):
        assert a.tobytes() == b.tobytes()
    assert ck.net.forward(x, "infer").tobytes() == before.tobytes()
    save_checkpoint(ck.net, p2, epoch=7, rng=ck.rng)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_checkpoint_errors(tmp_path):
    net = next(nets())
    p = str(tmp_path / "c.bin")
    save_checkpoint(net, p)
    data = open(p, "rb").read()
    for cut in (4, 12, 40, len(data) - 1):
        q = tmp_path / f"t{cut}.bin"
        q.write_bytes(data[:cut])
        with pytest.raises(TruncatedCheckpointError, match="truncated checkpoint"):
            load_checkpoint(str(q))
    q = tmp_path / "magic.bin"
    q.write_bytes(b"ESHIFT02" + data[8:])
    with pytest.raises(CheckpointMagicError):
        load_checkpoint(str(q))
    q = tmp_path / "version.bin"
    q.write_bytes(data[:8] + (2).to_bytes(4, "little") + data[12:])
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(str(q))
    assert data[:8] == b"ESHIFT01" and int.from_bytes(data[8:12], "little") == 1
