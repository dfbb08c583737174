import numpy as np
import pytest

from dislearn import io, reduction, surrogate as sg


def test_samples_roundtrip(tmp_path, samples_semi64):
    path = tmp_path / "ds"
    io.save_samples(samples_semi64, str(path), digest="abc123")
    back = io.load_samples(str(path))
    assert np.array_equal(back.X, samples_semi64.X)
    assert np.array_equal(back.Y, samples_semi64.Y)
    assert np.array_equal(np.asarray(back.J), samples_semi64.J)
    assert np.array_equal(back.newton_iters, samples_semi64.newton_iters)
    assert back.seed == samples_semi64.seed
    assert back.problem.kind == samples_semi64.problem.kind
    assert back.cov.params() == samples_semi64.cov.params()


def test_samples_memmap_above_threshold(tmp_path, samples_semi64, monkeypatch):
    monkeypatch.setattr(io, "MEMMAP_THRESHOLD_BYTES", 1024)
    path = tmp_path / "ds"
    io.save_samples(samples_semi64, str(path))
    back = io.load_samples(str(path))
    assert isinstance(back.J, np.memmap)
    assert np.array_equal(np.asarray(back.J[:3]), samples_semi64.J[:3])


def test_samples_checksum_detects_corruption(tmp_path, samples_semi64):
    path = tmp_path / "ds"
    io.save_samples(samples_semi64, str(path))
    with open(path / "Y.bin", "r+b") as f:
        f.seek(16)
        f.write(b"\xff\xff\xff\xff")
    with pytest.raises(io.IntegrityError):
        io.load_samples(str(path))


def test_basis_roundtrip(tmp_path, samples_semi64, cov_semi64):
    basis = reduction.output_pca(samples_semi64, 7)
    path = tmp_path / "basis"
    io.save_basis(basis, str(path), digest="d", provenance={"n": 60})
    back = io.load_basis(str(path))
    assert back.kind == basis.kind
    assert back.source == basis.source
    assert back.r == basis.r
    assert np.array_equal(back.cols, basis.cols)
    assert np.array_equal(back.eigs, basis.eigs)
    assert np.array_equal(back.mean, basis.mean)
    bi = reduction.input_dis(samples_semi64, cov_semi64, 5)
    io.save_basis(bi, str(tmp_path / "bi"))
    back2 = io.load_basis(str(tmp_path / "bi"))
    assert np.array_equal(back2.cols, bi.cols)
    assert back2.cov.params() == cov_semi64.params()


def test_network_roundtrip(tmp_path):
    net = sg.LatentNetwork.initialized(4, 3, 8, "silu", seed=2)
    path = tmp_path / "net"
    io.save_network(net, str(path), schedule_digest="sd")
    back = io.load_network(str(path))
    assert back.activation == "silu"
    assert np.array_equal(back.get_flat(), net.get_flat())


def test_config_digest_stability():
    a = io.config_digest({"b": 2, "a": 1})
    b = io.config_digest({"a": 1, "b": 2})
    assert a == b
    assert a != io.config_digest({"a": 1, "b": 3})
