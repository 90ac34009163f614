import numpy as np
import pytest
import torch

from trackdiff.checkpoint import CheckpointError, fnv1a64, load_checkpoint, read_checkpoint, save_checkpoint
from trackdiff.denoiser import Denoiser, preset
from trackdiff.diffusion import make_schedule
from trackdiff.training import OptimConfig, make_optimizer, train_step


def fnv_reference(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) % 2**64
    return h


@pytest.mark.parametrize("data", [b"", b"a", b"foobar", bytes(range(256))])
def test_fnv_matches_reference(data):
    assert fnv1a64(data) == fnv_reference(data)


def test_fnv_known_values():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C


def trained(small_scores, small_vocab, steps=3):
    model = Denoiser(preset("toy", small_vocab.K, n_layers=1), seed=1)
    ocfg = OptimConfig(lr=1e-3, warmup=0, total_steps=10)
    opt = make_optimizer(model, ocfg)
    rng = np.random.default_rng(0)
    for _ in range(steps):
        train_step(model, opt, small_scores[:2], make_schedule(model.cfg.T), rng)
    return model, opt, ocfg


def test_roundtrip_bit_exact(small_scores, small_vocab):
    model, opt, ocfg = trained(small_scores, small_vocab)
    data = save_checkpoint(model, opt, extra={"step": 3})
    back, extra, opt2 = load_checkpoint(data, small_vocab.K, lambda m: make_optimizer(m, ocfg))
    assert extra == {"step": 3} and back.cfg == model.cfg
    for (n, a), (_, b) in zip(model.named_parameters(), back.named_parameters()):
        assert torch.equal(a, b), n
    assert save_checkpoint(back, opt2, extra={"step": 3}) == data


def test_resumed_optimizer_continues_identically(small_scores, small_vocab):
    model, opt, ocfg = trained(small_scores, small_vocab)
    back, _, opt2 = load_checkpoint(save_checkpoint(model, opt), None, lambda m: make_optimizer(m, ocfg))
    sched = make_schedule(model.cfg.T)
    a = train_step(model, opt, small_scores[:2], sched, np.random.default_rng(5))
    b = train_step(back, opt2, small_scores[:2], sched, np.random.default_rng(5))
    assert a.as_floats() == b.as_floats()
    for p, q in zip(model.parameters(), back.parameters()):
        assert torch.equal(p, q)


def test_errors(small_vocab):
    model = Denoiser(preset("toy", small_vocab.K, n_layers=1))
    data = save_checkpoint(model)
    with pytest.raises(CheckpointError, match="unexpected end"):
        read_checkpoint(data[:-100])
    with pytest.raises(CheckpointError, match="unexpected end"):
        read_checkpoint(data[:5])
    with pytest.raises(CheckpointError, match="bad magic"):
        read_checkpoint(b"GETDIFF2" + data[8:])
    with pytest.raises(CheckpointError, match="vocab mismatch"):
        read_checkpoint(data, small_vocab.K + 1)
    with pytest.raises(CheckpointError, match="trailing"):
        read_checkpoint(data + b"\0")
    flipped = bytearray(data)
    flipped[-20] ^= 1
    with pytest.raises(CheckpointError, match="checksum"):
        read_checkpoint(bytes(flipped))


def test_header_lists_tensors(small_vocab):
    model = Denoiser(preset("toy", small_vocab.K, n_layers=1))
    header, tensors = read_checkpoint(save_checkpoint(model))
    assert [n for n, _ in header["tensors"]] == [n for n, _ in model.named_parameters()]
    assert all(t.dtype == np.float64 for t in tensors.values())
