import numpy as np
import pytest
import torch

from tokrate.errors import ConfigError, NumericalHealthError, ValidationError
from tokrate.nn_core import (
    DecoderLayer,
    EncoderLayer,
    MultiHeadAttention,
    ScheduledAdam,
    StridedConv1d,
    UpsampleBlock,
    WarmupLinearSchedule,
    finite_difference_check,
    load_checkpoint,
    save_checkpoint,
    set_determinism,
)

torch.manual_seed(0)


def test_conv_identity_kernel():
    conv = StridedConv1d(1, 1, 1, 1)
    with torch.no_grad():
        conv.conv.weight.fill_(1.0)
        conv.conv.bias.fill_(0.0)
    x = torch.randn(2, 7, 1)
    torch.testing.assert_close(conv(x), x)


@pytest.mark.parametrize("t,s,expected", [(10, 2, 5), (7, 2, 4), (1, 3, 1), (12, 3, 4)])
def test_strided_conv_ceil_length(t, s, expected):
    conv = StridedConv1d(3, 4, 3 if s == 2 else 5, s)
    x = torch.randn(1, t, 3)
    assert conv(x).shape[1] == expected


def test_stride_chain_2_2_3():
    convs = [StridedConv1d(2, 2, 3, 2), StridedConv1d(2, 2, 3, 2), StridedConv1d(2, 2, 5, 3)]
    x = torch.randn(1, 48, 2)
    for c in convs:
        x = c(x)
    assert x.shape[1] == 4


def test_strided_conv_causal_dependency():
    # output frame t must not depend on input frames > t*s + k - 1
    conv = StridedConv1d(1, 1, 3, 2).double()
    x = torch.randn(1, 11, 1, dtype=torch.float64)
    base = conv(x)
    x2 = x.clone()
    x2[0, 10, 0] += 5.0  # frame index 10 > 2*2+3-1=6 for output frame 2
    pert = conv(x2)
    torch.testing.assert_close(pert[0, :3], base[0, :3])


def test_upsample_block_exact_length():
    up = UpsampleBlock(4, 6, 3)
    x = torch.randn(2, 5, 4)
    assert up(x).shape == (2, 15, 4)


GRAD_LAYERS = {
    "linear": lambda: torch.nn.Linear(5, 4),
    "layernorm": lambda: torch.nn.LayerNorm(5),
    "conv": lambda: StridedConv1d(5, 3, 3, 2),
    "upsample": lambda: UpsampleBlock(5, 4, 2),
    "mha": lambda: MultiHeadAttention(4, 2),
    "encoder": lambda: EncoderLayer(4, 2, 8),
    "decoder": lambda: DecoderLayer(4, 2, 8),
}


@pytest.mark.parametrize("name", sorted(GRAD_LAYERS))
def test_layer_gradients_vs_finite_differences(name):
    torch.manual_seed(3)
    layer = GRAD_LAYERS[name]().double()
    shape = (1, 6, 5) if name in ("conv", "upsample") else (1, 4, 4) if name in ("mha", "encoder", "decoder") else (2, 3, 5)
    x = torch.randn(*shape, dtype=torch.float64, requires_grad=True)
    if name == "mha":
        fn = lambda: layer(x, x).pow(2).sum()
    elif name == "decoder":
        mem = torch.randn(1, 3, 4, dtype=torch.float64)
        fn = lambda: layer(x, mem).pow(2).sum()
    else:
        fn = lambda: layer(x).pow(2).sum()
    # input gradients exhaustively, parameter gradients on a subsample
    worst = finite_difference_check(fn, [x], rel_tol=1e-4)
    params = list(layer.parameters())
    worst = max(worst, finite_difference_check(fn, params, rel_tol=1e-4,
                                               max_entries=20))
    assert worst <= 1e-4


def test_random_composition_gradcheck():
    torch.manual_seed(5)
    enc1, enc2 = EncoderLayer(4, 2, 8).double(), EncoderLayer(4, 2, 8).double()
    lin = torch.nn.Linear(4, 2).double()
    x = torch.randn(1, 5, 4, dtype=torch.float64, requires_grad=True)
    fn = lambda: lin(enc2(enc1(x))).pow(2).sum()
    assert finite_difference_check(fn, [x]) <= 1e-4


def test_schedule_endpoints():
    sched = WarmupLinearSchedule(2e-5, 12000, 20000)
    assert sched.lr(12000) == pytest.approx(2e-5)
    assert sched.lr(20000) == 0.0
    assert sched.lr(6000) == pytest.approx(1e-5)


def test_adam_single_step_closed_form():
    # one step, scalar param, g=1: update = -lr * mhat/(sqrt(vhat)+eps)
    p = torch.nn.Parameter(torch.tensor([1.0]))
    sched = WarmupLinearSchedule(0.1, 1, 10)  # lr at step 1 = 0.1
    opt = ScheduledAdam([p], sched)
    p.grad = torch.tensor([1.0])
    opt.step()
    # bias-corrected m̂ = v̂ = 1 on step 1 -> update = lr * 1/(1+eps)
    expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8)
    assert p.item() == pytest.approx(expected, abs=1e-7)


def test_adam_nonfinite_grad_raises():
    p = torch.nn.Parameter(torch.tensor([1.0]))
    opt = ScheduledAdam([p], WarmupLinearSchedule(0.1, 1, 10))
    p.grad = torch.tensor([float("nan")])
    with pytest.raises(NumericalHealthError):
        opt.step()


def test_schedule_validation():
    with pytest.raises(ConfigError):
        WarmupLinearSchedule(1e-3, 10, 10)


def test_checkpoint_roundtrip(tmp_path):
    params = {
        "b.weight": np.arange(6, dtype=np.float32).reshape(2, 3),
        "a.bias": np.array([1.5, -2.5], dtype=np.float32),
    }
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"d_model": 4}, params, extra={"note": 1})
    cfg, loaded, extra = load_checkpoint(path)
    assert cfg == {"d_model": 4}
    assert extra == {"note": 1}
    for k in params:
        np.testing.assert_array_equal(loaded[k], params[k])


def test_checkpoint_byte_stable(tmp_path):
    params = {"w": np.ones((3, 3), dtype=np.float32)}
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, {"x": 1}, params)
    save_checkpoint(p2, {"x": 1}, params)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOTACKPT" * 4)
    with pytest.raises(ValidationError):
        load_checkpoint(p)


def test_training_determinism_bit_identical():
    def run():
        set_determinism(123, threads=1)
        layer = torch.nn.Linear(6, 6)
        opt = ScheduledAdam(layer.parameters(), WarmupLinearSchedule(1e-3, 5, 50))
        x = torch.randn(4, 6)
        for _ in range(20):
            opt.zero_grad()
            layer(x).pow(2).sum().backward()
            opt.step()
        return layer.weight.detach().numpy().copy()

    np.testing.assert_array_equal(run(), run())
