import numpy as np
import pytest

from swinunetr import SwinUNETR
from swinunetr import diffops as D
from swinunetr.decoder import DecoderConfig, decoder_forward, residual_block, segmentation_probs, upsample_concat
from swinunetr.diffops import ParamStore, Tensor, grad_check_tensors
from swinunetr.errors import ShapeError


def block_store(rng, cin, cout, prefix="", dtype=np.float32, zero=False):
    s = ParamStore(dtype)
    w = (lambda *shape: np.zeros(shape)) if zero else (lambda *shape: 0.3 * rng.standard_normal(shape))
    s.add(prefix + "conv1.w", w(cout, cin, 3, 3, 3))
    s.add(prefix + "conv1.b", np.zeros(cout))
    s.add(prefix + "norm1.g", np.ones(cout))
    s.add(prefix + "norm1.b", np.zeros(cout))
    s.add(prefix + "conv2.w", w(cout, cout, 3, 3, 3))
    s.add(prefix + "conv2.b", np.zeros(cout))
    s.add(prefix + "norm2.g", np.ones(cout))
    s.add(prefix + "norm2.b", np.zeros(cout))
    if cin != cout:
        s.add(prefix + "skip.w", 0.3 * rng.standard_normal((cout, cin, 1, 1, 1)))
        s.add(prefix + "skip.b", np.zeros(cout))
    return s


def test_residual_zero_convs_is_identity(rng):
    x = rng.standard_normal((3, 4, 4, 4)).astype(np.float32)
    out = residual_block(Tensor(x), block_store(rng, 3, 3, zero=True).view(""))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("cin,cout", [(2, 2), (2, 5)])
def test_residual_shapes(rng, cin, cout):
    out = residual_block(Tensor(rng.standard_normal((cin, 3, 5, 2))), block_store(rng, cin, cout).view(""))
    assert out.shape == (cout, 3, 5, 2)


@pytest.mark.parametrize("cin,cout", [(2, 2), (2, 3)])
def test_residual_gradient(rng, cin, cout):
    store = block_store(rng, cin, cout, dtype=np.float64)
    x = Tensor(rng.standard_normal((cin, 2, 2, 2)), requires_grad=True)
    wts = rng.standard_normal((cout, 2, 2, 2))

    def f(ts):
        return D.sum(residual_block(ts[0], store.view("")) * wts)

    assert grad_check_tensors(f, [x] + list(store.values()), h=1e-6) < 1e-4


def up_store(rng, cx, cskip, cout, dtype=np.float32):
    s = block_store(rng, cx + cskip, cout, "block.", dtype)
    s.add("up.w", 0.3 * rng.standard_normal((cx, cx, 2, 2, 2)))
    s.add("up.b", np.zeros(cx))
    return s


def test_upsample_concat_shapes(rng):
    s = up_store(rng, 4, 2, 3)
    out = upsample_concat(Tensor(rng.standard_normal((4, 2, 2, 2))), Tensor(rng.standard_normal((2, 4, 4, 4))), s.view(""))
    assert out.shape == (3, 4, 4, 4)
    assert s["block.conv1.w"].shape[1] == 4 + 2


def test_upsample_concat_zero_input(rng):
    s = up_store(rng, 4, 2, 3)
    skip = Tensor(rng.standard_normal((2, 4, 4, 4)).astype(np.float32))
    out = upsample_concat(Tensor(np.zeros((4, 2, 2, 2), np.float32)), skip, s.view("")).data
    ref = residual_block(D.concat([Tensor(np.zeros((4, 4, 4, 4), np.float32)), skip], 0), s.view("block")).data
    np.testing.assert_array_equal(out, ref)


def test_upsample_concat_extent_mismatch(rng):
    s = up_store(rng, 4, 2, 3)
    with pytest.raises(ShapeError):
        upsample_concat(Tensor(np.zeros((4, 2, 2, 2))), Tensor(np.zeros((2, 6, 4, 4))), s.view(""))


def test_upsample_crops_odd_skip(rng):
    s = up_store(rng, 4, 2, 3)
    out = upsample_concat(Tensor(np.zeros((4, 2, 2, 2))), Tensor(np.zeros((2, 3, 4, 3))), s.view(""))
    assert out.shape == (3, 3, 4, 3)


def test_decoder_widths():
    cfg = DecoderConfig(n_classes=2, base_width=6)
    assert cfg.widths == [6, 6, 12, 24, 48, 96]
    assert cfg.feature_channels == [1, 6, 12, 24, 48, 96]
    with pytest.raises(ValueError):
        DecoderConfig(n_classes=0)


def test_decoder_end_to_end_shape(tiny, rng):
    model = SwinUNETR(tiny, seed=3)
    x = rng.random((1, 32, 32, 32)).astype(np.float32)
    logits = model.logits(x)
    assert logits.shape == (3, 32, 32, 32)
    assert logits.data.tobytes() == model.logits(x).data.tobytes()


def test_decoder_feature_count_checked(tiny):
    model = SwinUNETR(tiny, seed=0)
    feats = model.features(np.zeros((1, 16, 16, 16), np.float32))
    with pytest.raises(ShapeError):
        decoder_forward(feats[:-1], tiny.decoder, model.params.view("dec"))


def test_segmentation_probs(rng):
    p = segmentation_probs(Tensor(np.zeros((2, 3, 3, 3)))).data
    np.testing.assert_allclose(p, 0.5)
    logits = rng.standard_normal((4, 5, 5, 5)) * 10
    q = segmentation_probs(Tensor(logits)).data
    assert q.min() >= 0 and np.abs(q.sum(0) - 1).max() < 1e-6
    np.testing.assert_array_equal(segmentation_probs(Tensor(logits + 7.0)).data.argmax(0), q.argmax(0))
