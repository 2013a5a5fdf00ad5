import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from guidedpurify.codec import IdentityCodec, ImageBatch, LatentBatch, PretrainedVAECodec, decode, encode
from guidedpurify.errors import AdapterError, ShapeMismatchError


def _batch(seed=0, shape=(4, 3, 8, 8)):
    g = torch.Generator().manual_seed(seed)
    return ImageBatch(torch.rand(shape, generator=g), torch.arange(shape[0]) % 2)


def test_identity_encode_is_bitwise_equal():
    x = _batch()
    z = encode(IdentityCodec(), x)
    assert torch.equal(z.data, x.data)
    assert z.origin_shape == (3, 8, 8)


def test_identity_round_trip_exact():
    x = _batch(1)
    codec = IdentityCodec()
    assert torch.equal(decode(codec, encode(codec, x)).data, x.data)


def test_decode_clamps_out_of_range():
    z = LatentBatch(torch.tensor([-0.5, 0.25, 1.5, 1.0]).view(1, 1, 2, 2), (1, 2, 2))
    out = decode(IdentityCodec(), z)
    assert out.data.flatten().tolist() == [0.0, 0.25, 1.0, 1.0]


def test_decode_rejects_wrong_shape():
    z = LatentBatch(torch.zeros(1, 1, 2, 2), (1, 4, 4))
    with pytest.raises(ShapeMismatchError):
        decode(IdentityCodec(), z)


def test_image_batch_validation():
    with pytest.raises(ShapeMismatchError):
        ImageBatch(torch.zeros(3, 8, 8))
    with pytest.raises(ShapeMismatchError):
        ImageBatch(torch.zeros(2, 1, 4, 4), torch.zeros(3))
    b = ImageBatch(torch.zeros(2, 1, 4, 4), torch.tensor([0, 2]))
    with pytest.raises(ShapeMismatchError):
        b.check_labels(2)
    b.check_labels(3)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(0.1, 5.0))
def test_decode_always_in_range_and_deterministic(seed, scale):
    g = torch.Generator().manual_seed(seed)
    z = LatentBatch(torch.randn(2, 1, 4, 4, generator=g) * scale, (1, 4, 4))
    a, b = decode(IdentityCodec(), z), decode(IdentityCodec(), z)
    assert a.in_range()
    assert torch.equal(a.data, b.data)


def test_pretrained_vae_unavailable_offline(monkeypatch, tmp_path):
    monkeypatch.setenv("HF_HUB_OFFLINE", "1")
    with pytest.raises(AdapterError):
        PretrainedVAECodec(str(tmp_path / "no-such-model"), local_files_only=True)
