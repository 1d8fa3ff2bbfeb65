import pytest
import torch

from dmfn.core import ContractError, ImageBatch
from dmfn.discriminator import DiscriminatorConfig, build_discriminator, discriminator_forward


@pytest.fixture(scope="module")
def disc():
    torch.manual_seed(0)
    return build_discriminator().eval()


def _img(n, size, seed):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, size, size, generator=g) * 2 - 1


def test_shapes_and_taps(disc):
    full, patch = _img(3, 256, 0), _img(3, 128, 1)
    with torch.no_grad():
        res = discriminator_forward(disc, ImageBatch(full), ImageBatch(patch))
    assert res.score.shape == (3,)
    assert len(res.local_taps) == 5
    assert [t.shape[-1] for t in res.local_taps] == [64, 32, 16, 8, 4] == disc.tap_sizes(128)
    assert [t.shape[1] for t in res.local_taps] == [64, 128, 256, 512, 512]
    assert all(t.shape[0] == 3 and torch.isfinite(t).all() for t in res.local_taps)
    assert torch.isfinite(res.score).all()


def test_deterministic(disc):
    full, patch = _img(2, 128, 3), _img(2, 64, 4)
    with torch.no_grad():
        a, _ = disc(full, patch)
        b, _ = disc(full.clone(), patch.clone())
    assert torch.equal(a, b)


def test_widths_and_no_norm(disc):
    convs = [m for m in disc.global_branch.modules() if isinstance(m, torch.nn.Conv2d)]
    assert [c.out_channels for c in convs] == [64, 128, 256, 512, 512, 512]
    assert all(c.kernel_size == (4, 4) and c.stride == (2, 2) for c in convs)
    assert not any(isinstance(m, (torch.nn.InstanceNorm2d, torch.nn.BatchNorm2d)) for m in disc.modules())


def test_contract_errors(disc):
    with pytest.raises(ContractError):
        disc(_img(2, 128, 0), _img(3, 64, 0))
    with pytest.raises(ContractError):
        disc(_img(1, 32, 0), _img(1, 64, 0))
    with pytest.raises(ContractError):
        DiscriminatorConfig(local_layers=4)
    with pytest.raises(ContractError):
        DiscriminatorConfig(tap_count=4)
