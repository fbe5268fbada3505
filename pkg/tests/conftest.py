import numpy as np
import pytest
import torch

from echodiff.data import toy_generate
from echodiff.nets import DenoiserUNet, NetConfig
from echodiff.semantics import one_hot_labels


def tiny_net_config(**kw) -> NetConfig:
    defaults = dict(base_width=16, channel_multipliers=(1, 2), attention_levels=(1,),
                    time_embed_dim=32, frame_embed_dim=16, groups=8)
    defaults.update(kw)
    return NetConfig(**defaults)


def make_net(seed: int = 0, **kw) -> DenoiserUNet:
    torch.manual_seed(seed)
    return DenoiserUNet(tiny_net_config(**kw))


def randomize_parameters(net: torch.nn.Module, seed: int = 0, scale: float = 0.1) -> None:
    """Generic point in parameter space (zero-inited heads included)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in net.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)


def random_condition(hw: int, seed: int = 0):
    gen = torch.Generator().manual_seed(seed)
    label = torch.randint(0, 4, (hw, hw), generator=gen)
    return one_hot_labels(label)


def groupnorm_oracle(x: np.ndarray, groups: int, eps: float = 1e-5) -> np.ndarray:
    """Independent per-(frame, group) normalization in float64 numpy."""
    b, c, k, h, w = x.shape
    out = np.empty_like(x, dtype=np.float64)
    cg = c // groups
    for bi in range(b):
        for g in range(groups):
            for ki in range(k):
                block = x[bi, g * cg:(g + 1) * cg, ki].astype(np.float64)
                mu = block.mean()
                var = block.var()
                out[bi, g * cg:(g + 1) * cg, ki] = (block - mu) / np.sqrt(var + eps)
    return out


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toydata")
    toy_generate(n_patients=12, k=8, hw=32, seed=7, out_root=root)
    return root
