import numpy as np
import pytest
import torch

from gctx_unet import numerics as nx


@pytest.fixture
def f64():
    with nx.precision(torch.float64):
        yield


def t64(a) -> torch.Tensor:
    return torch.from_numpy(np.asarray(a, dtype=np.float64))


def conv2d_loops(x, w, b=None, stride=1, padding=0, groups=1):
    """Direct sliding-window cross-correlation over numpy arrays."""
    bsz, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((bsz, o, ho, wo))
    per = o // groups
    for n in range(bsz):
        for oc in range(o):
            g = oc // per
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += xp[n, g * cg + ci, i * stride + a, j * stride + bb] * w[oc, ci, a, bb]
                    out[n, oc, i, j] = acc + (0.0 if b is None else b[oc])
    return out
