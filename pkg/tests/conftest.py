import numpy as np
import pytest
import torch

from copymove.config import DecoderConfig, EncoderConfig, ModelConfig

torch.set_num_threads(1)


def tiny_encoder_config():
    return EncoderConfig(channels=(8, 12, 16, 20), depths=(1, 1, 1, 1),
                         heads=(1, 2, 4, 4), reductions=(8, 4, 2, 1))


def tiny_model_config(seed=0, image_size=(64, 64)):
    return ModelConfig(encoder=tiny_encoder_config(),
                       decoder=DecoderConfig(top_t=16, fpn_channels=8,
                                             mscfc_channels=16),
                       image_size=image_size, seed=seed)


def micro_model_config(seed=0):
    """Smallest config that exercises every code path; for gradient checks."""
    enc = EncoderConfig(channels=(4, 4, 8, 8), depths=(1, 1, 1, 1),
                        heads=(1, 2, 2, 2), reductions=(8, 4, 2, 1))
    dec = DecoderConfig(top_t=4, fpn_channels=4, mscfc_channels=8)
    return ModelConfig(encoder=enc, decoder=dec, image_size=(32, 32), seed=seed)


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def micro_config():
    return micro_model_config()


def finite_difference_check(loss_fn, tensors, n_samples=20, eps=1e-5,
                            rtol=1e-4, seed=0):
    """Compare autograd gradients of ``loss_fn()`` to central differences.

    ``tensors`` are float64 leaves the loss depends on; n_samples individual
    entries are perturbed.  Returns the worst relative error seen.
    """
    tensors = list(tensors)
    assert tensors, "no tensors to check"
    for t in tensors:
        assert t.dtype == torch.float64, "gradient checks need double precision"
        t.requires_grad_(True)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors)
    sizes = np.array([t.numel() for t in tensors])
    bounds = np.cumsum(sizes)
    rng = np.random.default_rng(seed)
    picks = rng.choice(int(bounds[-1]), size=min(n_samples, int(bounds[-1])),
                       replace=False)
    worst = 0.0
    for flat_index in picks:
        ti = int(np.searchsorted(bounds, flat_index, side="right"))
        offset = int(flat_index - (bounds[ti - 1] if ti else 0))
        tensor = tensors[ti]
        with torch.no_grad():
            original = float(tensor.view(-1)[offset])
            tensor.view(-1)[offset] = original + eps
            plus = float(loss_fn())
            tensor.view(-1)[offset] = original - eps
            minus = float(loss_fn())
            tensor.view(-1)[offset] = original
        numeric = (plus - minus) / (2.0 * eps)
        analytic = float(grads[ti].reshape(-1)[offset])
        scale = max(abs(numeric), abs(analytic))
        if scale < 1e-7:
            assert abs(numeric - analytic) < 1e-7, (
                f"tensor {ti} entry {offset}: numeric {numeric} vs "
                f"analytic {analytic}")
            continue
        rel = abs(numeric - analytic) / scale
        worst = max(worst, rel)
        assert rel <= rtol, (
            f"tensor {ti} entry {offset}: numeric {numeric} vs analytic "
            f"{analytic}, rel err {rel:.3e} > {rtol}")
    return worst
