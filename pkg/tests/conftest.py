from __future__ import annotations

import numpy as np
import pytest
import torch

from mgreid.config import GenConfig, ModelConfig, RunConfig, TrainConfig
from mgreid.encoder import ImageEncoder
from mgreid.grounding import stripe_label_matrix
from mgreid.pipeline import make_dataset, pseudo_labels

torch.set_num_threads(1)


def micro_config() -> RunConfig:
    """Two layers, D=16, 16x8 images with P=4 -> an 4x2 grid of 8 patches."""
    return RunConfig(
        data=GenConfig(num_ids=4, samples_per_id=4, image_height=16, image_width=8, patch_size=4),
        model=ModelConfig(embed_dim=16, depth=2, num_heads=2, out_dim=8, rmp_heads=2,
                          prompt_len=2, prompt_dim=16, text_layers=1, text_heads=2),
        train=TrainConfig(s1_epochs=2, s2_epochs=2, ids_per_batch=2, samples_per_id=2),
    )


def make_micro_encoder(cfg: RunConfig | None = None, seed: int = 0, am_msa: bool = True,
                       randomize: bool = False) -> ImageEncoder:
    cfg = cfg or micro_config()
    torch.manual_seed(seed)
    d = cfg.data
    stripes = torch.from_numpy(stripe_label_matrix((*d.grid, d.patch_size))).float()
    model = ImageEncoder(cfg.model, (d.image_height, d.image_width), d.patch_size, d.num_ids,
                         am_msa=am_msa, stripe_labels=stripes)
    if randomize and model.rmp is not None:
        # the zero-initialized mask heads would otherwise leave whole paths inactive
        gen = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            for rmp in model.rmp:
                rmp.mlp[-1].weight.copy_(torch.randn(rmp.mlp[-1].weight.shape, generator=gen) * 0.3)
                rmp.mlp[-1].bias.copy_(torch.randn(rmp.mlp[-1].bias.shape, generator=gen) * 0.3)
    return model


def central_difference_check(fn, params, eps: float = 1e-6, coords: int = 12, seed: int = 0) -> dict[str, float]:
    """Relative error between autograd and central differences, per named tensor.

    ``params`` maps names to double-precision leaf tensors. A random subset of
    ``coords`` entries per tensor is perturbed.
    """
    rng = np.random.default_rng(seed)
    tensors = list(params.values())
    analytic = torch.autograd.grad(fn(), tensors, allow_unused=True)
    errors = {}
    for (name, p), grad in zip(params.items(), analytic):
        grad = torch.zeros_like(p) if grad is None else grad
        flat = p.data.view(-1)
        picks = rng.choice(flat.numel(), size=min(coords, flat.numel()), replace=False)
        num, ana = [], []
        for i in picks:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                f_plus = fn().item()
                flat[i] = orig - eps
                f_minus = fn().item()
                flat[i] = orig
            num.append((f_plus - f_minus) / (2 * eps))
            ana.append(grad.view(-1)[i].item())
        num, ana = np.array(num), np.array(ana)
        scale = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-12)
        errors[name] = float(np.linalg.norm(num - ana) / scale)
    return errors


@pytest.fixture
def micro_cfg() -> RunConfig:
    return micro_config()


@pytest.fixture(scope="session")
def small_run():
    """A tiny but complete dataset with pseudo labels, shared across tests."""
    cfg = micro_config()
    cfg.data.samples_per_id = 6
    manifest = make_dataset(cfg)
    _, labels = pseudo_labels(manifest, cfg)
    return cfg, manifest, labels


@pytest.fixture(scope="session")
def default_dataset():
    cfg = RunConfig()
    return cfg, make_dataset(cfg)


def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
