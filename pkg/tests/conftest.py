import numpy as np
import pytest
import torch

from crossdiff.config import TrainConfig
from crossdiff.synthetic import SyntheticSpec, generate_synthetic_corpus


@pytest.fixture(scope="session")
def tiny_corpus():
    spec = SyntheticSpec(
        n_items_per_domain=20,
        n_clusters=4,
        n_single_a=12,
        n_single_b=12,
        n_overlap=10,
        single_len=(3, 5),
        overlap_source_len=(3, 4),
        overlap_target_min=2,
        seed=7,
    )
    return generate_synthetic_corpus(spec)


@pytest.fixture(scope="session")
def tiny_config():
    return TrainConfig(
        d_model=16,
        max_len=16,
        text_dim=16,
        T=10,
        n_experts=2,
        n_k=3,
        m_g=4,
        n_neg=20,
        pretrain_epochs=2,
        main_epochs=2,
        batch_single=8,
        batch_overlap=4,
        checkpoint_every=0,
        early_stop_patience=0,
        seed=3,
    )


def numeric_gradients(loss_fn, params, eps=1e-6):
    """Central-difference gradients of a deterministic scalar loss.

    ``params`` are leaf tensors mutated in place; each element is nudged
    by +-eps and the loss re-evaluated. Returns one gradient tensor per
    parameter, in the same order.
    """
    grads = []
    with torch.no_grad():
        for param in params:
            grad = torch.zeros_like(param)
            flat = param.view(-1)
            flat_grad = grad.view(-1)
            for pos in range(flat.numel()):
                keep = flat[pos].item()
                flat[pos] = keep + eps
                up = float(loss_fn())
                flat[pos] = keep - eps
                down = float(loss_fn())
                flat[pos] = keep
                flat_grad[pos] = (up - down) / (2.0 * eps)
            grads.append(grad)
    return grads


def assert_gradients_match(loss_fn, named_params, rel_tol=1e-4, eps=1e-6):
    """Compare autograd against central differences per parameter group.

    The relative error is measured on each group's gradient vector norm,
    which is robust to individual near-zero entries.
    """
    names = [n for n, _ in named_params]
    params = [p for _, p in named_params]
    for param in params:
        assert param.dtype == torch.float64, "gradient checks need double precision"
        param.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [
        p.grad.clone() if p.grad is not None else torch.zeros_like(p) for p in params
    ]
    numeric = numeric_gradients(loss_fn, params, eps=eps)
    for name, auto, num in zip(names, analytic, numeric):
        scale = max(float(num.norm()), float(auto.norm()), 1e-8)
        error = float((auto - num).norm()) / scale
        assert error < rel_tol, f"gradient mismatch for {name}: relative error {error:.3e}"


def random_unit_rows(n, d, seed):
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)
