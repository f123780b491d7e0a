import numpy as np
import torch

from recallbench.model import Classifier, one_hot, soft_cross_entropy

TOY_ARCHS = [
    ("linear", {}),
    ("smallcnn", {"width": 3}),
    ("mini-resnet", {"width": 3, "blocks": 2}),
]


def gradient_check(arch_id, options, probes=20, seed=0, step=1e-6):
    """Relative errors between autograd and central differences of the CE loss
    at ``probes`` random parameter coordinates, in float64.

    The denominator is floored at 1e-5 so vanishing gradients are compared in
    absolute terms.
    """
    rng = np.random.default_rng(seed)
    model = Classifier(arch_id, 3, (5, 5, 2), seed=seed, **options).double()
    images = rng.uniform(0, 1, size=(6, 5, 5, 2))
    targets = torch.as_tensor(one_hot(rng.integers(0, 3, 6), 3))

    def loss_at(flat):
        model.set_params(flat)
        with torch.no_grad():
            return soft_cross_entropy(model(images), targets).item()

    theta = torch.nn.utils.parameters_to_vector(model.parameters()).detach().clone()
    model.net.zero_grad()
    soft_cross_entropy(model(images), targets).backward()
    analytic = torch.cat([p.grad.flatten() for p in model.parameters()]).numpy()
    errors = []
    for i in rng.choice(theta.numel(), size=probes, replace=False):
        plus, minus = theta.clone(), theta.clone()
        plus[i] += step
        minus[i] -= step
        numeric = (loss_at(plus.numpy()) - loss_at(minus.numpy())) / (2 * step)
        # below 1e-5 the difference quotient is dominated by round-off (~1e-10)
        scale = max(abs(numeric), abs(analytic[i]), 1e-5)
        errors.append(abs(numeric - analytic[i]) / scale)
    model.set_params(theta.numpy())
    return np.array(errors)
