"""Training loss: mean squared position error plus L2 weight decay."""

import numpy as np


def mse_l2_loss(predictions, targets, params=None, weight_decay=0.0):
    """Mean squared error with optional L2 penalty on decaying parameters.

    The data term is the squared Euclidean error averaged over the batch,
    the penalty is (weight_decay / 2) * sum of squared parameter entries
    over all parameters flagged for decay.

    Returns (loss, grad) where grad is the loss gradient with respect to
    ``predictions``.  When a penalty applies, weight_decay * value is also
    accumulated into each decaying parameter's gradient, so a subsequent
    optimiser step sees the full regularised gradient.
    """
    predictions = np.asarray(predictions)
    targets = np.asarray(targets)
    if predictions.shape != targets.shape:
        raise ValueError("predictions and targets must share a shape")
    n = predictions.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    diff = predictions - targets
    loss = float(np.sum(diff * diff) / n)
    grad = (2.0 / n) * diff
    if params is not None and weight_decay > 0:
        for p in params:
            if p.decay:
                loss += 0.5 * weight_decay * float(np.sum(p.value ** 2))
                p.grad += (weight_decay * p.value).astype(p.grad.dtype,
                                                          copy=False)
    return loss, grad
