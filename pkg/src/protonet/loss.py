"""The four-term training objective.

total = cross_entropy
      + lambda_r  * reconstruction
      + lambda_1  * (mean over prototypes of min distance to an encoding)
      + lambda_2  * (mean over encodings of min distance to a prototype)

The min terms are evaluated over the current minibatch only; at argmin ties
the lowest index receives the full subgradient.
"""

from dataclasses import dataclass

import numpy as np

from protonet.tensor import ShapeError, Tensor, pairwise_sq_dist


@dataclass(frozen=True)
class Hyperparams:
    lambda_r: float = 0.05
    lambda_1: float = 0.05
    lambda_2: float = 0.05
    learning_rate: float = 0.0001
    batch_size: int = 250
    epochs: int = 1500

    def __post_init__(self):
        if min(self.lambda_r, self.lambda_1, self.lambda_2) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class LossBreakdown:
    cross_entropy: float
    reconstruction: float
    proto_to_data: float
    data_to_proto: float
    total: float

    CSV_HEADER = "step,E,R,R1,R2,L"

    def csv_row(self, step: int) -> str:
        return (f"{step},{self.cross_entropy!r},{self.reconstruction!r},"
                f"{self.proto_to_data!r},{self.data_to_proto!r},{self.total!r}")


PROB_FLOOR = 1e-12  # guards log against exact-zero probabilities


def cross_entropy(probabilities: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true class; probs clipped to
    [1e-12, 1] before the log."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = probabilities.shape
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= k:
        raise IndexError(f"label out of range [0, {k})")
    picked = probabilities.clip(PROB_FLOOR, 1.0).pick(labels)
    return -(picked.log().mean())


def reconstruction_loss(original, reconstructed: Tensor) -> Tensor:
    """Mean over the batch of per-example squared L2 reconstruction error."""
    original = original if isinstance(original, Tensor) else Tensor(original)
    if original.shape != reconstructed.shape:
        raise ShapeError(f"reconstruction shapes {original.shape} vs {reconstructed.shape}")
    diff = reconstructed - original
    return (diff * diff).sum() * (1.0 / original.shape[0])


def r1(prototypes: Tensor, encodings: Tensor) -> Tensor:
    """Mean over prototypes of the squared distance to the nearest encoding."""
    if encodings.shape[0] < 1:
        raise ValueError("empty batch")
    return pairwise_sq_dist(encodings, prototypes).min_along(axis=0).mean()


def r2(prototypes: Tensor, encodings: Tensor) -> Tensor:
    """Mean over encodings of the squared distance to the nearest prototype."""
    if encodings.shape[0] < 1:
        raise ValueError("empty batch")
    return pairwise_sq_dist(encodings, prototypes).min_along(axis=1).mean()


def total_loss(trace, batch, labels, prototypes, hyper: Hyperparams,
               autoencoder_enabled: bool = True):
    """Assemble the objective from a forward trace.

    Returns (LossBreakdown, scalar graph Tensor). The reconstruction term is
    zeroed when the autoencoder is disabled, the min terms when the model has
    no prototype layer; a zero weight skips the term entirely so ablations
    are structural, not just multiplied by zero.
    """
    e = cross_entropy(trace.probabilities, labels)
    total = e
    r_val = r1_val = r2_val = 0.0
    if autoencoder_enabled and trace.reconstruction is not None:
        r = reconstruction_loss(batch, trace.reconstruction)
        r_val = r.item()
        if hyper.lambda_r > 0:
            total = total + hyper.lambda_r * r
    if prototypes is not None and trace.distances is not None:
        t1 = trace.distances.min_along(axis=0).mean()
        t2 = trace.distances.min_along(axis=1).mean()
        r1_val, r2_val = t1.item(), t2.item()
        if hyper.lambda_1 > 0:
            total = total + hyper.lambda_1 * t1
        if hyper.lambda_2 > 0:
            total = total + hyper.lambda_2 * t2
    breakdown = LossBreakdown(e.item(), r_val, r1_val, r2_val, total.item())
    return breakdown, total
