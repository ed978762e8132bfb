"""Prototype-layer interpretable classifier toolkit.

A convolutional autoencoder coupled to a prototype classification head,
trained with a four-term objective so that the learned prototypes decode
into human-inspectable images.
"""

from protonet.tensor import Tensor, ConvSpec, ShapeError, grad_check
from protonet.model import ModelConfig, NetworkParams, ForwardTrace, preset, init_params, forward, decode_prototypes, predict
from protonet.loss import Hyperparams, LossBreakdown, cross_entropy, reconstruction_loss, r1, r2, total_loss
from protonet.data import Dataset, BatchStream, load_idx, write_idx, load_image_dir, split
from protonet.augment import ElasticParams, elastic_deform, gaussian_kernel_1d
from protonet.train import TrainState, Metrics, train_loop, evaluate, sgd_step, save_checkpoint, load_checkpoint

__version__ = "0.1.0"
