"""Network definition: encoder, decoder, prototype layer, linear head, softmax.

Presets cover the three case-study architectures plus the two ablation
variants (dense head instead of prototypes; additionally no decoder, ReLU).
"""

import math
from dataclasses import dataclass, asdict

import numpy as np

from protonet import tensor as T
from protonet.tensor import ConvSpec, ShapeError, Tensor

_ACTIVATIONS = ("sigmoid", "relu", "leaky_relu")


@dataclass(frozen=True)
class LayerSpec:
    conv: ConvSpec
    activation: str

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class DecoderLayerSpec(LayerSpec):
    # explicit target extents: strided valid deconvolution is not
    # shape-invertible, so every decoder layer pins its output size
    out_h: int = 0
    out_w: int = 0


@dataclass(frozen=True)
class ModelConfig:
    name: str
    input_shape: tuple  # (H, W, C)
    encoder_layers: tuple  # of LayerSpec
    decoder_layers: tuple  # of DecoderLayerSpec, empty when autoencoder off
    encoder_out_shape: tuple  # (h, w, c) after the last encoder layer
    latent_dim: int
    n_prototypes: int
    n_classes: int
    w_mode: str = "learned"  # "learned" | "negative_identity"
    head_mode: str = "prototype"  # "prototype" | "dense_ablation"
    autoencoder_enabled: bool = True
    leaky_slope: float = 0.01
    conv_bias: bool = True
    dense_activation: str = "sigmoid"  # dense_ablation head only

    def __post_init__(self):
        eh, ew, ec = self.encoder_out_shape
        if eh * ew * ec != self.latent_dim:
            raise ValueError(
                f"latent_dim {self.latent_dim} != encoder output volume {eh * ew * ec}")
        if self.w_mode not in ("learned", "negative_identity"):
            raise ValueError(f"unknown w_mode {self.w_mode!r}")
        if self.w_mode == "negative_identity" and self.n_prototypes != self.n_classes:
            raise ValueError("negative_identity requires n_prototypes == n_classes")
        if self.head_mode not in ("prototype", "dense_ablation"):
            raise ValueError(f"unknown head_mode {self.head_mode!r}")
        if self.autoencoder_enabled and not self.decoder_layers:
            raise ValueError("autoencoder enabled but no decoder layers")


def _encoder_shapes(input_shape, layers):
    """Spatial/channel shape after each encoder layer (and checks channels)."""
    h, w, c = input_shape
    shapes = []
    for ls in layers:
        if ls.conv.in_channels != c:
            raise ShapeError(f"encoder layer expects {ls.conv.in_channels} channels, got {c}")
        h = ls.conv.out_extent(h, "h")
        w = ls.conv.out_extent(w, "w")
        c = ls.conv.out_channels
        shapes.append((h, w, c))
    return shapes


def _build_config(name, input_shape, kernel, stride, padding, channels,
                  activations, last_enc_activation, m, n_classes,
                  autoencoder=True, decoder_last_activation="sigmoid",
                  head_mode="prototype", w_mode="learned",
                  dense_activation="sigmoid"):
    h, w, c_in = input_shape
    enc = []
    c = c_in
    for i, c_out in enumerate(channels):
        act = last_enc_activation if i == len(channels) - 1 else activations
        enc.append(LayerSpec(ConvSpec(kernel, kernel, stride, padding, c, c_out), act))
        c = c_out
    shapes = _encoder_shapes(input_shape, enc)

    dec = []
    if autoencoder:
        # mirror: layer i of the decoder undoes encoder layer (L-1-i),
        # reusing its ConvSpec and targeting its input extents
        in_shapes = [(h, w, c_in)] + shapes[:-1]
        for i in reversed(range(len(enc))):
            th, tw, _ = in_shapes[i]
            act = decoder_last_activation if i == 0 else activations
            dec.append(DecoderLayerSpec(enc[i].conv, act, out_h=th, out_w=tw))

    eh, ew, ec = shapes[-1]
    return ModelConfig(
        name=name, input_shape=tuple(input_shape),
        encoder_layers=tuple(enc), decoder_layers=tuple(dec),
        encoder_out_shape=(eh, ew, ec), latent_dim=eh * ew * ec,
        n_prototypes=m, n_classes=n_classes,
        autoencoder_enabled=autoencoder, head_mode=head_mode, w_mode=w_mode,
        dense_activation=dense_activation)


def preset(name: str) -> ModelConfig:
    """Named architectures: mnist, fashion, car, ablate_proto, ablate_all."""
    if name in ("mnist", "fashion"):
        return _build_config(name, (28, 28, 1), kernel=3, stride=2, padding="same",
                             channels=(32, 32, 32, 10), activations="sigmoid",
                             last_enc_activation="sigmoid", m=15, n_classes=10)
    if name == "car":
        return _build_config(name, (64, 64, 3), kernel=5, stride=2, padding="valid",
                             channels=(32, 10), activations="leaky_relu",
                             last_enc_activation="sigmoid", m=11, n_classes=11)
    if name == "ablate_proto":
        return _build_config(name, (28, 28, 1), kernel=3, stride=2, padding="same",
                             channels=(32, 32, 32, 10), activations="sigmoid",
                             last_enc_activation="sigmoid", m=15, n_classes=10,
                             head_mode="dense_ablation", dense_activation="sigmoid")
    if name == "ablate_all":
        return _build_config(name, (28, 28, 1), kernel=3, stride=2, padding="same",
                             channels=(32, 32, 32, 10), activations="relu",
                             last_enc_activation="relu", m=15, n_classes=10,
                             autoencoder=False, head_mode="dense_ablation",
                             dense_activation="relu")
    raise ValueError(f"unknown preset {name!r}")


@dataclass
class NetworkParams:
    """All learnable tensors; shapes fixed by a ModelConfig."""
    enc_kernels: list
    enc_biases: list
    dec_kernels: list
    dec_biases: list
    prototypes: Tensor  # [m, q]; None for dense_ablation
    classifier: Tensor  # W, [K, m]
    dense_w: Tensor = None  # [m, q], dense_ablation only
    dense_b: Tensor = None  # [m]

    def named(self):
        """Stable name -> Tensor map over every parameter tensor."""
        out = {}
        for i, (k, b) in enumerate(zip(self.enc_kernels, self.enc_biases)):
            out[f"enc{i}/kernel"] = k
            if b is not None:
                out[f"enc{i}/bias"] = b
        for i, (k, b) in enumerate(zip(self.dec_kernels, self.dec_biases)):
            out[f"dec{i}/kernel"] = k
            if b is not None:
                out[f"dec{i}/bias"] = b
        if self.prototypes is not None:
            out["prototypes"] = self.prototypes
        if self.dense_w is not None:
            out["dense/weight"] = self.dense_w
            out["dense/bias"] = self.dense_b
        out["classifier"] = self.classifier
        return out

    def learnable(self):
        return {name: t for name, t in self.named().items() if t.requires_grad}

    def zero_grads(self):
        for t in self.named().values():
            t.zero_grad()


def _glorot(rng, shape, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_params(cfg: ModelConfig, seed: int) -> NetworkParams:
    """Seed-deterministic initialization.

    Conv kernels: uniform +-sqrt(6/(fan_in+fan_out)), biases zero.
    Prototypes: uniform in (0,1)^q. Learned W: uniform +-0.01;
    negative-identity W is fixed (not learnable).
    """
    rng = np.random.default_rng(seed)
    enc_k, enc_b, dec_k, dec_b = [], [], [], []
    for ls in cfg.encoder_layers:
        s = ls.conv
        fan = s.kernel_h * s.kernel_w
        enc_k.append(Tensor(_glorot(rng, (s.kernel_h, s.kernel_w, s.in_channels, s.out_channels),
                                    fan * s.in_channels, fan * s.out_channels),
                            requires_grad=True))
        enc_b.append(Tensor(np.zeros(s.out_channels), requires_grad=True)
                     if cfg.conv_bias else None)
    for ls in cfg.decoder_layers:
        s = ls.conv
        fan = s.kernel_h * s.kernel_w
        # deconv kernel layout [kh, kw, Cout, Cin] with the mirrored spec:
        # Cout = spec.in_channels, Cin = spec.out_channels
        dec_k.append(Tensor(_glorot(rng, (s.kernel_h, s.kernel_w, s.in_channels, s.out_channels),
                                    fan * s.out_channels, fan * s.in_channels),
                            requires_grad=True))
        dec_b.append(Tensor(np.zeros(s.in_channels), requires_grad=True)
                     if cfg.conv_bias else None)

    prototypes = dense_w = dense_b = None
    if cfg.head_mode == "prototype":
        prototypes = Tensor(rng.uniform(0.0, 1.0, size=(cfg.n_prototypes, cfg.latent_dim)),
                            requires_grad=True)
    else:
        dense_w = Tensor(_glorot(rng, (cfg.n_prototypes, cfg.latent_dim),
                                 cfg.latent_dim, cfg.n_prototypes), requires_grad=True)
        dense_b = Tensor(np.zeros(cfg.n_prototypes), requires_grad=True)

    if cfg.w_mode == "negative_identity":
        classifier = Tensor(-np.eye(cfg.n_classes), requires_grad=False)
    else:
        classifier = Tensor(rng.uniform(-0.01, 0.01, size=(cfg.n_classes, cfg.n_prototypes)),
                            requires_grad=True)
    return NetworkParams(enc_k, enc_b, dec_k, dec_b, prototypes, classifier,
                         dense_w, dense_b)


@dataclass
class ForwardTrace:
    """Intermediate quantities of one forward pass, as graph tensors."""
    z: Tensor
    reconstruction: Tensor  # None when autoencoder disabled
    distances: Tensor  # None for the dense_ablation head
    logits: Tensor
    probabilities: Tensor


def _activate(t, name, slope):
    if name == "sigmoid":
        return T.sigmoid(t)
    if name == "relu":
        return T.relu(t)
    return T.leaky_relu(t, slope)


def encode(params, cfg, batch) -> Tensor:
    t = batch if isinstance(batch, Tensor) else Tensor(batch)
    if t.shape[1:] != cfg.input_shape:
        raise ShapeError(f"batch shape {t.shape[1:]} does not match input {cfg.input_shape}")
    for ls, k, b in zip(cfg.encoder_layers, params.enc_kernels, params.enc_biases):
        t = _activate(T.conv2d(t, k, b, ls.conv), ls.activation, cfg.leaky_slope)
    return t.reshape(t.shape[0], cfg.latent_dim)


def decode(params, cfg, z: Tensor) -> Tensor:
    if not cfg.autoencoder_enabled:
        raise ValueError(f"preset {cfg.name!r} has no decoder")
    eh, ew, ec = cfg.encoder_out_shape
    t = z.reshape(z.shape[0], eh, ew, ec)
    for ls, k, b in zip(cfg.decoder_layers, params.dec_kernels, params.dec_biases):
        t = _activate(T.deconv2d(t, k, b, ls.conv, ls.out_h, ls.out_w),
                      ls.activation, cfg.leaky_slope)
    return t


def forward(params: NetworkParams, cfg: ModelConfig, batch) -> ForwardTrace:
    """Full pass: encode, optionally reconstruct, distance/dense head, softmax."""
    z = encode(params, cfg, batch)
    reconstruction = decode(params, cfg, z) if cfg.autoencoder_enabled else None
    if cfg.head_mode == "prototype":
        head = T.pairwise_sq_dist(z, params.prototypes)
        distances = head
    else:
        head = _activate(z.matmul(params.dense_w.transpose()).add_rowvec(params.dense_b),
                         cfg.dense_activation, cfg.leaky_slope)
        distances = None
    logits = head.matmul(params.classifier.transpose())
    probabilities = T.softmax(logits)
    return ForwardTrace(z, reconstruction, distances, logits, probabilities)


def decode_prototypes(params: NetworkParams, cfg: ModelConfig) -> np.ndarray:
    """Run every prototype vector through the decoder -> [m, H, W, C]."""
    if cfg.head_mode != "prototype":
        raise ValueError("model has no prototype layer")
    return decode(params, cfg, Tensor(params.prototypes.data)).numpy()


def predict(params: NetworkParams, cfg: ModelConfig, batch) -> np.ndarray:
    """Most probable class per example; ties go to the lowest class index."""
    return np.argmax(forward(params, cfg, batch).probabilities.numpy(), axis=1)


# ---- config (de)serialization, used by checkpoints ------------------------

def config_to_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def config_from_dict(d: dict) -> ModelConfig:
    enc = tuple(LayerSpec(ConvSpec(**ls["conv"]), ls["activation"])
                for ls in d["encoder_layers"])
    dec = tuple(DecoderLayerSpec(ConvSpec(**ls["conv"]), ls["activation"],
                                 out_h=ls["out_h"], out_w=ls["out_w"])
                for ls in d["decoder_layers"])
    rest = {k: v for k, v in d.items() if k not in ("encoder_layers", "decoder_layers")}
    rest["input_shape"] = tuple(rest["input_shape"])
    rest["encoder_out_shape"] = tuple(rest["encoder_out_shape"])
    return ModelConfig(encoder_layers=enc, decoder_layers=dec, **rest)
