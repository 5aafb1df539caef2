"""Strip-based re-identification network with two attention mounts.

Layout (paper preset, input 3x384x128)::

    stem  conv7x7/2 + bn + relu + maxpool2x2/2      -> 64x96x32
    stage1 bottlenecks                              -> 256x96x32
    stage2 bottlenecks, stride 2                    -> 512x48x16   --> MRFA-1 (stride 2)
    stage3 bottlenecks, stride 2                    -> 1024x24x8   (x mask-1) --> MRFA-2 (stride 1)
    stage4 bottlenecks, stride 1                    -> 2048x24x8   (x mask-2)

The final map feeds one global extractor and six strip extractors; each of
the seven features has its own identity classifier and their L2-normalised
concatenation is the retrieval descriptor.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .errors import ConfigError, ContractError, DimensionError
from .mrfa import MRFA, AttentionCameraExtractor, MrfaConfig, apply_mask
from .nn import ConvBNReLU, FeatureExtractor, Linear, Module
from .tensor import dtype, Tensor, no_grad

CAMERA_SITES = ("attention", "backbone_pre_mask", "backbone_post_mask", "none")
CLASSIFIER_STD = 0.001


@dataclass
class NetworkConfig:
    scale_preset: str = "toy"
    input_height: int = 96
    input_width: int = 32
    stem_channels: int = 8
    stage_channels: tuple = (32, 64, 128, 256)
    blocks_per_stage: tuple = (1, 1, 1, 1)
    strips: int = 6
    global_dim: int = 64
    local_dim: int = 32
    camera_dim: int = 64
    aux_dim: int = 64
    num_identities: int = 16
    num_cameras: int = 4
    camera_loss_site: str = "attention"
    attention_enabled: bool = True

    @classmethod
    def paper(cls, **overrides):
        base = cls(
            scale_preset="paper", input_height=384, input_width=128, stem_channels=64,
            stage_channels=(256, 512, 1024, 2048), blocks_per_stage=(3, 4, 6, 3),
            global_dim=512, local_dim=256, camera_dim=512, aux_dim=512,
            num_identities=751, num_cameras=6,
        )
        return replace(base, **overrides)

    @classmethod
    def toy(cls, **overrides):
        return replace(cls(), **overrides)

    @classmethod
    def preset(cls, name, **overrides):
        if name == "paper":
            return cls.paper(**overrides)
        if name == "toy":
            return cls.toy(**overrides)
        raise ConfigError(f"unknown scale preset {name!r}; expected 'paper' or 'toy'")

    @property
    def descriptor_dim(self):
        return self.global_dim + self.strips * self.local_dim

    @property
    def final_map_shape(self):
        return (self.stage_channels[3], self.input_height // 16, self.input_width // 16)

    def validate(self):
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ConfigError("stage_channels and blocks_per_stage need exactly 4 entries")
        if self.input_height % 16 or self.input_width % 16:
            raise ConfigError(
                f"input {self.input_height}x{self.input_width} must be divisible by the total stride 16")
        fh = self.input_height // 16
        if self.strips <= 0 or fh % self.strips:
            raise ConfigError(f"final feature-map height {fh} is not divisible into {self.strips} strips")
        for c in self.stage_channels:
            if c % 4:
                raise ConfigError(f"stage channels must be multiples of 4, got {c}")
        if self.camera_loss_site not in CAMERA_SITES:
            raise ConfigError(f"camera_loss_site must be one of {CAMERA_SITES}, got {self.camera_loss_site!r}")
        if self.num_identities < 1 or self.num_cameras < 1:
            raise ConfigError("num_identities and num_cameras must be positive")
        return self


@dataclass
class ForwardOutputs:
    id_logits: list
    descriptor: Tensor
    camera_features: list = field(default_factory=list)
    aux_triplet_feature: Tensor = None
    masks: list = field(default_factory=list)
    final_map: Tensor = None


class Bottleneck(Module):
    def __init__(self, rng, in_ch, out_ch, stride):
        mid = out_ch // 4
        self.conv1 = ConvBNReLU(rng, in_ch, mid, 1)
        self.conv2 = ConvBNReLU(rng, mid, mid, 3, stride=stride, padding=1)
        self.conv3 = ConvBNReLU(rng, mid, out_ch, 1, relu=False)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = ConvBNReLU(rng, in_ch, out_ch, 1, stride=stride, relu=False)

    def forward(self, x):
        y = self.conv3(self.conv2(self.conv1(x)))
        skip = x if self.shortcut is None else self.shortcut(x)
        return ops.relu(y + skip)


class Stage(Module):
    def __init__(self, rng, in_ch, out_ch, blocks, stride):
        self.blocks = [Bottleneck(rng, in_ch if i == 0 else out_ch, out_ch, stride if i == 0 else 1)
                       for i in range(blocks)]

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


class BackboneCameraTap(Module):
    """Global pool + affine on a backbone map, for the backbone camera-loss ablations."""

    def __init__(self, rng, in_ch, out_dim):
        self.fc = Linear(rng, in_ch, out_dim)

    def forward(self, fmap):
        return self.fc(ops.flatten(ops.pool2d(fmap, "global_avg")))


class Network(Module):
    def __init__(self, config, seed=0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        c1, c2, c3, c4 = config.stage_channels
        nb = config.blocks_per_stage

        self.stem = ConvBNReLU(rng, 3, config.stem_channels, 7, stride=2, padding=3)
        self.stage1 = Stage(rng, config.stem_channels, c1, nb[0], 1)
        self.stage2 = Stage(rng, c1, c2, nb[1], 2)
        self.stage3 = Stage(rng, c2, c3, nb[2], 2)
        self.stage4 = Stage(rng, c3, c4, nb[3], 1)
        for m in (self.stem, self.stage1, self.stage2, self.stage3, self.stage4):
            m.set_group("backbone")

        self.mrfa1 = MRFA(rng, MrfaConfig(c2, c3, spatial_stride=2))
        self.mrfa2 = MRFA(rng, MrfaConfig(c3, c4, spatial_stride=1))

        self.global_extractor = FeatureExtractor(rng, c4, config.global_dim)
        self.strip_extractors = [FeatureExtractor(rng, c4, config.local_dim) for _ in range(config.strips)]
        dims = [config.local_dim] * config.strips + [config.global_dim]
        self.id_classifiers = [Linear(rng, d, config.num_identities, std=CLASSIFIER_STD) for d in dims]
        self.aux_fc = Linear(rng, c3, config.aux_dim)

        site = config.camera_loss_site
        self.camera_extractors = []
        if site == "attention":
            self.camera_extractors = [AttentionCameraExtractor(rng, c2, config.camera_dim),
                                      AttentionCameraExtractor(rng, c3, config.camera_dim)]
        elif site in ("backbone_pre_mask", "backbone_post_mask"):
            self.camera_extractors = [BackboneCameraTap(rng, c3, config.camera_dim),
                                      BackboneCameraTap(rng, c4, config.camera_dim)]
        self.camera_classifiers = []
        if site != "none":
            self.camera_classifiers = [Linear(rng, config.camera_dim, config.num_cameras, std=CLASSIFIER_STD)
                                       for _ in range(2)]
        self.assign_names()

    # ------------------------------------------------------------ forward

    def _check_input(self, images):
        c = self.config
        expect = (3, c.input_height, c.input_width)
        if images.ndim != 4 or tuple(images.shape[1:]) != expect:
            raise DimensionError(f"expected input Nx{expect[0]}x{expect[1]}x{expect[2]}, got {images.shape}",
                                 (1, 2, 3))

    def forward(self, images):
        """Full forward pass returning every output used by the losses."""
        images = images if isinstance(images, Tensor) else Tensor(images)
        self._check_input(images)
        cfg = self.config

        s1 = self.stage1(ops.pool2d(self.stem(images), "max", 2, 2))
        s2 = self.stage2(s1)
        s3 = self.stage3(s2)
        masks = []
        pre_masks = []
        if cfg.attention_enabled:
            m1, f1 = self.mrfa1(s2)
            s3m = apply_mask(s3, m1)
            masks.append(m1)
            pre_masks.append(f1)
        else:
            s3m = s3
        s4 = self.stage4(s3m)
        if cfg.attention_enabled:
            m2, f2 = self.mrfa2(s3m)
            s4m = apply_mask(s4, m2)
            masks.append(m2)
            pre_masks.append(f2)
        else:
            s4m = s4

        features = [ext(strip) for ext, strip in zip(self.strip_extractors, self.strip_pool(s4m))]
        features.append(self.global_extractor(ops.pool2d(s4m, "global_avg")))
        id_logits = [clf(f) for clf, f in zip(self.id_classifiers, features)]
        descriptor = ops.l2_normalize(ops.concat(features, axis=1))

        aux = ops.l2_normalize(self.aux_fc(ops.flatten(ops.pool2d(s3m, "global_avg"))))

        taps = {"attention": pre_masks, "backbone_pre_mask": [s3, s4], "backbone_post_mask": [s3m, s4m]}
        camera_features = []
        if self.camera_extractors and (cfg.camera_loss_site != "attention" or cfg.attention_enabled):
            camera_features = [ext(t) for ext, t in zip(self.camera_extractors, taps[cfg.camera_loss_site])]

        return ForwardOutputs(id_logits=id_logits, descriptor=descriptor, camera_features=camera_features,
                              aux_triplet_feature=aux, masks=masks, final_map=s4m)

    def split_strips(self, fmap):
        """Cut ``fmap`` into equal horizontal strips of shape NxCx(H/strips)xW."""
        n = self.config.strips
        h = fmap.shape[2] // n
        return [fmap[:, :, k * h:(k + 1) * h, :] for k in range(n)]

    def strip_pool(self, fmap):
        return [ops.pool2d(strip, "global_avg") for strip in self.split_strips(fmap)]

    def camera_logits(self, camera_features):
        return [clf(f) for clf, f in zip(self.camera_classifiers, camera_features)]

    def embed(self, images, batch_size=64):
        """Inference descriptors in eval mode (running batch-norm statistics)."""
        was_training = self.training
        self.eval()
        try:
            rows = []
            with no_grad():
                for start in range(0, len(images), batch_size):
                    chunk = np.asarray(images[start:start + batch_size], dtype=dtype())
                    rows.append(self.forward(Tensor(chunk)).descriptor.data)
            width = self.config.descriptor_dim
            return np.concatenate(rows, axis=0) if rows else np.zeros((0, width), dtype())
        finally:
            self.train(was_training)

    def mrfa_parameters(self):
        return self.mrfa1.parameters() + self.mrfa2.parameters()

    def state_dict(self):
        """Parameters and batch-norm running statistics keyed by unique name."""
        state = {p.name: p.data for p in self.parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state):
        params = {p.name: p for p in self.parameters()}
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise ContractError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.data.shape:
                raise DimensionError(f"{name}: stored shape {state[name].shape} != {p.data.shape}")
        for name, p in params.items():
            p.data[...] = state[name]
        for name, buf in buffers.items():
            buf[...] = state[name]


def build_network(config, seed=0):
    return Network(config, seed)


def forward_train(network, batch_images):
    if not network.training:
        raise ContractError("forward_train needs the network in train mode")
    if batch_images.shape[0] < 2:
        raise ContractError("forward_train needs a batch of at least two images for batch norm")
    return network.forward(batch_images)


def embed(network, images):
    return network.embed(images)


def camera_loss_tap(network, outputs, site=None):
    site = network.config.camera_loss_site if site is None else site
    if site == "none":
        raise ContractError("camera_loss_tap called with camera_loss_site='none'")
    if site != network.config.camera_loss_site:
        raise ContractError(f"network was built for site {network.config.camera_loss_site!r}, not {site!r}")
    return outputs.camera_features
