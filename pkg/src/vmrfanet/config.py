"""Run configuration: dataclass bundle plus a ``key = value`` file format.

Keys are namespaced (``net.attention``, ``loss.lambda1``, ``hda.sigma`` ...);
unknown keys are rejected.  Later sources win: defaults < config file <
``--set`` overrides.
"""

from dataclasses import dataclass, field, replace

from .data import AugmentConfig, HdaConfig
from .errors import ConfigError
from .losses import CameraLossConfig, LossWeights, TripletConfig
from .network import CAMERA_SITES, NetworkConfig

REFERENCE_MILESTONES = (150, 180, 210, 240, 270, 300, 330, 360)
REFERENCE_EPOCHS = 450


@dataclass
class Schedule:
    milestones: tuple = REFERENCE_MILESTONES
    factor: float = 0.5
    total_epochs: int = REFERENCE_EPOCHS

    def __post_init__(self):
        ms = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError(f"milestones must be strictly increasing, got {ms}")
        if not 0 < self.factor < 1:
            raise ConfigError(f"schedule factor must lie in (0, 1), got {self.factor}")
        if self.total_epochs <= 0:
            raise ConfigError("total_epochs must be positive")
        self.milestones = ms

    @classmethod
    def compressed(cls, total_epochs, factor=0.5):
        """Reference milestones scaled by ``total_epochs / 450`` (duplicates dropped)."""
        scaled = []
        for m in REFERENCE_MILESTONES:
            v = max(1, int(round(m * total_epochs / REFERENCE_EPOCHS)))
            if not scaled or v > scaled[-1]:
                scaled.append(v)
        return cls(tuple(scaled), factor, total_epochs)


@dataclass
class OptimizerConfig:
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_backbone: float = 0.01
    lr_head: float = 0.1
    decay_norm: bool = True  # apply weight decay to batch-norm scales/shifts too

    def __post_init__(self):
        if self.lr_backbone <= 0 or self.lr_head <= 0:
            raise ConfigError("learning rates must be positive")


@dataclass
class TrainConfig:
    net: NetworkConfig = field(default_factory=NetworkConfig.toy)
    weights: LossWeights = field(default_factory=LossWeights)
    triplet: TripletConfig = field(default_factory=lambda: TripletConfig(P=4, K=4))
    camera: CameraLossConfig = field(default_factory=lambda: CameraLossConfig(num_cameras=4))
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: Schedule = field(default_factory=lambda: Schedule.compressed(40))
    manifest: str = ""
    out_dir: str = "run"
    checkpoint_every: int = 5
    steps_per_epoch: int = 0  # 0 -> ceil(train images / batch size)
    seed: int = 0

    @property
    def hda(self):
        return self.augment.hda


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text):
    return tuple(int(v) for v in str(text).replace(",", " ").split())


def _site(text):
    if text not in CAMERA_SITES:
        raise ValueError(f"must be one of {', '.join(CAMERA_SITES)}")
    return text


def _scale(text):
    if text not in ("toy", "paper"):
        raise ValueError("must be 'toy' or 'paper'")
    return text


# key -> (parser, help text with the reference value where one exists)
KEYS = {
    "seed": (int, "global seed for initialisation, sampling and augmentation"),
    "net.scale": (_scale, "scale preset: toy (desk scale) or paper (full scale: 384x128 input, ResNet-50 widths)"),
    "net.attention": (_bool, "mount the two attention modules (reference: on)"),
    "net.camera_loss_site": (_site, "where the camera loss taps features: attention (reference), "
                                    "backbone_pre_mask, backbone_post_mask, none (CUHK03 mode)"),
    "net.num_identities": (int, "identity classes; 0 = number of identities in the training manifest"),
    "loss.lambda1": (float, "weight of the descriptor triplet loss (reference: 5)"),
    "loss.lambda2": (float, "weight of the post-mask-1 triplet loss (reference: 5)"),
    "loss.lambda3": (float, "weight of the camera loss (reference: 1)"),
    "loss.margin": (float, "triplet margin (reference: unstated; default 0.3)"),
    "loss.epsilon": (float, "camera label smoothing (reference: 0.1)"),
    "hda.sigma": (float, "std of the horizontal crop/pad draw (reference: 0.05)"),
    "hda.clip": (float, "maximum crop/pad fraction (reference: 0.15)"),
    "hda.apply_prob": (float, "probability of applying horizontal crop/pad (reference: 0.4; 0 disables)"),
    "aug.flip_prob": (float, "horizontal flip probability (default 0.5)"),
    "aug.erase_prob": (float, "random erasing probability (default 0.5)"),
    "data.manifest": (str, "training manifest CSV (path,person_id,camera_id)"),
    "data.num_cameras": (int, "number of camera views N_v"),
    "data.P": (int, "identities per batch (reference: 24)"),
    "data.K": (int, "images per identity (reference: 4)"),
    "opt.momentum": (float, "SGD momentum (reference: 0.9)"),
    "opt.weight_decay": (float, "coupled weight decay (reference: 0.0005)"),
    "opt.lr_backbone": (float, "initial backbone learning rate (reference: 0.01)"),
    "opt.lr_head": (float, "initial attention/extractor/classifier learning rate (reference: 0.1)"),
    "opt.decay_norm": (_bool, "apply weight decay to batch-norm parameters (default: on)"),
    "sched.epochs": (int, "total epochs (reference: 450)"),
    "sched.milestones": (_ints, "epochs at which the learning rate is multiplied by the factor "
                                "(reference: 150 180 210 240 270 300 330 360; default scales these by epochs/450)"),
    "sched.factor": (float, "learning-rate drop factor (reference: 0.5)"),
    "sched.steps_per_epoch": (int, "optimizer steps per epoch; 0 = ceil(train images / (P*K))"),
    "train.out_dir": (str, "directory for checkpoints and the training log"),
    "train.checkpoint_every": (int, "write a checkpoint every N epochs"),
}


def parse_lines(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        check_key(key)
        values[key] = value
    return values


def check_key(key):
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(sorted(KEYS))}")


def parse_overrides(items):
    values = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        check_key(key)
        values[key] = value
    return values


def load_config_file(path):
    with open(path) as fh:
        return parse_lines(fh.read(), str(path))


def build_config(values, seed=None):
    """Turn raw string values into a :class:`TrainConfig`."""
    parsed = {}
    for key, text in values.items():
        check_key(key)
        parser = KEYS[key][0]
        try:
            parsed[key] = parser(text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    if seed is not None:
        parsed["seed"] = int(seed)

    get = parsed.get
    scale = get("net.scale", "toy")
    net_over = {}
    if "net.attention" in parsed:
        net_over["attention_enabled"] = parsed["net.attention"]
    if "net.camera_loss_site" in parsed:
        net_over["camera_loss_site"] = parsed["net.camera_loss_site"]
    if get("net.num_identities", 0):
        net_over["num_identities"] = parsed["net.num_identities"]
    num_cams = get("data.num_cameras", 6 if scale == "paper" else 4)
    net_over["num_cameras"] = num_cams
    net = NetworkConfig.preset(scale, **net_over)

    defaults = TrainConfig()
    dw = defaults.weights
    weights = LossWeights(get("loss.lambda1", dw.lambda1), get("loss.lambda2", dw.lambda2),
                          get("loss.lambda3", dw.lambda3))
    triplet = TripletConfig(get("loss.margin", 0.3), get("data.P", 24 if scale == "paper" else 4),
                            get("data.K", 4))
    camera = CameraLossConfig(get("loss.epsilon", 0.1), num_cams)
    hda = HdaConfig(get("hda.sigma", 0.05), get("hda.clip", 0.15), get("hda.apply_prob", 0.4))
    augment = AugmentConfig(net.input_height, net.input_width, hda,
                            get("aug.flip_prob", 0.5), get("aug.erase_prob", 0.5))
    do = defaults.optim
    optim = OptimizerConfig(get("opt.momentum", do.momentum), get("opt.weight_decay", do.weight_decay),
                            get("opt.lr_backbone", do.lr_backbone), get("opt.lr_head", do.lr_head),
                            get("opt.decay_norm", do.decay_norm))
    epochs = get("sched.epochs", REFERENCE_EPOCHS if scale == "paper" else defaults.schedule.total_epochs)
    factor = get("sched.factor", 0.5)
    if "sched.milestones" in parsed:
        schedule = Schedule(parsed["sched.milestones"], factor, epochs)
    elif epochs == REFERENCE_EPOCHS:
        schedule = Schedule(REFERENCE_MILESTONES, factor, epochs)
    else:
        schedule = Schedule.compressed(epochs, factor)
    return TrainConfig(net=net, weights=weights, triplet=triplet, camera=camera, augment=augment,
                       optim=optim, schedule=schedule, manifest=get("data.manifest", ""),
                       out_dir=get("train.out_dir", "run"),
                       checkpoint_every=get("train.checkpoint_every", defaults.checkpoint_every),
                       steps_per_epoch=get("sched.steps_per_epoch", 0), seed=get("seed", 0))


def with_net(config, **net_overrides):
    return replace(config, net=replace(config.net, **net_overrides))


def describe_keys():
    width = max(len(k) for k in KEYS)
    return "\n".join(f"  {k.ljust(width)}  {KEYS[k][1]}" for k in KEYS)

