"""Central finite-difference checks of the tape's analytic gradients.

Relative error between analytic gradient ``a`` and numeric gradient ``n`` is
``||a - n|| / max(||a||, ||n||, floor)`` over the checked coordinates.  The
floor keeps tensors whose true gradient is zero (a bias feeding batch norm,
say) from turning float32 round-off into a relative error of one.
"""

import numpy as np

from . import ops
from .losses import LossParts, LossWeights, TripletConfig, CameraLossConfig, batch_hard_triplet
from .losses import camera_loss, combined_loss, id_loss
from .tensor import dtype, Parameter, Tensor, backward

H = 1e-2
ABS_FLOOR = 1e-3
PRIMITIVE_TOL = 1e-3
NETWORK_TOL = 1e-2


def relative_error(analytic, numeric, floor=ABS_FLOOR):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def numeric_grad(f, tensor, h=H, coords=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``tensor.data`` (perturbed in place)."""
    flat = tensor.data.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = []
    for i in coords:
        orig = flat[i]
        flat[i] = orig + flat.dtype.type(h)
        fp = f()
        flat[i] = orig - flat.dtype.type(h)
        fm = f()
        flat[i] = orig
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def check(f_tensor, leaves, h=H, max_coords=None, rng=None):
    """Compare backward of ``f_tensor()`` against finite differences for each leaf.

    ``f_tensor`` rebuilds the graph and returns a scalar Tensor.  Returns the
    largest relative error over the leaves.
    """
    for leaf in leaves:
        leaf.grad = np.zeros_like(leaf.data)
    backward(f_tensor())
    worst = 0.0
    for leaf in leaves:
        coords = None
        if max_coords is not None and leaf.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(leaf.size, max_coords, replace=False)
        analytic = leaf.grad.reshape(-1) if coords is None else leaf.grad.reshape(-1)[coords]
        numeric = numeric_grad(lambda: float(f_tensor().data), leaf, h, coords)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _leaf(rng, shape, scale=1.0, away_from_zero=0.0):
    x = rng.standard_normal(shape) * scale
    if away_from_zero:
        x = np.where(np.abs(x) < away_from_zero, np.sign(x + 1e-9) * away_from_zero + x, x)
    return Parameter(x.astype(dtype()))


def _projection(rng, shape):
    return Tensor(rng.standard_normal(shape).astype(dtype()))


def _distinct(rng, shape, spacing=0.1):
    n = int(np.prod(shape))
    return Parameter((rng.permutation(n) * spacing - n * spacing / 2).reshape(shape).astype(dtype()))


def _case_conv2d(rng):
    x, w, b = _leaf(rng, (2, 3, 5, 5)), _leaf(rng, (4, 3, 3, 3), 0.5), _leaf(rng, (4,))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    probe = _projection(rng, ops.conv2d(x, w, b, stride, pad).shape)
    return lambda: ops.sum(ops.conv2d(x, w, b, stride, pad) * probe), [x, w, b]


def _case_conv2d_asym(rng):
    x, w = _leaf(rng, (2, 4, 6, 5)), _leaf(rng, (3, 4, 1, 3), 0.5)
    probe = _projection(rng, (2, 3, 6, 5))
    return lambda: ops.sum(ops.conv2d(x, w, None, 1, (0, 1)) * probe), [x, w]


def _case_pool(mode):
    def case(rng):
        x = _distinct(rng, (2, 3, 4, 6)) if mode == "max" else _leaf(rng, (2, 3, 4, 6))
        probe = _projection(rng, ops.pool_output_shape(x.shape, mode, 2, 2))
        return lambda: ops.sum(ops.pool2d(x, mode, 2, 2) * probe), [x]
    return case


def _case_affine(rng):
    x, w, b = _leaf(rng, (3, 5)), _leaf(rng, (4, 5)), _leaf(rng, (4,))
    probe = _projection(rng, (3, 4))
    return lambda: ops.sum(ops.affine(x, w, b) * probe), [x, w, b]


def _case_batch_norm(rng):
    x = _leaf(rng, (4, 3, 2, 2), 2.0)
    # |gamma| >= 0.5 keeps the input gradient well above float32 round-off
    gamma = Parameter((rng.uniform(0.5, 1.5, 3) * rng.choice([-1, 1], 3)).astype(dtype()))
    beta = _leaf(rng, (3,))
    rm, rv = np.zeros(3, dtype()), np.ones(3, dtype())
    probe = _projection(rng, x.shape)
    return lambda: ops.sum(ops.batch_norm(x, gamma, beta, rm, rv, True) * probe), [x, gamma, beta]


def _case_unary(fn, away=0.0):
    def case(rng):
        x = _leaf(rng, (3, 7), away_from_zero=away)
        probe = _projection(rng, x.shape)
        return lambda: ops.sum(fn(x) * probe), [x]
    return case


def _case_binary(fn):
    def case(rng):
        a, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (2, 3, 4))
        probe = _projection(rng, a.shape)
        return lambda: ops.sum(fn(a, b) * probe), [a, b]
    return case


def _case_concat(rng):
    a, b = _leaf(rng, (2, 3, 2, 2)), _leaf(rng, (2, 5, 2, 2))
    probe = _projection(rng, (2, 8, 2, 2))
    return lambda: ops.sum(ops.concat_along_channel([a, b]) * probe), [a, b]


def _case_sqrt(rng):
    x = Parameter((rng.uniform(0.5, 3.0, (3, 4))).astype(dtype()))
    probe = _projection(rng, x.shape)
    return lambda: ops.sum(ops.sqrt(x) * probe), [x]


PRIMITIVE_CASES = {
    "conv2d": _case_conv2d,
    "conv2d_asymmetric": _case_conv2d_asym,
    "pool2d_avg": _case_pool("avg"),
    "pool2d_max": _case_pool("max"),
    "pool2d_global_avg": _case_pool("global_avg"),
    "affine": _case_affine,
    "batch_norm": _case_batch_norm,
    "relu": _case_unary(ops.relu, away=0.05),
    "tanh": _case_unary(ops.tanh),
    "tanh_plus_one": _case_unary(ops.tanh_plus_one),
    "l2_normalize": _case_unary(ops.l2_normalize),
    "log_softmax": _case_unary(ops.log_softmax),
    "sqrt": _case_sqrt,
    "elementwise_mul": _case_binary(ops.elementwise_mul),
    "elementwise_add": _case_binary(ops.elementwise_add),
    "concat_along_channel": _case_concat,
}


def primitive_suite(instances=20, seed=0):
    """Max relative error per primitive over ``instances`` random cases each."""
    rng = np.random.default_rng(seed)
    report = {}
    for name, make in PRIMITIVE_CASES.items():
        worst = 0.0
        for _ in range(instances):
            f, leaves = make(rng)
            worst = max(worst, check(f, leaves))
        report[name] = worst
    return report


def toy_batch(config, seed=0, ids=2, per_id=2):
    """A small standardised random batch with identity and camera labels."""
    rng = np.random.default_rng(seed)
    n = ids * per_id
    x = rng.standard_normal((n, 3, config.input_height, config.input_width)).astype(dtype())
    labels = np.repeat(np.arange(ids), per_id)
    # push identities apart so hardest-pair selection is not on a knife edge
    x += labels[:, None, None, None].astype(dtype()) * dtype()(0.5)
    cams = rng.integers(0, config.num_cameras, n)
    return x, labels, cams


def network_loss_fn(network, x, labels, cams, weights=None, triplet=None, camera=None):
    weights = weights or LossWeights()
    triplet = triplet or TripletConfig(margin=0.3, P=len(np.unique(labels)), K=len(labels) // len(np.unique(labels)))
    camera = camera or CameraLossConfig(0.1, network.config.num_cameras)

    def f():
        out = network(Tensor(x))
        cam = camera_loss(network.camera_logits(out.camera_features), cams, camera) \
            if out.camera_features else Tensor(np.zeros((), dtype()))
        parts = LossParts(id_loss(out.id_logits, labels),
                          batch_hard_triplet(out.descriptor, labels, triplet),
                          batch_hard_triplet(out.aux_triplet_feature, labels, triplet),
                          cam)
        return combined_loss(parts, weights)

    return f


def network_check(network, x, labels, cams, coords_per_param=3, seed=0, h=H):
    """Per-parameter-tensor relative errors of the full combined loss at sampled coordinates.

    Returns ``{name: (relative error, max |analytic|)}``.
    """
    f = network_loss_fn(network, x, labels, cams)
    network.zero_grad()
    backward(f())
    rng = np.random.default_rng(seed)
    errors = {}
    scalar = lambda: float(f().data)  # noqa: E731
    for p in network.parameters():
        k = min(coords_per_param, p.size)
        coords = rng.choice(p.size, k, replace=False)
        analytic = p.grad.reshape(-1)[coords].copy()
        numeric = numeric_grad(scalar, p, h, coords)
        errors[p.name] = (relative_error(analytic, numeric), float(np.abs(analytic).max()))
    return errors


def network_convergence(config, steps=(1e-2, 1e-3, 1e-4, 1e-5), seed=0, coords_per_param=2):
    """Worst per-tensor error of the full loss at float64 for a sequence of step sizes.

    Finite differences of a piecewise-smooth loss only agree with the
    analytic gradient once the step is small enough not to cross a ReLU or
    max-pool kink, so a correct backward shows the error falling towards
    zero as ``h`` shrinks.  Returns ``{h: worst error}``.
    """
    from .network import Network
    from .tensor import precision

    out = {}
    with precision(np.float64):
        network = Network(config, seed=seed)
        network.train()
        x, labels, cams = toy_batch(config, seed)
        x = x.astype(np.float64)
        for h in steps:
            errs = network_check(network, x, labels, cams, coords_per_param, seed, h)
            out[h] = max(e for e, _ in errs.values())
    return out
