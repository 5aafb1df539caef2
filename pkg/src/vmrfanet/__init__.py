"""Person re-identification with multi-receptive-field attention on a small numpy autodiff core."""

from .errors import VmrfaError
from .network import Network, NetworkConfig
from .tensor import Parameter, Tensor, backward, no_grad, precision

__version__ = "0.1.0"

__all__ = ["Network", "NetworkConfig", "Parameter", "Tensor", "VmrfaError", "backward", "no_grad",
           "precision"]
