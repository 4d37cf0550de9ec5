"""soupkit: adversarially robust model soups at desk scale.

Train small image classifiers nominally or adversarially under linf/l2/l1
threat models, fine-tune robust bases toward other threats, combine the
resulting parameter vectors into affine soups (including extrapolation),
and select soup weights by grid search on adaptation data.
"""

__version__ = "0.1.0"

from .kernels import backend_name
from .tensor import Tensor, backward, no_grad

__all__ = ["Tensor", "backward", "no_grad", "backend_name", "__version__"]
