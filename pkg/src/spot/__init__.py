"""Push-forward optimal transport at desk scale.

Subpackage map:

* ``tensor``  - float64 reverse-mode autodiff substrate
* ``nn``      - fully connected networks + spectral normalization
* ``optim``   - Adam (and plain SGD) with ascent/descent steps
* ``dist``    - marginal/latent distributions, datasets, deterministic RNG
* ``cost``    - ground costs (euclidean, squared, Sobel edge, embedding)
* ``trainer`` - minimax coupling trainer, WD estimates, plan sampling
* ``flow``    - ODE-flow generator: density transport, entropy, adjoint grads
* ``oracle``  - exact/reference OT solvers used to validate every estimate
* ``adapt``   - toy domain adaptation on top of the coupling trainer
* ``cli``     - config-driven runner, checkpoints, artifact emission
"""

from .tensor import Tensor, Graph

__all__ = ["Tensor", "Graph"]
__version__ = "0.1.0"
