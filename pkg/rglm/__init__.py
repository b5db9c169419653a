"""rglm: reconstructive graph instruction tuning on a desk-scale autodiff stack.

Subpackages:

* ``rglm.core``: reverse-mode autodiff, layers and optimizers
* ``rglm.graph``: text-attributed graphs, serialization and GNN pretraining
* ``rglm.lm``: the graph-token language model and reconstruction heads
* ``rglm.info``: exact information-theoretic oracle
* ``rglm.harness``: training, evaluation and experiment suites
"""

from __future__ import annotations

__version__ = "0.1.0"

__all__: list[str] = ["__version__"]
