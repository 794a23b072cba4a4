"""Mutual-information regularised offline actor-critic on small control tasks.

Submodules:

* ``autodiff``: reverse-mode automatic differentiation over numpy arrays.
* ``distributions``: tanh-squashed Gaussian policies and log-densities.
* ``mi_estimators``: BA, MISA-f, MISA-DV and MISA lower bounds.
* ``mcmc``: Hamiltonian Monte Carlo on the improved-policy energy.
* ``agent``: the offline actor-critic and its ablation variants.
* ``data``, ``envs``: toy environments, offline datasets and evaluation.
* ``cli``: the ``misa`` command-line tool.
"""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
