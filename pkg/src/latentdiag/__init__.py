"""Latent world models for toy control tasks, plus rollout diagnostics.

Modules: ``core`` (distributions, divergences, gradient checks), ``envs``,
``rssm``, ``training``, ``ensemble``, ``rollouts``, ``diagnostics``,
``config``/``report``/``cli`` (the command-line surface).
"""

__version__ = "0.1.0"
