"""Pathwise stochastic control through rough paths.

Modules
-------
rough_path  grid-sampled level-2 rough paths, Brownian lifts, Hoelder metrics
rde         controlled RDE solver (Davie scheme), adjoint, flow decomposition
control     pathwise optimisation: DP, rough HJB, Hamiltonian residuals
duality     Monte Carlo lower/upper duality bounds and penalties
lqc         linear-quadratic closed forms used as oracles
harness     configuration, deterministic orchestration and CLI
"""

__version__ = "0.1.0"
