"""Conservative multi-task linear bandit simulator.

Subpackages:
    linalg       dense numerical kernels
    environment  synthetic multi-task bandit world
    solver       safe alternating GD / minimization learner
    baselines    conservative TS, trace-norm, method-of-moments learners
    metrics      regret, violation, and estimation-error accounting
    movielens    MovieLens-100K feature pipeline
    config, cli  experiment configuration and orchestration
"""

__version__ = "0.1.0"
