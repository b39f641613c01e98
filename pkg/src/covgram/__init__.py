"""covgram: covariance-matching regularization toolkit.

A small, fully deterministic stack for studying what happens when a model's
basis-function Gram matrix is trained to match the empirical covariance of
its targets: a minimal reverse-mode tensor core, three model families, the
covariance objective itself, constraint diagnostics, an exact GP oracle,
synthetic data generators, and an experiment harness with a CLI.
"""

__version__ = "0.1.0"
