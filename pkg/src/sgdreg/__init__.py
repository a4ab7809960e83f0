"""Stochastic gradient descent as an iterative regularization method for
systems of nonlinear ill-posed operator equations, with a Monte Carlo
harness for verifying its decay rates and supporting inequalities at desk
scale."""

__version__ = "0.1.0"
