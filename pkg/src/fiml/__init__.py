"""Few-iteration meta-learning with a steepest-descent base learner.

The inner loop fits a linear head by a handful of steepest-descent steps
with analytically computed step lengths; the outer loop meta-learns the
loss, initializer and fusion hyperparameters by differentiating through
the unrolled iterations.
"""

__version__ = "0.1.0"
