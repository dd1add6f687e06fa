"""Distribution steering for discrete-time control-affine systems.

Per-step neural feedback policies are trained with a regularized
maximum-likelihood objective so that the closed-loop system acts as an
invertible residual flow pushing an initial state distribution onto a
target one.  An affine-policy covariance-steering benchmark and exact
discrete optimal-transport metrics round out the toolkit.
"""

__version__ = "0.1.0"
