"""Multi-task meta-learning at desk scale.

Shared convolutional backbone, per-task meta-heads with head-only
inner-loop adaptation, and a task-conditioned channel-attention modulator
(deterministic and probabilistic), plus baselines, synthetic task suites
and analysis tooling. Everything runs on a small numpy autodiff core.
"""

from mmtl.tensor import Tensor, no_grad, set_default_dtype

__all__ = ["Tensor", "no_grad", "set_default_dtype"]
__version__ = "0.1.0"
