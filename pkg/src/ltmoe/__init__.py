"""Long-tailed classification with a depth-fused mixture of experts.

Submodules: data (long-tailed dataset construction), model (staged
backbone + experts with depth-wise fusion), losses (distillation and
balanced-softmax objectives), training (two-stage decoupled training),
evaluation (division metrics, diagnostics, sweeps), cli (entry point).
"""

__version__ = "0.1.0"
