"""Subject-invariant contrastive learning on synthetic wearable-sensor data.

Modules: ``numerics`` (reverse-mode autodiff on numpy), ``augment``,
``synthgen`` (synthetic multi-subject world), ``losses``, ``model`` (1-D CNN
encoder), ``harness`` (pretraining and evaluation protocols) and ``cli``.
"""

__version__ = "0.1.0"
