"""restorekit: few-image restoration training toolkit.

Pipeline pieces: paired-image I/O and patch extraction, streaming patch
clustering, batch-sampling strategies with utilization analysis, episodic
task generation, a small differentiable CNN, and the two-loop task-driven
trainer with a conventional data-driven baseline.
"""

__version__ = "0.1.0"
