"""Semi-supervised cell instance segmentation with flow-field targets.

Kept import-light on purpose: the CLI entry point must be able to set BLAS
thread caps before numpy is first imported, so no submodule is pulled in here.
"""

__version__ = "0.1.0"
