"""Entry point shim. BLAS thread caps must land in the environment before
numpy loads, so this module stays import-light and defers all real work to
`commands`, which is imported only inside main().

MMCS_THREADS (default 1) caps the BLAS pool; 1 keeps results bit-reproducible
run to run.
"""

import os
import sys


def _cap_threads():
    n = os.environ.get("MMCS_THREADS", "1")
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, n)


def main(argv=None):
    _cap_threads()
    from . import commands

    return commands.run(sys.argv[1:] if argv is None else argv)
