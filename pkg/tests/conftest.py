import os

# Cap BLAS threading before numpy is first imported anywhere in the test
# process; single-threaded GEMM keeps training runs bit-reproducible.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
os.environ.setdefault("MMCS_THREADS", "1")
