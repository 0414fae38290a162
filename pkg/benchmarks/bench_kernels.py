"""Compare the numba and numpy kernel paths: python benchmarks/bench_kernels.py [S A H]"""
import sys

from latenthrl.bench import format_table, run_bench

if __name__ == "__main__":
    dims = [int(x) for x in sys.argv[1:4]]
    S, A, H = dims + [60, 4, 30][len(dims):]
    print(format_table(run_bench(S, A, H)))
