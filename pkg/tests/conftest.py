import torch

# Single-threaded torch keeps every numeric result reproducible; the numba
# rasterizer parallelism is bit-exact by construction and needs no pinning.
torch.set_num_threads(1)
