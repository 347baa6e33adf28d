import torch

# Bit-exactness contracts (identity at init, frozen weights, determinism) are
# stated for a fixed execution configuration; pin the thread count once.
torch.set_num_threads(1)
