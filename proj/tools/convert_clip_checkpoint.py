#!/usr/bin/env python3
"""Convert a published CLIP checkpoint (.pt, TorchScript or state dict) to safetensors for `backbone = <file>`."""
import argparse

import torch
from safetensors.torch import save_file


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("src")
    ap.add_argument("dst")
    args = ap.parse_args()
    try:
        state = torch.jit.load(args.src, map_location="cpu").state_dict()
    except RuntimeError:
        state = torch.load(args.src, map_location="cpu")
    tensors = {k: v.detach().float().contiguous() for k, v in state.items() if torch.is_tensor(v)}
    save_file(tensors, args.dst, metadata={"source": args.src})
    print(f"{len(tensors)} tensors -> {args.dst}")


if __name__ == "__main__":
    main()
