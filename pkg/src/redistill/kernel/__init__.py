"""Minimal verified numeric kernel: NCHW tensors, NN primitives with
hand-written backward passes, adapter-block math, distillation and
diffusion losses, and finite-difference gradient checking."""
