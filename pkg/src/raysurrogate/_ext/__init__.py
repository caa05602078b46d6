"""Compiled tracing kernels (Cython). Import through :mod:`raysurrogate.kernels`."""
