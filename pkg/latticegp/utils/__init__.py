"""Numerical core: lattices, covariances, FFT algebra, solvers and estimators."""
