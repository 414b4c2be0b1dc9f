"""Continuous-time dropout for neuron-decomposed controlled ODEs."""
