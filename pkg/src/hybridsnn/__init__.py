"""Hybrid spiking pipeline: QCFS-trained backbone converted to IF neurons, STDP classifier on top."""
__version__ = "0.1.0"
