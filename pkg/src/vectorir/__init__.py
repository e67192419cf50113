"""Vectored dynamic IR-drop prediction and worst-case slice profiling."""

__version__ = "0.1.0"
