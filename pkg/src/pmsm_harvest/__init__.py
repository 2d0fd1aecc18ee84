"""Vector-control design and simulation for a PMSM vibration energy harvester."""

__version__ = "0.1.0"
