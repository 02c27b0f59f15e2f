"""edgrid: a demand-driven eduction grid with a speaker-ID workload on top."""

__version__ = "0.1.0"
