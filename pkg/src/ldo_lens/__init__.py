"""Small-signal stability and load-transient analysis of a capacitor-less,
Miller-compensated three-stage LDO regulator, with a conventional
ESR-compensated LDO as baseline."""

__version__ = "0.1.0"
