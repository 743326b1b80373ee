"""gridbed: a desk-scale cyber-physical distribution-feeder testbed.

A simulated unbalanced three-phase feeder is served over Modbus/TCP; a
load-altering attack client stresses it through setpoint registers and a
topology-control client defends it through switch coils.
"""

__version__ = "0.1.0"
