"""Hardware-in-the-loop VANET testbed: DES kernel, 802.11p-style medium, Q-learning QoS agent."""

__version__ = "0.1.0"
