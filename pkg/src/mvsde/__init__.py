"""Simulation lab for McKean-Vlasov SDEs with kernel-form, possibly log-Lipschitz coefficients."""

__version__ = "1.0.0"
