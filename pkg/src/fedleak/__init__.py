"""Federated least-squares workbench: FedAvg simulation, local-model
reconstruction attacks, and attribute inference attacks."""

__version__ = "0.1.0"
