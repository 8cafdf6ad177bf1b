"""Networked-microgrid resilience toolkit: grid simulation, federated SAC, policy serving."""
