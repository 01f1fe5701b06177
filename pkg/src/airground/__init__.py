"""Air-ground agentification simulator: duplex host/agent protocol, orchestrator and experiments."""

__version__ = "0.1.0"
