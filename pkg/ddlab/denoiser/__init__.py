"""
The noise-prediction network, its gradients, optimizer, adapters and checkpoints.
"""
