"""Echocardiography segmentation with Vanilla and Matryoshka-autoencoder U-Nets on a numpy autograd core."""

__version__ = "0.1.0"
