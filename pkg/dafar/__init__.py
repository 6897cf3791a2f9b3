"""Feedback-autoencoder defense against adversarial examples."""
