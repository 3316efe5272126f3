"""Torch network definitions for the GAN and classifier stages"""
