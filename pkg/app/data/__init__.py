# app/data/__init__.py
# Synthetic datasets and augmentations
