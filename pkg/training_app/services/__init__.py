# Services module for training orchestration
