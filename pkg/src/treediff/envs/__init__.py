"""Point-mass maze world, demonstration generation and test-time tasks."""
