"""
Utils package for kernel_lab
Contains the seeded random streams, the replicate thread pool and the config validator
"""
