"""Privacy-preserving AC power flow over additively secret-shared data.

Modules:
    fieldfix   prime-field arithmetic and the fixed-point codec
    transport  party communication, latency simulation, round ledger
    dealer     trusted-dealer preprocessing material
    abb        arithmetic black box on shares with batched rounds
    grid       grid model, admittance estimation, pivot certificate
    pfcore     plaintext Newton power-flow reference solver
    securepfa  the secure Newton protocol and its calibration
    cli        command-line entry points
"""

__version__ = "0.1.0"
