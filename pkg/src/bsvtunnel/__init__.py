"""Monte Carlo model of strong-field tunneling driven by bright squeezed vacuum.

Modules
-------
quantum_light
    Photon statistics of coherent and multi-mode squeezed-vacuum light.
strong_field
    Pulse model, ADK tunneling exponent and angular streaking.
montecarlo
    Deterministic shot engine producing count and energy histograms.
analysis
    Peak extraction, calibration, fits, estimators and quadrature oracles.
cli_io
    Configuration files, CSV export and the ``sim`` command line.
"""

__version__ = "0.1.0"
