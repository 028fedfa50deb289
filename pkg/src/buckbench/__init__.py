"""buckbench: a buck-converter control workbench.

Plant simulation (switched and averaged), a tuned PI baseline, a from-scratch
feedforward neural network, one-step neural system identification, and a
receding-horizon neural predictive controller, wired together by a CLI that
reproduces start-up, load-change, and reference-change experiments.
"""

__version__ = "0.1.0"
