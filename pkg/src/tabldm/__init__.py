"""tabldm: a desk-scale in-context learner for tabular data.

The pieces, bottom to top:

* :mod:`tabldm.kernel` — numpy-backed reverse-mode autodiff, Adam, checkpoints.
* :mod:`tabldm.tabular` — the Table container and CSV round-trip.
* :mod:`tabldm.scm` — synthetic-data forge: hierarchical causal graphs,
  frozen edge functions, subsampling, task adaptation.
* :mod:`tabldm.episodes` — context/query splits and structured cell masking.
* :mod:`tabldm.model` — the axial-attention cell transformer and pretraining.
* :mod:`tabldm.inference` — prediction, retrieval, ensembles, imputation,
  generation, row embeddings.
* :mod:`tabldm.exact` — exact discrete-probability oracle for the
  conditional-reconstruction theory the model relies on.
* :mod:`tabldm.harness` — metrics, baselines, perturbations, probes,
  fine-tuning, scaling-law fits.
* :mod:`tabldm.cli` — command-line entry points; reports are CSV plus
  rendered figures.
"""

__version__ = "0.1.0"
