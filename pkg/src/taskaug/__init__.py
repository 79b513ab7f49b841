"""Episodic few-shot learning on tasks hardened by gradient ascent.

The package is organised around a small reverse-mode autodiff engine
(`taskaug.tensor`) so every experiment, including gradient ascent on raw
task pixels, runs on one well-tested gradient implementation:

- `taskaug.tasks`: episodic task containers, task flattening, and a
  synthetic multi-domain image benchmark.
- `taskaug.models`: convolutional encoder, classification heads, and the
  episodic loss.
- `taskaug.augment`: random-convolution restyling and the adversarial
  task ascent loop.
- `taskaug.train`: pretraining, meta-training, evaluation, and the
  fine-tuning comparison protocol.
- `taskaug.config` / `taskaug.report` / `taskaug.cli`: experiment
  configuration, result aggregation with figures, and the command line.
"""

from taskaug.tensor import Tape, Tensor, backward, grad_check

__all__ = ["Tape", "Tensor", "backward", "grad_check"]
__version__ = "0.1.0"
