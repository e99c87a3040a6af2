#
# Copyright (c) the fargan authors.
# SPDX-License-Identifier: Apache-2.0
#

import logging
from collections import OrderedDict

import attr
import numpy as np

from fargan.errors import CheckpointFormatError
from fargan.errors import ConfigurationError
from fargan.errors import DimensionError
from fargan.errors import TrainingAborted

logger = logging.getLogger(__name__)

"""
Adam with bias correction and the linear learning rate schedules.
"""

SCHEDULES = ("linear", "warm-linear")


@attr.s
class AdamState:
    """
    First and second moment accumulators keyed by parameter name, with the
    number of updates applied so far.
    """

    beta1 = attr.ib(type=float, default=0.5)
    beta2 = attr.ib(type=float, default=0.999)
    eps = attr.ib(type=float, default=1e-8)
    step = attr.ib(type=int, default=0)
    m = attr.ib(factory=OrderedDict, repr=False)
    v = attr.ib(factory=OrderedDict, repr=False)

    @classmethod
    def create(cls, params, **kwargs):
        """
        Return a zeroed state for the ``params`` mapping of name -> Parameter.
        """
        state = cls(**kwargs)
        for name, param in params.items():
            state.m[name] = np.zeros_like(param.data)
            state.v[name] = np.zeros_like(param.data)
        return state

    def records(self, prefix):
        """
        Return the checkpoint records of this state under ``prefix``.
        """
        records = OrderedDict()
        for name in self.m:
            records[f"{prefix}.m.{name}"] = self.m[name]
            records[f"{prefix}.v.{name}"] = self.v[name]
        records[f"{prefix}.step"] = np.array([self.step], dtype=np.float64)
        return records

    def load_records(self, records, prefix):
        """
        Replace the moments and step with those stored under ``prefix``.
        Every record is checked before anything changes.
        """
        loaded_m = OrderedDict()
        loaded_v = OrderedDict()
        for name in self.m:
            for kind, current, loaded in (("m", self.m, loaded_m), ("v", self.v, loaded_v)):
                key = f"{prefix}.{kind}.{name}"
                if key not in records:
                    raise CheckpointFormatError(f"missing optimizer record {key!r}")
                value = records[key]
                if value.shape != current[name].shape:
                    raise CheckpointFormatError(
                        f"{key!r} has shape {value.shape}, expected {current[name].shape}"
                    )
                loaded[name] = value.astype(current[name].dtype)
        step_key = f"{prefix}.step"
        if step_key not in records:
            raise CheckpointFormatError(f"missing optimizer record {step_key!r}")
        self.m = loaded_m
        self.v = loaded_v
        self.step = int(records[step_key][0])


def adam_step(params, grads, state, lr):
    """
    Apply one bias-corrected Adam update in place to the ``params`` mapping of
    name -> Parameter using the ``grads`` mapping of name -> array.

    A non-finite gradient aborts the update before any parameter changes.
    """
    if lr < 0:
        raise ConfigurationError(f"learning rate must be non-negative, got {lr!r}")
    for name, param in params.items():
        grad = grads[name]
        if grad.shape != param.shape:
            raise DimensionError(
                f"gradient of {name!r} has shape {grad.shape}, parameter has {param.shape}"
            )
        if not np.all(np.isfinite(grad)):
            raise TrainingAborted(
                "non-finite gradient", parameter=name, step=state.step + 1
            )

    state.step += 1
    correction1 = 1 - state.beta1**state.step
    correction2 = 1 - state.beta2**state.step
    for name, param in params.items():
        grad = grads[name]
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * grad
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * grad * grad
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        update = lr * m_hat / (np.sqrt(v_hat) + state.eps)
        param.data = (param.data - update).astype(param.data.dtype)
    return state


def lr_schedule(epoch, cfg):
    """
    Return the learning rate of ``epoch`` for a config with ``lr0``,
    ``total_epochs`` and ``schedule``. ``linear`` decays from ``lr0`` at
    epoch 0 to 0 at ``total_epochs``; ``warm-linear`` holds ``lr0`` for the
    first half and then decays linearly to 0.
    """
    lr0 = cfg.lr0
    total = cfg.total_epochs
    schedule = getattr(cfg, "schedule", "linear")
    if schedule == "linear":
        return lr0 * max(0.0, 1 - epoch / total)
    if schedule == "warm-linear":
        hold = total / 2
        if epoch <= hold:
            return lr0
        return lr0 * max(0.0, (total - epoch) / (total - hold))
    raise ConfigurationError(f"Unknown schedule: {schedule!r}")
