#
# Copyright (c) the fargan authors.
# SPDX-License-Identifier: Apache-2.0
#

import logging
import math
import os
from collections import OrderedDict

import attr
import numpy as np

from fargan import checkpoint
from fargan import tensor as T
from fargan.dataset import collate
from fargan.dataset import sample_pair
from fargan.errors import CheckpointFormatError
from fargan.errors import ConfigurationError
from fargan.errors import TrainingAborted
from fargan.losses import FeatureNet
from fargan.losses import LossWeights
from fargan.losses import total_discriminator_loss
from fargan.losses import total_generator_loss
from fargan.nets import Discriminator
from fargan.nets import Generator
from fargan.nets import NetworkConfig
from fargan.nets import discriminate
from fargan.optim import SCHEDULES
from fargan.optim import AdamState
from fargan.optim import adam_step
from fargan.optim import lr_schedule

logger = logging.getLogger(__name__)

"""
Training configuration, the alternating discriminator/generator update and
checkpointing of a whole training run.

A config file is UTF-8 text of ``key = value`` lines, one per TrainConfig
field. ``#`` starts a comment. For example::

    lr0 = 5e-5
    batch_size = 4
    mask_mode = contour
"""

CSV_COLUMNS = ("step", "lr", "adv_g", "l1", "perceptual", "identity", "total_g", "total_d")

TRUE_WORDS = {"true", "yes", "on", "1"}
FALSE_WORDS = {"false", "no", "off", "0"}


def to_bool(value):
    """
    >>> assert to_bool("yes") is True and to_bool("False") is False
    """
    if isinstance(value, bool):
        return value
    word = str(value).strip().lower()
    if word in TRUE_WORDS:
        return True
    if word in FALSE_WORDS:
        return False
    raise ValueError(f"not a boolean: {value!r}")


def to_resolutions(value):
    if isinstance(value, str):
        value = [v for v in value.replace(",", " ").split() if v]
    return tuple(sorted(int(v) for v in value))


def _choice(*allowed):
    def validator(instance, attribute, value):
        if value not in allowed:
            raise ConfigurationError(f"{attribute.name} must be one of {allowed!r}, got {value!r}")

    return validator


@attr.s(frozen=True)
class TrainConfig:
    """
    Every setting of a training run. String values from a config file are
    converted by each field's converter.
    """

    lr0 = attr.ib(type=float, default=5e-5, converter=float)
    total_epochs = attr.ib(type=int, default=100, converter=int)
    epochs = attr.ib(type=int, default=1, converter=int)
    steps_per_epoch = attr.ib(type=int, default=50, converter=int)
    batch_size = attr.ib(type=int, default=4, converter=int)
    image_size = attr.ib(type=int, default=64, converter=int)
    depth = attr.ib(type=int, default=3, converter=int)
    base_channels = attr.ib(type=int, default=32, converter=int)
    max_channels = attr.ib(type=int, default=256, converter=int)
    spade_hidden = attr.ib(type=int, default=64, converter=int)
    attention_resolutions = attr.ib(type=tuple, default=(16, 32), converter=to_resolutions)
    seed = attr.ib(type=int, default=17, converter=int)
    w_adv = attr.ib(type=float, default=1.0, converter=float)
    w_l1 = attr.ib(type=float, default=20.0, converter=float)
    w_p = attr.ib(type=float, default=2.0, converter=float)
    w_id = attr.ib(type=float, default=0.2, converter=float)
    use_attention = attr.ib(type=bool, default=True, converter=to_bool)
    use_noise = attr.ib(type=bool, default=True, converter=to_bool)
    mask_mode = attr.ib(type=str, default="contour", validator=_choice("contour", "binary"))
    spade_input = attr.ib(type=str, default="features", validator=_choice("features", "masks"))
    use_discriminator = attr.ib(type=bool, default=True, converter=to_bool)
    schedule = attr.ib(type=str, default="linear", validator=_choice(*SCHEDULES))
    perceptual_weights = attr.ib(type=str, default="", converter=str)
    identity_weights = attr.ib(type=str, default="", converter=str)
    checkpoint_every = attr.ib(type=int, default=0, converter=int)

    def __attrs_post_init__(self):
        if not self.lr0 > 0:
            raise ConfigurationError(f"lr0 must be positive, got {self.lr0!r}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be at least 1, got {self.batch_size!r}")
        if self.total_epochs < 1:
            raise ConfigurationError(f"total_epochs must be at least 1, got {self.total_epochs!r}")
        if self.steps_per_epoch < 1:
            raise ConfigurationError(
                f"steps_per_epoch must be at least 1, got {self.steps_per_epoch!r}"
            )
        if self.epochs < 0 or self.checkpoint_every < 0:
            raise ConfigurationError("epochs and checkpoint_every must be non-negative")
        # raises on an inconsistent network shape
        self.network_config()

    @classmethod
    def keys(cls):
        return [a.name for a in attr.fields(cls)]

    @property
    def total_steps(self):
        return self.epochs * self.steps_per_epoch

    def network_config(self):
        return NetworkConfig(
            image_size=self.image_size,
            base_channels=self.base_channels,
            max_channels=self.max_channels,
            depth=self.depth,
            attention_resolutions=self.attention_resolutions,
            use_attention=self.use_attention,
            use_noise=self.use_noise,
            spade_input=self.spade_input,
            mask_mode=self.mask_mode,
            spade_hidden=self.spade_hidden,
        )

    def loss_weights(self):
        return LossWeights(adv=self.w_adv, l1=self.w_l1, perceptual=self.w_p, identity=self.w_id)

    def to_text(self):
        """
        Return the canonical config file text, one line per field in field
        order.
        """
        lines = []
        for name, value in attr.asdict(self).items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{name} = {value}".rstrip() + "\n")
        return "".join(lines)


def parse_config(text):
    """
    Return a TrainConfig from config file ``text``. Unknown, duplicated and
    malformed lines are ConfigurationErrors naming the line.

    >>> config = parse_config("seed = 3  # run three\\nuse_noise = no\\n")
    >>> assert (config.seed, config.use_noise) == (3, False)
    """
    known = set(TrainConfig.keys())
    values = {}
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {line_number}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ConfigurationError(f"line {line_number}: unknown key {key!r}")
        if key in values:
            raise ConfigurationError(f"line {line_number}: duplicate key {key!r}")
        values[key] = value.strip()
    try:
        return TrainConfig(**values)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"invalid config value: {e}") from e


def read_config(path):
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except UnicodeDecodeError as e:
        raise ConfigurationError(f"config file {path!r} is not valid UTF-8") from e
    return parse_config(text)


def _feature_net(path, role):
    if path:
        return FeatureNet.from_file(path, role=role)
    return FeatureNet.perceptual() if role == "perceptual" else FeatureNet.identity()


def csv_line(step, lr, report):
    values = [
        report.adv_g,
        report.l1,
        report.perceptual,
        report.identity,
        report.total_g,
        report.total_d,
    ]
    return ",".join([str(step), repr(float(lr))] + [f"{v:.9g}" for v in values])


class Trainer:
    """
    Own the generator, the discriminator, the frozen feature networks and both
    optimizer states of one training run.
    """

    def __init__(self, config, manifest=None, out_dir=None):
        self.config = config
        self.manifest = manifest
        self.out_dir = out_dir
        self.weights = config.loss_weights()
        network_config = config.network_config()

        init_rng = np.random.default_rng([config.seed, 0])
        self.generator = Generator(network_config, rng=init_rng)
        self.discriminator = None
        if config.use_discriminator:
            self.discriminator = Discriminator(network_config, rng=init_rng)
        self.perceptual_net = _feature_net(config.perceptual_weights, "perceptual")
        self.identity_net = _feature_net(config.identity_weights, "identity")

        self.g_params = self.generator.trainable_parameters()
        self.g_state = AdamState.create(self.g_params)
        self.d_params = OrderedDict()
        self.d_state = None
        if self.discriminator is not None:
            self.d_params = self.discriminator.trainable_parameters()
            self.d_state = AdamState.create(self.d_params)

        self.step = 0
        self.epoch = 0
        self.last_checkpoint = None

    @classmethod
    def from_checkpoint(cls, path, manifest=None, out_dir=None):
        """
        Return a Trainer rebuilt from the config echo of the checkpoint at
        ``path`` with its full training state restored.
        """
        records = checkpoint.load(path)
        if "config" not in records:
            raise CheckpointFormatError(f"{path}: no 'config' record")
        config = parse_config(checkpoint.decode_text(records["config"]))
        trainer = cls(config, manifest=manifest, out_dir=out_dir)
        trainer.apply_records(records)
        trainer.last_checkpoint = path
        return trainer

    def step_rng(self, step):
        return np.random.default_rng([self.config.seed, 1, step])

    def next_batch(self, rng):
        if self.manifest is None:
            raise ConfigurationError("training needs a dataset manifest")
        pairs = [
            sample_pair(
                self.manifest,
                "train",
                rng,
                self.config.image_size,
                self.config.mask_mode,
            )
            for _ in range(self.config.batch_size)
        ]
        return collate(pairs)

    def _check_finite(self, loss, what):
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingAborted(
                f"non-finite {what} loss {value!r}",
                step=self.step + 1,
                last_checkpoint=self.last_checkpoint,
            )

    def _update(self, params, state, lr):
        # parameters outside this step's graph get a zero gradient
        grads = {
            name: p.grad if p.grad is not None else np.zeros_like(p.data)
            for name, p in params.items()
        }
        try:
            adam_step(params, grads, state, lr)
        except TrainingAborted as e:
            raise TrainingAborted(
                "non-finite gradient",
                parameter=e.parameter,
                step=self.step + 1,
                last_checkpoint=self.last_checkpoint,
            ) from e

    def train_step(self, batch, rng, lr=None):
        """
        Run one discriminator update on detached fakes, then one generator
        update, and return the step's LossReport. Without a discriminator
        only the generator is updated and the adversarial term is dropped.
        """
        if lr is None:
            lr = lr_schedule(self.epoch, self.config)
        x_src, x_tgt, m = batch
        fake = self.generator(x_src, m, rng)

        d_report = None
        if self.discriminator is not None:
            self.discriminator.zero_grad()
            fake_scores = discriminate(fake.detach(), m, self.discriminator)
            real_scores = discriminate(x_tgt, m, self.discriminator)
            d_total, d_report = total_discriminator_loss(fake_scores, real_scores, self.weights)
            self._check_finite(d_total, "discriminator")
            d_total.backward()
            self._update(self.d_params, self.d_state, lr)

        self.generator.zero_grad()
        fake_scores = None
        if self.discriminator is not None:
            fake_scores = discriminate(fake, m, self.discriminator)
        g_total, report = total_generator_loss(
            fake,
            x_tgt,
            self.perceptual_net,
            self.identity_net,
            fake_scores=fake_scores,
            weights=self.weights,
        )
        self._check_finite(g_total, "generator")
        g_total.backward()
        self._update(self.g_params, self.g_state, lr)

        self.step += 1
        self.epoch = self.step // self.config.steps_per_epoch
        if d_report is not None:
            report = report.merge(d_report)
        return report

    def fit(self, on_step=None, until=None):
        """
        Train until ``epochs * steps_per_epoch`` steps, or ``until`` steps when
        given, are done, resuming from the current step. Every step's CSV line
        goes to ``on_step`` and to ``<out_dir>/losses.csv``. Return the list of
        LossReports of this call.
        """
        config = self.config
        last_step = config.total_steps if until is None else min(until, config.total_steps)
        reports = []
        csv_file = self._open_csv()
        try:
            while self.step < last_step:
                if self.step % config.steps_per_epoch == 0:
                    logger.info(
                        "Epoch %d: lr=%g", self.epoch, lr_schedule(self.epoch, config)
                    )
                lr = lr_schedule(self.epoch, config)
                rng = self.step_rng(self.step)
                report = self.train_step(self.next_batch(rng), rng, lr)
                reports.append(report)

                line = csv_line(self.step, lr, report)
                if csv_file is not None:
                    csv_file.write(line + "\n")
                    csv_file.flush()
                if on_step is not None:
                    on_step(line)

                if config.checkpoint_every and self.step % config.checkpoint_every == 0:
                    self.save_checkpoint(self.checkpoint_path())
        finally:
            if csv_file is not None:
                csv_file.close()
        if self.out_dir is not None:
            self.save_checkpoint(self.checkpoint_path())
        return reports

    def _open_csv(self):
        if self.out_dir is None:
            return None
        os.makedirs(self.out_dir, exist_ok=True)
        path = os.path.join(self.out_dir, "losses.csv")
        fresh = self.step == 0 or not os.path.exists(path)
        csv_file = open(path, "w" if fresh else "a", encoding="utf-8", newline="\n")
        if fresh:
            csv_file.write(",".join(CSV_COLUMNS) + "\n")
        return csv_file

    def checkpoint_path(self):
        return os.path.join(self.out_dir, "checkpoint.farg")

    def records(self):
        """
        Return every array of the training state as ordered checkpoint
        records.
        """
        records = OrderedDict()
        for name, value in self.generator.state_dict().items():
            records[f"generator.{name}"] = value
        if self.discriminator is not None:
            for name, value in self.discriminator.state_dict().items():
                records[f"discriminator.{name}"] = value
        records.update(self.g_state.records("adam.generator"))
        if self.d_state is not None:
            records.update(self.d_state.records("adam.discriminator"))
        records["trainer.step"] = np.array([self.step], dtype=np.float64)
        records["trainer.epoch"] = np.array([self.epoch], dtype=np.float64)
        records["config"] = checkpoint.encode_text(self.config.to_text())
        return records

    def apply_records(self, records):
        """
        Restore the training state from checkpoint ``records``. On any
        error the previous state is put back before raising.
        """
        previous = self.records()
        try:
            self._apply_records(records)
        except Exception:
            self._apply_records(previous)
            raise

    def _apply_records(self, records):
        for key in ("trainer.step", "trainer.epoch", "config"):
            if key not in records:
                raise CheckpointFormatError(f"missing checkpoint record {key!r}")
        stored = checkpoint.decode_text(records["config"])
        if stored != self.config.to_text():
            raise ConfigurationError("checkpoint was written with a different configuration")

        def section(prefix):
            return OrderedDict(
                (name[len(prefix) :], value)
                for name, value in records.items()
                if name.startswith(prefix)
            )

        self.generator.load_state_dict(section("generator."))
        if self.discriminator is not None:
            self.discriminator.load_state_dict(section("discriminator."))
        self.g_state.load_records(records, "adam.generator")
        if self.d_state is not None:
            self.d_state.load_records(records, "adam.discriminator")
        self.step = int(records["trainer.step"][0])
        self.epoch = int(records["trainer.epoch"][0])

    def save_checkpoint(self, path):
        checkpoint.save(path, self.records())
        self.last_checkpoint = path
        logger.info("Saved checkpoint at step %d to %s", self.step, path)

    def load_checkpoint(self, path):
        self.apply_records(checkpoint.load(path))
        self.last_checkpoint = path
        logger.info("Loaded checkpoint at step %d from %s", self.step, path)

    def reenact(self, x_src, m):
        """
        Return the noise-free reenactment of (N, 3, S, S) source array
        ``x_src`` toward the (N, C, S, S) mask array ``m``.
        """
        was_training = self.generator.training
        self.generator.eval()
        try:
            return self.generator(T.Tensor(x_src), T.Tensor(m)).data
        finally:
            self.generator.train(was_training)
