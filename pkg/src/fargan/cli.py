#
# Copyright (c) the fargan authors.
# SPDX-License-Identifier: Apache-2.0
#

import logging
import os

import click
import numpy as np

from fargan.dataset import array_to_image
from fargan.dataset import image_to_array
from fargan.dataset import ingest_directory
from fargan.dataset import load_image
from fargan.dataset import make_synthetic_manifest
from fargan.dataset import save_image
from fargan.dataset import write_dataset
from fargan.errors import FarganError
from fargan.landmarks import MASK_MODES
from fargan.landmarks import LandmarkSet
from fargan.landmarks import rasterize
from fargan.metrics import evaluate_reenactment
from fargan.train import Trainer
from fargan.train import read_config

logger = logging.getLogger(__name__)

"""
The ``fargan`` command line. Exit codes: 0 on success, 1 on usage errors and 2
on runtime errors.
"""

EXIT_USAGE = 1
EXIT_RUNTIME = 2

existing_file = click.Path(exists=True, dir_okay=False, readable=True, path_type=str)
existing_dir = click.Path(exists=True, file_okay=False, readable=True, path_type=str)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log debug messages.")
@click.help_option("-h", "--help")
def cli(verbose):
    """
    Train and run a one-shot face reenactment GAN.
    """
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


@cli.command("make-data")
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=str))
@click.option("--identities", default=10, show_default=True, type=click.IntRange(min=1))
@click.option("--frames", default=8, show_default=True, type=click.IntRange(min=1))
@click.option("--size", default=64, show_default=True, type=click.IntRange(min=32))
@click.option("--seed", default=0, show_default=True, type=int)
@click.help_option("-h", "--help")
def make_data(out, identities, frames, size, seed):
    """
    Render a synthetic paired-frame dataset to a directory.
    """
    manifest = make_synthetic_manifest(identities, frames, seed)
    written = write_dataset(manifest, out, size)
    click.echo(
        f"identities={len(written.identities)} frames={written.frame_count()} "
        f"train={len(written.train)} test={len(written.test)}"
    )


@cli.command("rasterize")
@click.option("--landmarks", required=True, type=existing_file)
@click.option("--mode", default="contour", show_default=True, type=click.Choice(MASK_MODES))
@click.option("--size", default=64, show_default=True, type=click.IntRange(min=16))
@click.option("--out", required=True, type=click.Path(dir_okay=False, path_type=str))
@click.help_option("-h", "--help")
def rasterize_command(landmarks, mode, size, out):
    """
    Draw a landmark file as a contour or binary mask PNG.
    """
    rasterize(LandmarkSet.read(landmarks), size, mode).save(out)


@cli.command("train")
@click.option("--config", "config_path", required=True, type=existing_file)
@click.option("--data", required=True, type=existing_dir)
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=str))
@click.option(
    "--resume",
    is_flag=True,
    help="Continue from the checkpoint in the output directory.",
)
@click.help_option("-h", "--help")
def train(config_path, data, out, resume):
    """
    Train a generator and discriminator, printing one CSV line per step.
    """
    config = read_config(config_path)
    manifest = ingest_directory(data, seed=config.seed)
    checkpoint_path = os.path.join(out, "checkpoint.farg")
    if resume and os.path.exists(checkpoint_path):
        trainer = Trainer.from_checkpoint(checkpoint_path, manifest=manifest, out_dir=out)
        if trainer.config != config:
            raise click.UsageError(f"{config_path} differs from the config of {checkpoint_path}")
        logger.info("Resuming at step %d", trainer.step)
    else:
        trainer = Trainer(config, manifest=manifest, out_dir=out)
    trainer.fit(on_step=click.echo)


@cli.command("reenact")
@click.option("--checkpoint", "checkpoint_path", required=True, type=existing_file)
@click.option("--source", required=True, type=existing_file)
@click.option("--landmarks", required=True, type=existing_file)
@click.option("--out", required=True, type=click.Path(dir_okay=False, path_type=str))
@click.help_option("-h", "--help")
def reenact(checkpoint_path, source, landmarks, out):
    """
    Reenact a source image toward the expression of a landmark file.
    """
    trainer = Trainer.from_checkpoint(checkpoint_path)
    config = trainer.config
    x_src = image_to_array(load_image(source, config.image_size))
    mask = rasterize(LandmarkSet.read(landmarks), config.image_size, config.mask_mode)
    output = trainer.reenact(x_src[np.newaxis], mask.to_array()[np.newaxis])
    save_image(array_to_image(output[0]), out)


@cli.command("evaluate")
@click.option("--checkpoint", "checkpoint_path", required=True, type=existing_file)
@click.option("--data", required=True, type=existing_dir)
@click.option("--split", default="test", show_default=True, type=click.Choice(["train", "test"]))
@click.help_option("-h", "--help")
def evaluate(checkpoint_path, data, split):
    """
    Print the SSIM and Frechet distance report of a dataset split.
    """
    trainer = Trainer.from_checkpoint(checkpoint_path)
    manifest = ingest_directory(data, seed=trainer.config.seed)
    report = evaluate_reenactment(
        trainer.generator, manifest, trainer.perceptual_net, split=split
    )
    click.echo(report.to_text(), nl=False)


def main(argv=None):
    """
    Run the command line with ``argv`` and return the process exit code.
    """
    try:
        cli.main(args=argv, prog_name="fargan", standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return EXIT_USAGE
    except click.Abort:
        click.echo("Aborted!", err=True)
        return EXIT_USAGE
    except (FarganError, OSError) as e:
        click.echo(f"fargan: error: {e}", err=True)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
