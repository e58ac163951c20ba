import argparse
import copy
import logging
import math
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd
import torch
import torch.optim as optim
from skorch import NeuralNet
from skorch.callbacks import ProgressBar

import constants
from callbacks import LossCurve, Tensorboard
from dataset import DensitySample, TrajectoryDataset, collate_samples
from model import DensityPredictor, ScaledCountLoss, flat_parameters, set_flat_parameters
from process_files import load_label_dataset, save_checkpoint

logger = logging.getLogger(__name__)

DEFAULT_LR = 1e-4
DEFAULT_BATCH_SIZE = 16
DEFAULT_STEPS = 2000
DEFAULT_WEIGHT_DECAY = 1e-2


class TrainingResult(NamedTuple):
    model: DensityPredictor
    losses: List[float]


class GradientCheck(NamedTuple):
    max_relative_error: float
    max_absolute_error: float
    analytic: np.ndarray
    numeric: np.ndarray


def make_net(model_params: constants.ModelParams, lr: float, batch_size: int, max_epochs: int,
             weight_decay: float, callbacks) -> NeuralNet:
    return NeuralNet(
        DensityPredictor,
        module__width=model_params.width,
        module__heads=model_params.heads,
        module__layers=model_params.layers,
        module__descriptor_dim=model_params.descriptor_dim,
        module__head_layers=model_params.head_layers,
        criterion=ScaledCountLoss,
        optimizer=optim.AdamW,
        optimizer__weight_decay=weight_decay,
        lr=lr,
        batch_size=batch_size,
        max_epochs=max_epochs,
        iterator_train__shuffle=True,
        iterator_train__collate_fn=collate_samples,
        iterator_valid__shuffle=False,
        iterator_valid__collate_fn=collate_samples,
        train_split=None,
        device="cpu",
        callbacks=callbacks,
        verbose=0,
    )


def train(samples: Sequence[DensitySample],
          model_params: constants.ModelParams = constants.DEFAULT_MODEL_PARAMS,
          lr: float = DEFAULT_LR,
          batch_size: int = DEFAULT_BATCH_SIZE,
          steps: int = DEFAULT_STEPS,
          weight_decay: float = DEFAULT_WEIGHT_DECAY,
          seed: int = 0,
          log_dir: Optional[str] = None,
          progress: bool = False) -> TrainingResult:
    if not samples:
        raise ValueError("Cannot train on an empty dataset")
    torch.manual_seed(seed)

    dataset = TrajectoryDataset(samples)
    batches_per_epoch = math.ceil(len(dataset) / batch_size)
    curve = LossCurve(max_steps=steps)
    callbacks = [("loss_curve", curve)]
    tensorboard = None
    if log_dir is not None:
        tensorboard = Tensorboard(log_dir)
        callbacks.append(("tensorboard", tensorboard))
    if progress:
        callbacks.append(("progress_bar", ProgressBar()))

    net = make_net(model_params, lr, batch_size, math.ceil(steps / batches_per_epoch), weight_decay, callbacks)
    try:
        net.fit(dataset, y=None)
    finally:
        # an aborted fit never reaches on_train_end
        if tensorboard is not None:
            tensorboard.close()

    losses = list(curve.losses_)
    if losses:
        logger.info("Trained %d steps: loss %.5f -> %.5f", len(losses), losses[0], losses[-1])
    return TrainingResult(net.module_, losses)


def gradient_check(model: DensityPredictor, batch, eps: float = 1e-4, floor: float = 1e-3) -> GradientCheck:
    """
    Compares autograd gradients of the batch loss with central finite differences
    over the flat parameter vector, both in float64. Entries with
    max(|analytic|, |numeric|) >= floor are judged by relative error; the
    near-zero rest, where relative error only measures differencing noise, by
    absolute error.
    """
    model = copy.deepcopy(model).double().train()
    features, labels = batch
    features = {key: value.double() if value.is_floating_point() else value for key, value in features.items()}
    labels = labels.double()
    criterion = ScaledCountLoss()

    model.zero_grad()
    criterion(model(**features), labels).backward()
    analytic = torch.cat([parameter.grad.reshape(-1) for parameter in model.parameters()])

    base = flat_parameters(model)
    numeric = torch.zeros_like(base)
    with torch.no_grad():
        for index in range(base.numel()):
            shifted = base.clone()
            shifted[index] += eps
            set_flat_parameters(model, shifted)
            plus = criterion(model(**features), labels).item()
            shifted[index] -= 2 * eps
            set_flat_parameters(model, shifted)
            minus = criterion(model(**features), labels).item()
            numeric[index] = (plus - minus) / (2 * eps)
        set_flat_parameters(model, base)

    relative, absolute = gradient_errors(analytic, numeric, floor)
    return GradientCheck(relative, absolute, analytic.numpy(), numeric.numpy())


def gradient_errors(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-3):
    """(max relative error over |g| >= floor, max absolute error over |g| < floor); 0.0 for an empty side."""
    magnitude = torch.maximum(analytic.abs(), numeric.abs())
    difference = (analytic - numeric).abs()
    large = magnitude >= floor
    relative = float((difference[large] / magnitude[large]).max()) if bool(large.any()) else 0.0
    absolute = float(difference[~large].max()) if bool((~large).any()) else 0.0
    return relative, absolute


def write_loss_curve(losses: Sequence[float], path) -> None:
    pd.DataFrame({"step": np.arange(len(losses)), "loss": np.asarray(losses)}).to_csv(path, index=False)


def train_from_files(labels_path: str, out_path: str, steps: int = DEFAULT_STEPS, lr: float = DEFAULT_LR,
                     batch_size: int = DEFAULT_BATCH_SIZE, seed: int = 0,
                     model_params: constants.ModelParams = constants.DEFAULT_MODEL_PARAMS,
                     log_dir: Optional[str] = None, progress: bool = False) -> TrainingResult:
    samples = load_label_dataset(labels_path)
    result = train(samples, model_params, lr=lr, batch_size=batch_size, steps=steps, seed=seed,
                   log_dir=log_dir, progress=progress)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, model_params, out_path)
    write_loss_curve(result.losses, out_path.with_suffix(".loss.csv"))
    return result


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--labels")
    parser.add_argument("--out_model")
    parser.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    parser.add_argument("--lr", type=float, default=DEFAULT_LR)
    parser.add_argument("--batch_size", type=int, default=DEFAULT_BATCH_SIZE)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--logdir")

    args = parser.parse_args()
    train_from_files(args.labels, args.out_model, args.steps, args.lr, args.batch_size, args.seed,
                     log_dir=args.logdir)


if __name__ == '__main__':
    main()
