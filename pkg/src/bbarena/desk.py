"""The shipped desk-scale evaluation target.

One place defines the default dataset, the default model recipe, and the
default sweep config so the CLI, the shipped config file, and the test
suite cannot drift apart.

The target model is trained with Gaussian augmentation at a scale above
the largest defense noise in the grid. Tiny unaugmented models sit so
close to their data that moderate query noise alone flips their clean
predictions, which no production-scale classifier does; augmentation
restores the realistic regime where the defense has to disturb the
*search*, not the clean prediction.
"""

from __future__ import annotations

import os

from . import netmod
from .harness import ExperimentSpec
from .numkit import Norm

BLOBS = dict(
    d=256,
    k=4,
    n=4096,
    separation=1.08,
    seed=7,
    cluster_std=0.008,
    direction="alternating",
    axis_clip=1.5,
)

LAYERS = (256, 32, 32, 4)
TRAIN = netmod.TrainConfig(
    learning_rate=0.1,
    epochs=80,
    batch_size=64,
    augment_sigma=0.15,
    seed=7,
    schedule="cyclic",
)

LINF_RADIUS = 0.05
L2_RADIUS = 1.0
BUDGET = 2000
SAMPLE_COUNT = 200
SEEDS = (0, 1, 2)

CONFIG_TEMPLATE = """\
# desk-scale evaluation grid
[data]
dataset = {dataset}
sample_count = {sample_count}

[model]
model = {model}

[defense]
nu_grid = {nu_grid}
eval_sigma = 0.05

[attack]
attacks = NES, ZOSIGN, SIMBA, SIGNHUNTER, SQUARE
norm = LINF
radius = {linf_radius}
simba_l2_radius = {l2_radius}
mu_grid = {mu_grid}
m_grid = 1
budget = {budget}
budget_mode = FIXED

[sweep]
seeds = {seeds}
"""


def build_dataset() -> netmod.Dataset:
    return netmod.make_blobs(**BLOBS)


def build_model(data: netmod.Dataset | None = None) -> netmod.MlpModel:
    if data is None:
        data = build_dataset()
    model = netmod.init_model(LAYERS, TRAIN.seed)
    return netmod.train(model, data, TRAIN)


def write_assets(directory: str) -> tuple[str, str, str]:
    """Materialise dataset, model, and sweep config under ``directory``."""
    os.makedirs(directory, exist_ok=True)
    data = build_dataset()
    model = build_model(data)
    data_path = os.path.join(directory, "desk_blobs.csv")
    model_path = os.path.join(directory, "desk_model.txt")
    config_path = os.path.join(directory, "desk.cfg")
    netmod.save_dataset(data, data_path)
    netmod.save_model(model, model_path)
    with open(config_path, "w") as fh:
        fh.write(
            CONFIG_TEMPLATE.format(
                dataset="desk_blobs.csv",
                model="desk_model.txt",
                sample_count=SAMPLE_COUNT,
                nu_grid="0.0, 0.01, 0.1",
                mu_grid="0.001, 0.01",
                linf_radius=LINF_RADIUS,
                l2_radius=L2_RADIUS,
                budget=BUDGET,
                seeds=", ".join(str(s) for s in SEEDS),
            )
        )
    return data_path, model_path, config_path


def default_spec(data_path: str, model_path: str, **overrides) -> ExperimentSpec:
    base = dict(
        model_path=model_path,
        dataset_path=data_path,
        sample_count=SAMPLE_COUNT,
        norm=Norm.LINF,
        radius=LINF_RADIUS,
        attack_list=("NES", "ZOSIGN", "SIMBA", "SIGNHUNTER", "SQUARE"),
        mu_grid=(1e-3, 1e-2),
        nu_grid=(0.0,),
        m_grid=(1,),
        budget=BUDGET,
        budget_mode="FIXED",
        seeds=SEEDS,
        defense_eval_sigma=0.05,
        simba_l2_radius=L2_RADIUS,
    )
    base.update(overrides)
    return ExperimentSpec(**base)
