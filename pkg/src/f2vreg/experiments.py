"""Seeded experiment suites shared by the scripts and the acceptance tests."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose
from .metrics import dist_err, ncc
from .network import NetConfig
from .resample import extract_slice
from .registrar import OptimizerConfig, TrainConfig, classical_register, nn_register, train
from .simulate import SimConfig, generate_sample, make_phantom, samples_for_volume, split_volumes, toy_config

# d is fixed by the toy protocol; the other widths are free at this scale
TOY_NET = NetConfig(d=8, m=32, hidden=64, norm_channels=16)
CLASSICAL_SEED = 20240


@dataclass
class TrialRow:
    index: int
    pose_true: Pose
    pose_found: Pose
    dist_err: float
    img_ncc: float
    seconds: float
    exhausted: bool


@dataclass
class ClassicalReport:
    rows: list[TrialRow] = field(default_factory=list)

    @property
    def success_rate(self) -> float:
        return float(np.mean([r.dist_err < 1.0 for r in self.rows]))

    @property
    def mean_ncc(self) -> float:
        return float(np.mean([r.img_ncc for r in self.rows]))

    @property
    def max_seconds(self) -> float:
        return float(max(r.seconds for r in self.rows))


def classical_trials(
    n: int = 50,
    seed: int = CLASSICAL_SEED,
    cfg: OptimizerConfig = OptimizerConfig(),
    trans: float = 4.0,
    rot: float = 8.0,
    sim: SimConfig = SimConfig(),
) -> ClassicalReport:
    """Register ``n`` phantom frames from the identity init.

    Trial ``i`` draws a fresh phantom and a pose within (+-trans mm, +-rot deg)
    from ``default_rng([seed, i])``.
    """
    report = ClassicalReport()
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        vol, mask = make_phantom(rng, sim.volume_spec)
        pose = Pose(*rng.uniform(-trans, trans, 3), *rng.uniform(-rot, rot, 3))
        s = generate_sample(vol, mask, rng, sim, pose=pose)
        t0 = time.perf_counter()
        res = classical_register(s.volume, s.anchor, Pose(), cfg)
        sec = time.perf_counter() - t0
        found = res.pose
        img = ncc(extract_slice(s.volume, found, s.anchor.spec).data, s.anchor.data)
        report.rows.append(
            TrialRow(i, pose, found, dist_err(found, pose, s.anchor.spec, s.volume.spec), img, sec, res.exhausted)
        )
    return report


@dataclass
class ToyTrainingReport:
    history: list[float]
    first_mean: float
    last_mean: float
    nn_dist_err: float
    identity_dist_err: float
    n_train: int
    n_test: int
    seconds: float

    @property
    def loss_ratio(self) -> float:
        return self.last_mean / self.first_mean


def toy_split(n_volumes: int = 18, seed: int = 0, test_fraction: float = 0.1, transforms: int = 4):
    """Train/test samples of a toy dataset, split by volume."""
    sim = toy_config(transforms_per_volume=transforms, test_fraction=test_fraction)
    tags = split_volumes(n_volumes, test_fraction, seed)
    train_s, test_s = [], []
    for v in range(n_volumes):
        (train_s if tags[v] == "train" else test_s).extend(samples_for_volume(seed, v, sim))
    return train_s, test_s


def toy_training_run(
    seed: int = 0,
    steps: int = 200,
    batch_size: int = 16,
    lr: float = 1e-3,
    net: NetConfig = TOY_NET,
    window: int = 20,
) -> ToyTrainingReport:
    """Train on the 64-sample toy split and score nn vs identity on its test split."""
    train_s, test_s = toy_split(seed=0)
    t0 = time.perf_counter()
    res = train(train_s, TrainConfig(steps=steps, batch_size=batch_size, lr=lr, seed=seed), net)
    sec = time.perf_counter() - t0
    h = res.history
    spec, vspec = test_s[0].anchor.spec, test_s[0].volume.spec
    nn = [dist_err(nn_register(res.params, net, s.volume, s.anchor).pose, s.pose_gt, spec, vspec) for s in test_s]
    ident = [dist_err(Pose(), s.pose_gt, spec, vspec) for s in test_s]
    return ToyTrainingReport(
        h,
        float(np.mean(h[:window])),
        float(np.mean(h[-window:])),
        float(np.mean(nn)),
        float(np.mean(ident)),
        len(train_s),
        len(test_s),
        sec,
    )
