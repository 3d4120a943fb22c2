"""Checkpoint archive: a single ``.npz`` mapping string keys to arrays.

Keys (format ``vlcl-checkpoint/1``)::

    format                    0-d str, the format tag
    config                    0-d str, JSON of the run configuration sections
    iteration, epoch          0-d int64
    theta/<param>             main encoder + projection head
    omega/<param>             momentum copy, same names and shapes as theta
    gamma1/<param>, gamma2/<param>   localisation nets
    optim/momentum/<param>    SGD momentum buffers (absent before the first step)
    queue/buffer              (capacity, proj_dim) ring buffer storage
    queue/head, queue/fill    0-d int64 write cursor and occupancy
    rng/episode, rng/augment  0-d str, JSON numpy bit-generator states
"""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import torch

from .contrast import NegativeQueue
from .encoder import EncoderState
from .errors import ConfigError

if TYPE_CHECKING:
    from .trainer import Trainer

FORMAT = "vlcl-checkpoint/1"


def _section_dicts(trainer: "Trainer") -> dict:
    return {
        "encoder": dataclasses.asdict(trainer.encoder_cfg),
        "views": dataclasses.asdict(trainer.view_cfg),
        "contrast": dataclasses.asdict(trainer.contrast_cfg),
        "augment": dataclasses.asdict(trainer.augment_cfg),
        "train": dataclasses.asdict(trainer.cfg),
    }


def save_checkpoint(trainer: "Trainer", path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    st = trainer.state
    arrays = {
        "format": np.array(FORMAT),
        "config": np.array(json.dumps(_section_dicts(trainer))),
        "iteration": np.array(st.iteration, dtype=np.int64),
        "epoch": np.array(st.epoch, dtype=np.int64),
        "queue/buffer": st.queue.buffer.numpy(),
        "queue/head": np.array(st.queue.head, dtype=np.int64),
        "queue/fill": np.array(st.queue.fill, dtype=np.int64),
        "rng/episode": np.array(json.dumps(trainer.episode_rng.bit_generator.state)),
        "rng/augment": np.array(json.dumps(trainer.augment_rng.bit_generator.state)),
    }
    groups = {"theta": st.encoder_state.theta, "omega": st.encoder_state.omega,
              "gamma1": st.gamma1, "gamma2": st.gamma2,
              "optim/momentum": st.momentum_buffers or {}}
    for prefix, params in groups.items():
        for name, tensor in params.items():
            arrays[f"{prefix}/{name}"] = tensor.detach().numpy()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    """Raw key -> array mapping, after checking the format tag."""
    with np.load(Path(path), allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    if str(arrays.get("format")) != FORMAT:
        raise ConfigError(f"{path} is not a {FORMAT} archive")
    return arrays


def _group(arrays: dict, prefix: str, dtype) -> dict:
    plen = len(prefix) + 1
    return {k[plen:]: torch.as_tensor(v, dtype=dtype).clone()
            for k, v in arrays.items() if k.startswith(prefix + "/")}


def checkpoint_config(path) -> dict:
    return json.loads(str(read_checkpoint(path)["config"]))


def load_checkpoint(path, dataset=None) -> "Trainer":
    """Rebuild a :class:`Trainer` exactly as it was when the checkpoint was written."""
    from .autoview import AugmentConfig, ViewConfig
    from .contrast import ContrastConfig
    from .encoder import EncoderConfig
    from .trainer import Trainer, TrainConfig

    arrays = read_checkpoint(path)
    sections = json.loads(str(arrays["config"]))
    trainer = Trainer(
        EncoderConfig(**sections["encoder"]),
        ViewConfig(**sections["views"]),
        ContrastConfig(**sections["contrast"]),
        AugmentConfig(**sections["augment"]),
        TrainConfig(**sections["train"]),
        dataset,
    )
    dtype = trainer.dtype
    st = trainer.state
    st.encoder_state = EncoderState(theta=_group(arrays, "theta", dtype), omega=_group(arrays, "omega", dtype))
    st.gamma1 = _group(arrays, "gamma1", dtype)
    st.gamma2 = _group(arrays, "gamma2", dtype)
    buffers = _group(arrays, "optim/momentum", dtype)
    st.momentum_buffers = buffers or None
    st.queue = NegativeQueue.from_state(torch.as_tensor(arrays["queue/buffer"], dtype=dtype),
                                        int(arrays["queue/head"]), int(arrays["queue/fill"]))
    st.iteration = int(arrays["iteration"])
    st.epoch = int(arrays["epoch"])
    trainer.episode_rng.bit_generator.state = json.loads(str(arrays["rng/episode"]))
    trainer.augment_rng.bit_generator.state = json.loads(str(arrays["rng/augment"]))
    return trainer
