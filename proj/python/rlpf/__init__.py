"""Python front end to the rlpf C++ core."""

from ._rlpf import (
    Checkpoint,
    Error,
    Molecule,
    NoiseSchedule,
    PolicyParams,
    RewardRecord,
    denoise,
    energy_forces,
    evaluate,
    finetune,
    force_reward,
    generate_dataset,
    graph_hash,
    init_params,
    load_checkpoint,
    make_schedule,
    masked_logp,
    ppo_objective,
    pretrain,
    project_zero_com,
    read_xyz,
    rejection_sample,
    sample,
    transition,
    valency_reward,
    write_xyz,
)

__all__ = [name for name in dir() if not name.startswith("_")]
