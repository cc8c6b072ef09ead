"""Small configurations shared by the trainer, CLI and acceptance tests."""

from whar.config import RunConfig
from whar.data import generate_synthetic, prepare_splits

TINY_CFG = """\
[model]
n_sensors = 2
n_variables = 2
seq_len = 16
n_classes = 3
[mfe]
channels = 4
[cfb]
r = 2
[gta]
state_size = 2
[attention]
d_k = 4
[generate]
n_classes = 3
n_sensors = 2
n_variables = 2
seq_len = 16
train_domains = 2
per_class_domain = 4
test_per_class = 3
[train]
lr = 0.003
batch_size = 8
max_epochs = 4
patience = 2
"""


def tiny_config(**train) -> RunConfig:
    from whar.config import parse_config_text

    cfg = parse_config_text(TINY_CFG)
    for key, value in train.items():
        setattr(cfg.train, key, value)
    return cfg


def tiny_splits(cfg: RunConfig):
    splits, _ = prepare_splits(generate_synthetic(cfg.generate))
    return splits
