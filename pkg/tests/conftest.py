import re
from pathlib import Path

import numpy as np
import pytest

from pixfold.config import toy_config

GOLDEN = Path(__file__).parent / "golden"


def parse_golden_trace(path=GOLDEN / "reference_trace_stage0.txt"):
    """{variant: [(layer, shape tuple, kernel tuple | None), ...]} from the hand-written table."""
    out, current = {}, None
    for line in path.read_text(encoding="utf-8").splitlines():
        m = re.match(r"# variant: (\S+)", line)
        if m:
            current = out.setdefault(m.group(1), [])
            continue
        if not line.strip() or line.startswith("#"):
            continue
        name, shape, kernel = (c.strip() for c in line.split("|"))
        current.append((
            name,
            tuple(int(v) for v in shape.split("x")),
            None if kernel == "-" else tuple(int(v) for v in kernel.split("x")),
        ))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_run_config():
    """Toy run shrunk further so a few steps take well under a second."""
    cfg = toy_config()
    cfg.generator.init_dims = [16, 16, 8]
    cfg.generator.block_channels = [16, 16, 8]
    cfg.generator.fold_width = 2
    cfg.generator.latent_dim = 16
    cfg.discriminator.base_channels = 4
    cfg.discriminator.max_channels = 16
    cfg.train.batch_size = 4
    cfg.train.r1_every = 2
    cfg.dataset.count = 64
    cfg.proxy_fid_samples = 64
    return cfg.validate()
