import numpy as np
import pytest
import torch

from cloudremoval.cloudsim import CloudSimConfig, build_dataset, synthetic_tile_pairs

torch.set_num_threads(1)

# A network small enough for 8x8 and 16x16 tiles.
TINY_MODEL = dict(levels=3, width=4, max_filters=8, disc_layers=2)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """12 groups of 16x16 tiles."""
    root = tmp_path_factory.mktemp("ds16")
    pairs = synthetic_tile_pairs(12, side=16, scene_size=64, seed=3)
    build_dataset(pairs, CloudSimConfig(seed=5), root)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Toy experiment: 64x64 tiles, 200 training + 20 held-out groups, 300 steps.
TOY_MODEL = dict(levels=6, width=16, max_filters=128, disc_layers=3)


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    from cloudremoval.mcgan import GroupDataset, TrainConfig, init_state, l1_loss, train

    root = tmp_path_factory.mktemp("toy")
    pairs = synthetic_tile_pairs(220, side=64, scene_size=512, seed=100)
    build_dataset(pairs, CloudSimConfig(seed=1), root / "ds")
    ids = [f"g{i:06d}" for i in range(220)]
    train_set = GroupDataset(root / "ds", ids=ids[:200])
    held_out = GroupDataset(root / "ds", ids=ids[200:])
    cfg = TrainConfig(batch_size=16, epochs=100, max_steps=300, checkpoint_every=1000, model=TOY_MODEL)

    def l1_on(gen, ds):
        gen.eval()
        with torch.no_grad():
            x, y = ds.batch(range(len(ds)))
            return float(l1_loss(y, gen(x)))

    initial = l1_on(init_state(cfg).generator, train_set)
    result = train(train_set, cfg, root / "run")
    return {
        "result": result,
        "train_set": train_set,
        "held_out": held_out,
        "initial_l1": initial,
        "final_l1": l1_on(result.state.generator, train_set),
    }


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")
