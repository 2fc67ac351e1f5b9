import numpy as np
import pytest
import torch

from carl import config, pipelines, synth
from carl.kernels import _slow

try:
    from carl.kernels import _fast
except ImportError:  # extension not built
    _fast = None

BACKENDS = [pytest.param(_slow, id="python")]
if _fast is not None:
    BACKENDS.append(pytest.param(_fast, id="cython"))


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


TINY = {
    "dataset": {"n_seen": 6, "n_unseen": 3, "sizes": {"train": 240, "val": 12, "eval": 160},
                "polyphony_dist": [0.4, 0.3, 0.3]},
    "encoder": {"d_p": 32, "depth": 1, "heads": 2},
    "slots": {"k": 4, "d_s": 32, "layers": 1, "heads": 2},
    "decoder": {"hidden": 32, "cnn_channels": 4, "ar_width": 32, "ar_layers": 1, "ar_heads": 2},
    "optimizer": {"steps": 12, "probe_steps": 12, "batch_size": 16, "probe_batch_size": 32},
    "experiment": {"slot_dims": [32, 16]},
}


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny") / "data"
    ds = TINY["dataset"]
    vocab = synth.build_vocabulary(3, ds["n_seen"], ds["n_unseen"])
    synth.make_dataset(vocab, ds["sizes"], ds["polyphony_dist"], 3, str(root))
    return str(root)


@pytest.fixture(scope="session")
def tiny_cfg(tiny_root):
    doc = {k: dict(v) for k, v in TINY.items()}
    doc["dataset"]["path"] = tiny_root
    return config.resolve(doc)


@pytest.fixture(scope="session")
def tiny_data(tiny_cfg):
    return pipelines.prepare_data(tiny_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record one pass/fail line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(number, title, passed, detail=""):
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        lines[number] = line
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in range(1, max(10, *lines) + 1):
            terminalreporter.write_line(lines.get(number, f"criterion {number:2d} FAIL  not run or errored before its check"))
