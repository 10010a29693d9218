import time
from dataclasses import dataclass
from pathlib import Path

import pytest
import torch


@pytest.fixture(autouse=True)
def _double_precision():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def central_difference(f, param: torch.Tensor, index: tuple, h: float = 1e-5) -> float:
    """Central finite difference of scalar ``f()`` w.r.t. ``param[index]``."""
    with torch.no_grad():
        orig = param[index].item()
        param[index] = orig + h
        plus = float(f())
        param[index] = orig - h
        minus = float(f())
        param[index] = orig
    return (plus - minus) / (2 * h)


def rel_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


# desk-scale training runs, shared across test modules ---------------------------

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.cfg"
_DESK_CACHE: dict = {}


@dataclass
class DeskRun:
    net: torch.nn.Module
    cfg: object
    train_set: object
    test_set: object
    history: list
    dump: list
    test_pixels: torch.Tensor
    seconds: float

    @property
    def train_top1(self) -> float:
        return self.history[-1]["train_acc"]

    @property
    def test_top1(self) -> float:
        from herbs.evaluation import top_k_accuracy

        return top_k_accuracy(self.dump, 1)


def desk_run(**overrides) -> DeskRun:
    """Train (once per session) on the desk config with ``overrides`` applied."""
    from herbs.evaluation import predict_dump
    from herbs.training import TrainConfig, build_model, epoch_batches, load_datasets, train

    key = tuple(sorted(overrides.items()))
    if key not in _DESK_CACHE:
        cfg = TrainConfig.from_file(DESK_CONFIG).with_overrides([f"{k}={v}" for k, v in key])
        train_set, test_set, _ = load_datasets(cfg)
        net = build_model(cfg, train_set.num_classes)
        start = time.perf_counter()
        result = train(net, train_set, cfg, num_classes=train_set.num_classes)
        seconds = time.perf_counter() - start
        batches = list(epoch_batches(test_set, cfg, 0, "test"))
        dump = predict_dump(net, batches, test_set.ids)
        pixels = torch.cat([b[0] for b in batches])
        _DESK_CACHE[key] = DeskRun(net, cfg, train_set, test_set, result.history, dump, pixels, seconds)
    return _DESK_CACHE[key]


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
