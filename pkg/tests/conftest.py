import math

from reffil.config import default_config
from reffil.data import DomainSpec


def small_config(tasks=2, method="reffil", seed=0, **schedule):
    cfg = default_config()
    cfg.dataset.domains = [DomainSpec(task_id=i + 1, angle=math.radians(50 * i), planes=2) for i in range(tasks)]
    cfg.dataset.samples_per_task = 96
    cfg.dataset.test_samples_per_task = 48
    cfg.dataset.n_classes = 3
    cfg.dataset.in_dim = 6
    opts = dict(rounds=2, epochs=1, select=3, initial_clients=4, increment=1, batch_size=16)
    opts.update(schedule)
    for k, v in opts.items():
        setattr(cfg.schedule, k, v)
    cfg.method = method
    cfg.seed = seed
    return cfg.validate()



ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{name}: {'PASS' if ok else 'FAIL'}  {detail}")
