import dataclasses
import math

import pytest

from fockchip import chip

ACCEPTANCE_LINES: list[str] = []


def lossless(cfg: chip.ChipConfig, dark: bool = False) -> chip.ChipConfig:
    """Same chip with every loss removed, unit efficiency and (by default) no dark counts."""
    wdm = tuple(chip.WdmCouplerSpec({k: 0.0 for k in w.pass_loss_db},
                                    {k: math.inf for k in w.isolation_db}) for w in cfg.wdm)
    return cfg.replace(
        coupling_loss_db=0.0, wdm=wdm,
        filters={c: dataclasses.replace(f, insertion_loss_db=0.0) for c, f in cfg.filters.items()},
        detectors={c: dataclasses.replace(d, efficiency=1.0, dark_rate_hz=d.dark_rate_hz if dark else 0.0)
                   for c, d in cfg.detectors.items()})


def with_sources(cfg: chip.ChipConfig, **changes) -> chip.ChipConfig:
    return cfg.replace(sources=tuple(dataclasses.replace(s, **changes) for s in cfg.sources))


@pytest.fixture(scope="session")
def paper_cfg():
    return chip.paper_default()


@pytest.fixture(scope="session")
def ideal_cfg(paper_cfg):
    return lossless(paper_cfg)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
