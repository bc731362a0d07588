import pytest
import torch

from cascadeguide.backbone import AdapterConfig, BackboneConfig, GuidedDenoiser
from cascadeguide.inr import InrConfig


def tiny_backbone(**kw) -> BackboneConfig:
    base = dict(base_latent_hw=(4, 4), channels=8, embed_dim=8, num_heads=2, groups=4)
    base.update(kw)
    return BackboneConfig(**base)


def tiny_adapter(**kw) -> AdapterConfig:
    inr = InrConfig(in_channels=8, reduced_dim=8, num_heads=2, num_learnable_tokens=4, mlp_hidden=(8,), out_channels=8)
    return AdapterConfig(inr=inr, **kw)


def perturb_adapter(model: GuidedDenoiser, seed: int = 0, std: float = 0.1) -> None:
    """Give the zero-initialized adapter branches nonzero weights."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, p in model.adapter.named_parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)


@pytest.fixture
def tiny_model() -> GuidedDenoiser:
    torch.manual_seed(0)
    return GuidedDenoiser(tiny_backbone(), tiny_adapter()).eval()


# -- acceptance summary: one line per criterion ---------------------------------

_CRITERIA: dict[int, tuple[str, str, float]] = {}
ACCEPTANCE_NOTES: list[str] = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    num = int(name.split("_")[2])
    if report.when == "call" or report.outcome != "passed":
        prev = _CRITERIA.get(num)
        if prev is None or prev[1] == "PASS":
            status = "PASS" if report.outcome == "passed" else ("SKIP" if report.outcome == "skipped" else "FAIL")
            _CRITERIA[num] = (name, status, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        name, status, dur = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num:2d}: {status}  {name}  ({dur:.1f}s)")
    for line in ACCEPTANCE_NOTES:
        terminalreporter.write_line(line)
