import re
from pathlib import Path

import pytest

from pointlm.checks import REGISTRY, SUITES, run_suite

README = Path(__file__).resolve().parents[1] / "README.md"


@pytest.mark.parametrize("check_id", list(REGISTRY))
def test_check_passes(check_id):
    c = REGISTRY[check_id]
    ok, detail = c.fn()
    assert ok, f"{check_id}: {detail}"


def test_every_suite_nonempty():
    for s in SUITES:
        assert any(c.suite == s for c in REGISTRY.values()), s
    with pytest.raises(KeyError):
        run_suite("bogus")


def test_readme_lists_every_id():
    text = README.read_text()
    section = text.split("## Invariant IDs", 1)[1].split("\n## ", 1)[0]
    listed = re.findall(r"^- `([A-Z]\d+)`", section, flags=re.M)
    assert listed == list(REGISTRY)
