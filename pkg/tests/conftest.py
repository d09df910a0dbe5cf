import importlib.resources

import pytest

from kerbtrip.netsim import parse_scenario


def bundled_scenario_names() -> list[str]:
    scn_dir = importlib.resources.files("kerbtrip") / "scenarios"
    return sorted(p.name.removesuffix(".scn") for p in scn_dir.iterdir()
                  if p.name.endswith(".scn"))


def load_bundled(name: str):
    resource = importlib.resources.files("kerbtrip") / "scenarios" / f"{name}.scn"
    return parse_scenario(resource.read_text(encoding="utf-8"),
                          source=f"bundled:{name}", name=name)


@pytest.fixture
def bundled():
    return load_bundled
