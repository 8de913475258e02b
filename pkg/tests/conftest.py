import pytest

from layersplat.harness import GarmentDef, SceneSpec, make_scene


def small_spec(**kw):
    base = dict(body_gaussians=200, garments=(GarmentDef("shirt", ("torso",), 2, 150, (0.8, 0.3, 0.2)),),
                n_views=6, n_test_views=2, image_size=32, focal=50.0, template_vertices=1200)
    base.update(kw)
    return SceneSpec(**base)


@pytest.fixture(scope="session")
def small_scene():
    return make_scene(small_spec())


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE = {}


def record(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"criterion {number} {title}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
