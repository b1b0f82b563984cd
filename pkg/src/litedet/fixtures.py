"""The two shipped fixture networks.

``baseline-lite``: strided ConvBNAct downsamplers, C2f stages, SPPF, a plain
decoupled head. ``improved-lite``: HGStem, Ghost_HGBlock stages with GhostConv
downsamplers, C2f-Faster neck, GCDetect head. Both share the same PAN neck
wiring (node ids prefixed ``neck_``) and stage widths 32/48/64, and both map a
1x3x256x256 input to 6-class outputs at strides 8, 16 and 32.
"""

from importlib import resources

from .graph import load_graph

FIXTURES = ("baseline-lite", "improved-lite")


def fixture_path(name):
    if name not in FIXTURES:
        raise KeyError(f"unknown fixture {name!r}; shipped: {', '.join(FIXTURES)}")
    return resources.files(__package__) / "fixtures" / f"{name}.json"


def load_fixture(name):
    return load_graph(fixture_path(name).read_text(encoding="utf-8"))
