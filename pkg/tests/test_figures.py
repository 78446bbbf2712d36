import xml.etree.ElementTree as ET

import numpy as np

from fskd import figures
from fskd import synth as S
from fskd.pipeline import KeypointEstimate

SVG = "{http://www.w3.org/2000/svg}"


def test_episode_overlay_elements():
    t = S.make_template(0)
    sup, qry = S.render_instance(t, 0), S.render_instance(t, 1)
    est = [KeypointEstimate(1, np.array([40.0, 30.0]), np.diag([4.0, 1.0]), [])]
    svg = figures.episode_overlay(sup, qry, est, {"seed": 1})
    root = ET.fromstring(svg)
    assert root.find(SVG + "metadata").text == '{"seed":1}'
    ell = root.find(f".//{SVG}ellipse")
    assert float(ell.get("rx")) == 6 * 4 and float(ell.get("ry")) == 3 * 4
    assert len(root.findall(f".//{SVG}image")) == 2
    assert root.findall(f".//{SVG}path")  # tilted cross


def test_overlay_is_deterministic():
    t = S.make_template(1)
    sup, qry = S.render_instance(t, 0), S.render_instance(t, 1)
    est = [KeypointEstimate(0, np.array([10.0, 20.0]), np.eye(2), [])]
    assert figures.episode_overlay(sup, qry, est, {}) == figures.episode_overlay(sup, qry, est, {})


def test_comparison_panels():
    img = np.zeros((10, 12, 3), np.uint8)
    root = ET.fromstring(figures.comparison([("a", img), ("b", img)], {"k": 1}, points={1: [(2, 3)]}))
    assert len(root.findall(f".//{SVG}image")) == 2
    assert len(root.findall(f".//{SVG}circle")) == 1
